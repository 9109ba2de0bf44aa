//! Banded symmetric positive definite storage and Cholesky factorization.
//!
//! The P1 stiffness matrix on a structured triangulation has lower bandwidth
//! `M + 2` under row-major node numbering, so a dense band factorization is
//! both exact and cheap at the grid sizes used here.

use crate::error::{Error, Result};

/// Lower triangle of a symmetric band matrix.
///
/// Entry `(i, j)` with `i - bw <= j <= i` lives at `data[i * (bw + 1) + bw - (i - j)]`.
#[derive(Clone, Debug)]
pub struct BandedSpd {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl BandedSpd {
    pub fn zeros(n: usize, bw: usize) -> Self {
        Self {
            n,
            bw,
            data: vec![0.0; n * (bw + 1)],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i - j <= self.bw, "({i}, {j}) outside band");
        i * (self.bw + 1) + self.bw - (i - j)
    }

    /// Adds `v` to the symmetric pair `(i, j)`, `(j, i)`.
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        let s = self.slot(r, c);
        self.data[s] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        if r - c > self.bw {
            0.0
        } else {
            self.data[self.slot(r, c)]
        }
    }

    pub fn diagonal(&self, i: usize) -> f64 {
        self.data[self.slot(i, i)]
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let lo = i.saturating_sub(self.bw);
            let row = &self.data[i * (self.bw + 1)..(i + 1) * (self.bw + 1)];
            let off = self.bw - (i - lo);
            let mut acc = 0.0;
            for (k, j) in (lo..i).enumerate() {
                let a = row[off + k];
                acc += a * x[j];
                y[j] += a * x[i];
            }
            acc += row[self.bw] * x[i];
            y[i] += acc;
        }
        y
    }

    /// In-place band Cholesky `A = L L^T`.
    pub fn cholesky(&self) -> Result<BandedCholesky> {
        let n = self.n;
        let bw = self.bw;
        let w = bw + 1;
        let mut l = self.data.clone();
        let mut dmin = f64::INFINITY;
        let mut dmax = 0.0f64;
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            for j in lo..=i {
                // l[i][j] = (a[i][j] - sum_{k<j} l[i][k] l[j][k]) / l[j][j]
                let klo = lo.max(j.saturating_sub(bw));
                let mut s = l[i * w + bw - (i - j)];
                for k in klo..j {
                    s -= l[i * w + bw - (i - k)] * l[j * w + bw - (j - k)];
                }
                if j == i {
                    if !(s > 0.0) || !s.is_finite() {
                        let condition = if dmin.is_finite() && dmin > 0.0 {
                            dmax / dmin
                        } else {
                            f64::INFINITY
                        };
                        return Err(Error::SolverFailure {
                            row: i,
                            condition,
                        });
                    }
                    let d = s.sqrt();
                    dmin = dmin.min(s);
                    dmax = dmax.max(s);
                    l[i * w + bw] = d;
                } else {
                    l[i * w + bw - (i - j)] = s / l[j * w + bw];
                }
            }
        }
        Ok(BandedCholesky {
            n,
            bw,
            l,
            pivot_ratio: dmax / dmin,
        })
    }
}

#[derive(Clone, Debug)]
pub struct BandedCholesky {
    n: usize,
    bw: usize,
    l: Vec<f64>,
    pivot_ratio: f64,
}

impl BandedCholesky {
    /// Ratio of the largest to smallest squared pivot, a cheap condition proxy.
    pub fn pivot_ratio(&self) -> f64 {
        self.pivot_ratio
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        let (n, bw, w) = (self.n, self.bw, self.bw + 1);
        let mut y = b.to_vec();
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            let mut s = y[i];
            for k in lo..i {
                s -= self.l[i * w + bw - (i - k)] * y[k];
            }
            y[i] = s / self.l[i * w + bw];
        }
        for i in (0..n).rev() {
            let hi = (i + bw).min(n - 1);
            let mut s = y[i];
            for k in i + 1..=hi {
                s -= self.l[k * w + bw - (k - i)] * y[k];
            }
            y[i] = s / self.l[i * w + bw];
        }
        y
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}
