//! Multivariate polynomial relation fitted by ridge least squares.
//!
//! Monomials are enumerated in graded lexicographic order: by total degree,
//! then lexicographically descending in the exponent vector, so for two
//! variables and degree two the features are `1, x1, x2, x1^2, x1 x2, x2^2`.
//! A monomial is stored as its nondecreasing list of variable indices.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::basis::{synthesize, synthesize_transpose, SpectralCoeffs};
use crate::error::{Error, Result};
use crate::forward::ForwardProblem;
use crate::learn::consistency_term;
use crate::rng::stream;
use crate::synth::TrainingDataset;

/// All monomials in `d` variables of degree at most `n`, graded-lex order.
pub fn monomials(d: usize, n: usize) -> Vec<Vec<u16>> {
    fn extend(d: usize, deg: usize, start: usize, cur: &mut Vec<u16>, out: &mut Vec<Vec<u16>>) {
        if cur.len() == deg {
            out.push(cur.clone());
            return;
        }
        for v in start..d {
            cur.push(v as u16);
            extend(d, deg, v, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    for deg in 0..=n {
        extend(d, deg, 0, &mut Vec::with_capacity(deg), &mut out);
    }
    out
}

fn eval_monomials(mons: &[Vec<u16>], z: &[f64]) -> Vec<f64> {
    mons.iter()
        .map(|m| m.iter().map(|&v| z[v as usize]).product())
        .collect()
}

/// Feature vector of all monomials of degree `<= n` at `x`.
pub fn poly_features(x: &[f64], n: usize) -> Vec<f64> {
    eval_monomials(&monomials(x.len(), n), x)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PolynomialRelation {
    pub d: usize,
    pub d_out: usize,
    pub degree: usize,
    /// Row-major `d_out x n_features`, in standardized units.
    pub theta: Vec<f64>,
    pub in_shift: Vec<f64>,
    pub in_scale: Vec<f64>,
    pub out_shift: Vec<f64>,
    pub out_scale: Vec<f64>,
    /// Admissible range of the synthesized output field.
    pub bounds: Option<(f64, f64)>,
    #[serde(skip)]
    mons: Vec<Vec<u16>>,
}

impl PolynomialRelation {
    pub fn new(d: usize, d_out: usize, degree: usize) -> Self {
        let mons = monomials(d, degree);
        Self {
            d,
            d_out,
            degree,
            theta: vec![0.0; d_out * mons.len()],
            in_shift: vec![0.0; d],
            in_scale: vec![1.0; d],
            out_shift: vec![0.0; d_out],
            out_scale: vec![1.0; d_out],
            bounds: None,
            mons,
        }
    }

    fn mons(&self) -> std::borrow::Cow<'_, [Vec<u16>]> {
        if self.mons.is_empty() {
            std::borrow::Cow::Owned(monomials(self.d, self.degree))
        } else {
            std::borrow::Cow::Borrowed(&self.mons)
        }
    }

    /// Rebuilds the cached monomial table after deserialization.
    pub fn restore_cache(&mut self) {
        self.mons = monomials(self.d, self.degree);
    }

    pub fn n_features(&self) -> usize {
        self.theta.len() / self.d_out.max(1)
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.in_shift)
            .zip(&self.in_scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.d {
            return Err(Error::Dimension {
                expected: self.d,
                got: x.len(),
            });
        }
        Ok(())
    }

    fn standardized_output(&self, phi: &[f64]) -> Vec<f64> {
        let nf = phi.len();
        (0..self.d_out)
            .map(|o| crate::linalg::dot(&self.theta[o * nf..(o + 1) * nf], phi))
            .collect()
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let phi = eval_monomials(&self.mons(), &self.standardize(x));
        Ok(self
            .standardized_output(&phi)
            .iter()
            .zip(&self.out_shift)
            .zip(&self.out_scale)
            .map(|((y, m), s)| m + s * y)
            .collect())
    }

    pub fn vjp(&self, x: &[f64], gbar: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        if gbar.len() != self.d_out {
            return Err(Error::Dimension {
                expected: self.d_out,
                got: gbar.len(),
            });
        }
        let z = self.standardize(x);
        let mons = self.mons();
        let nf = mons.len();
        let mut zbar = vec![0.0; self.d];
        for (a, mon) in mons.iter().enumerate() {
            let c: f64 = (0..self.d_out)
                .map(|o| gbar[o] * self.out_scale[o] * self.theta[o * nf + a])
                .sum();
            if c == 0.0 || mon.is_empty() {
                continue;
            }
            for p in 0..mon.len() {
                let others: f64 = mon
                    .iter()
                    .enumerate()
                    .filter(|&(q, _)| q != p)
                    .map(|(_, &v)| z[v as usize])
                    .product();
                zbar[mon[p] as usize] += c * others;
            }
        }
        Ok(zbar.iter().zip(&self.in_scale).map(|(g, s)| g / s).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolyOptions {
    pub degree: usize,
    /// Weight of `||theta||^2` against the mean squared standardized residual.
    pub ridge: f64,
    /// Standardize inputs and outputs with train-split statistics.
    pub standardize: bool,
    pub consistency_weight: f64,
    pub refine_iters: usize,
    pub refine_batch: usize,
    pub learning_rate: f64,
    pub bounds: Option<(f64, f64)>,
    pub seed: u64,
}

impl Default for PolyOptions {
    fn default() -> Self {
        Self {
            degree: 3,
            ridge: 1.0,
            standardize: true,
            consistency_weight: 0.0,
            refine_iters: 40,
            refine_batch: 8,
            learning_rate: 1e-3,
            bounds: None,
            seed: 0,
        }
    }
}

fn column_stats(rows: &[&Vec<f64>], dim: usize, standardize: bool) -> (Vec<f64>, Vec<f64>) {
    if !standardize {
        return (vec![0.0; dim], vec![1.0; dim]);
    }
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..dim).map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / n).collect();
    let scale = (0..dim)
        .map(|c| {
            let var = rows.iter().map(|r| (r[c] - mean[c]).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            // Constant columns (and round-off noise on them) keep unit scale.
            if sd > 1e-12 * mean[c].abs().max(1e-300) {
                sd
            } else {
                1.0
            }
        })
        .collect();
    (mean, scale)
}

/// Ridge fit on the train split, then optional model-consistency refinement.
pub fn fit_polynomial(
    ds: &TrainingDataset,
    opts: &PolyOptions,
    forward: Option<&ForwardProblem>,
) -> Result<PolynomialRelation> {
    let train = &ds.train;
    let d = ds.inputs.first().map_or(0, Vec::len);
    let d_out = ds.outputs.first().map_or(0, Vec::len);
    let mut rel = PolynomialRelation::new(d, d_out, opts.degree);
    rel.bounds = opts.bounds;
    let nf = rel.mons.len();
    if train.len() < nf {
        return Err(Error::Rank(format!(
            "{} training samples for {nf} monomials",
            train.len()
        )));
    }
    let xs: Vec<&Vec<f64>> = train.iter().map(|&i| &ds.inputs[i]).collect();
    let ys: Vec<&Vec<f64>> = train.iter().map(|&i| &ds.outputs[i]).collect();
    (rel.in_shift, rel.in_scale) = column_stats(&xs, d, opts.standardize);
    (rel.out_shift, rel.out_scale) = column_stats(&ys, d_out, opts.standardize);

    let n = train.len();
    let mut phi = DMatrix::<f64>::zeros(n, nf);
    for (r, x) in xs.iter().enumerate() {
        let f = eval_monomials(&rel.mons, &rel.standardize(x));
        for (c, v) in f.into_iter().enumerate() {
            phi[(r, c)] = v;
        }
    }
    let y = DMatrix::<f64>::from_fn(n, d_out, |r, c| (ys[r][c] - rel.out_shift[c]) / rel.out_scale[c]);
    // Mean-squared data term: (Phi^T Phi / n + ridge I) theta = Phi^T y / n.
    let inv_n = 1.0 / n as f64;
    let mut gram = phi.tr_mul(&phi) * inv_n;
    for i in 0..nf {
        gram[(i, i)] += opts.ridge;
    }
    let rhs = phi.tr_mul(&y) * inv_n;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Rank("normal equations are not positive definite".into()))?;
    let sol = chol.solve(&rhs);
    for o in 0..d_out {
        for a in 0..nf {
            let v = sol[(a, o)];
            rel.theta[o * nf + a] = if v.abs() < 1e-8 { 0.0 } else { v };
        }
    }
    if rel.theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }

    if opts.consistency_weight > 0.0 {
        let forward = forward.ok_or_else(|| {
            Error::InvalidArgument("consistency refinement needs a forward problem".into())
        })?;
        refine(&mut rel, ds, opts, forward, &phi, &y)?;
    }
    Ok(rel)
}

/// Adam on the full loss: data term over the train split plus the sampled
/// consistency term and the output-bound penalty.
fn refine(
    rel: &mut PolynomialRelation,
    ds: &TrainingDataset,
    opts: &PolyOptions,
    forward: &ForwardProblem,
    phi: &DMatrix<f64>,
    y: &DMatrix<f64>,
) -> Result<()> {
    let (fields, meas) = match (&ds.input_fields, &ds.measurements) {
        (Some(f), Some(m)) => (f, m),
        _ => {
            return Err(Error::InvalidArgument(
                "consistency refinement needs simulated measurements".into(),
            ))
        }
    };
    let nf = rel.n_features();
    let n = phi.nrows() as f64;
    let grid = forward.grid();
    let mut rng = stream(opts.seed, 17);
    let mut m1 = vec![0.0; rel.theta.len()];
    let mut m2 = vec![0.0; rel.theta.len()];
    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    for it in 0..opts.refine_iters {
        let theta = DMatrix::from_row_slice(rel.d_out, nf, &rel.theta);
        let resid = phi * theta.transpose() - y;
        let mut grad = (resid.transpose() * phi) / n;
        let batch = sample(&mut rng, ds.train.len(), opts.refine_batch.min(ds.train.len()));
        let scale = opts.consistency_weight / batch.len() as f64;
        for b in batch.iter() {
            let i = ds.train[b];
            let ghat = rel.predict(&ds.inputs[i])?;
            let (_, mut gbar) = consistency_term(forward, ds.k, &fields[i], &ghat, &meas[i])?;
            if let Some((lo, hi)) = rel.bounds {
                let g = synthesize(&SpectralCoeffs::from_vec(ds.k, ghat.clone())?, &grid);
                let pen = g.map(|v| 2.0 * ((v - hi).max(0.0) - (lo - v).max(0.0)));
                let (pbar, _) = synthesize_transpose(&pen, ds.k);
                for (a, p) in gbar.iter_mut().zip(pbar) {
                    *a += p;
                }
            }
            let feats = eval_monomials(&rel.mons(), &rel.standardize(&ds.inputs[i]));
            for o in 0..rel.d_out {
                let go = scale * gbar[o] * rel.out_scale[o];
                for (a, f) in feats.iter().enumerate() {
                    grad[(o, a)] += go * f;
                }
            }
        }
        let t = (it + 1) as i32;
        for (idx, th) in rel.theta.iter_mut().enumerate() {
            let g = grad[(idx / nf, idx % nf)];
            m1[idx] = b1 * m1[idx] + (1.0 - b1) * g;
            m2[idx] = b2 * m2[idx] + (1.0 - b2) * g * g;
            let mh = m1[idx] / (1.0 - b1.powi(t));
            let vh = m2[idx] / (1.0 - b2.powi(t));
            *th -= opts.learning_rate * mh / (vh.sqrt() + eps);
        }
        if rel.theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::TrainingDiverged { epoch: it });
        }
    }
    Ok(())
}
