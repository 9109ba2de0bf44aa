//! Cosine eigenbasis of the Neumann Laplacian on the unit square.
//!
//! The eigenfunctions are the unnormalized products
//! `phi_k(x, z) = cos(kx pi x) cos(kz pi z)` with eigenvalue
//! `pi^2 (kx^2 + kz^2)`. Coefficient fields are nodal values on a uniform
//! `(M+1) x (M+1)` grid. Wave-domain grids sit on `y in [-1, 0]`; the basis is
//! evaluated there in the shifted coordinate `z = y + 1`.
//!
//! [`analyze`] is the left inverse of [`synthesize`] for band-limited fields:
//! trapezoidal quadrature of cosines on the nodes is exactly orthogonal for
//! mode numbers below `M` (discrete cosine orthogonality), so the roundtrip
//! holds to rounding error.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Vertical placement of a grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Nodes `(i dx, j dy)` on the unit square.
    Unit,
    /// Nodes `(i dx, -1 + j dy)`, the wave domain.
    Lowered,
}

/// Uniform Cartesian grid with `M` cells per side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    m: usize,
    placement: Placement,
}

impl Grid {
    pub fn unit(m: usize) -> Self {
        assert!(m > 0, "grid needs at least one cell");
        Self {
            m,
            placement: Placement::Unit,
        }
    }

    pub fn lowered(m: usize) -> Self {
        assert!(m > 0, "grid needs at least one cell");
        Self {
            m,
            placement: Placement::Lowered,
        }
    }

    pub fn with_placement(m: usize, placement: Placement) -> Self {
        match placement {
            Placement::Unit => Self::unit(m),
            Placement::Lowered => Self::lowered(m),
        }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn placement(&self) -> Placement {
        self.placement
    }

    /// Nodes per side, `M + 1`.
    pub fn side(&self) -> usize {
        self.m + 1
    }

    pub fn len(&self) -> usize {
        self.side() * self.side()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self) -> f64 {
        1.0 / self.m as f64
    }

    pub fn y_offset(&self) -> f64 {
        match self.placement {
            Placement::Unit => 0.0,
            Placement::Lowered => -1.0,
        }
    }

    /// Flat index of node `(i, j)`; `i` runs along x and is the slow index.
    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.side() + j
    }

    #[inline]
    pub fn x(&self, i: usize) -> f64 {
        i as f64 / self.m as f64
    }

    #[inline]
    pub fn y(&self, j: usize) -> f64 {
        self.y_offset() + j as f64 / self.m as f64
    }

    /// Basis coordinate of row `j` (in `[0, 1]` for both placements).
    #[inline]
    pub fn z(&self, j: usize) -> f64 {
        j as f64 / self.m as f64
    }

    /// Trapezoidal quadrature weights over the whole grid.
    pub fn trapezoid_weights(&self) -> Vec<f64> {
        let w1 = trapezoid_1d(self.m);
        let mut w = Vec::with_capacity(self.len());
        for wi in &w1 {
            for wj in &w1 {
                w.push(wi * wj);
            }
        }
        w
    }
}

/// One-dimensional trapezoidal weights on `M + 1` nodes spanning unit length.
pub fn trapezoid_1d(m: usize) -> Vec<f64> {
    let h = 1.0 / m as f64;
    (0..=m)
        .map(|i| if i == 0 || i == m { 0.5 * h } else { h })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModeIndex {
    pub kx: usize,
    pub kz: usize,
}

impl ModeIndex {
    pub fn new(kx: usize, kz: usize) -> Self {
        Self { kx, kz }
    }

    pub fn eigenvalue(&self) -> f64 {
        PI * PI * (self.kx * self.kx + self.kz * self.kz) as f64
    }

    /// `1 / int phi_k^2` over the unit square: 1, 2 or 4.
    pub fn inverse_norm_sq(&self) -> f64 {
        let fx = if self.kx == 0 { 1.0 } else { 2.0 };
        let fz = if self.kz == 0 { 1.0 } else { 2.0 };
        fx * fz
    }
}

/// `cos(kx pi x) cos(kz pi z)` at a point of the closed unit square.
pub fn eigenfunction_value(k: ModeIndex, x: f64, z: f64) -> f64 {
    (k.kx as f64 * PI * x).cos() * (k.kz as f64 * PI * z).cos()
}

/// Truncated cosine expansion `offset + sum_k coeffs[k] phi_k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralCoeffs {
    k: usize,
    pub offset: f64,
    coeffs: Vec<f64>,
}

impl SpectralCoeffs {
    pub fn zeros(k: usize) -> Self {
        Self {
            k,
            offset: 0.0,
            coeffs: vec![0.0; (k + 1) * (k + 1)],
        }
    }

    pub fn new(k: usize, offset: f64, coeffs: Vec<f64>) -> Result<Self> {
        let n = (k + 1) * (k + 1);
        if coeffs.len() != n {
            return Err(Error::Dimension {
                expected: n,
                got: coeffs.len(),
            });
        }
        if !offset.is_finite() || coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument("non-finite spectral coefficient".into()));
        }
        Ok(Self { k, offset, coeffs })
    }

    /// Coefficients with zero offset, the representation used as an unknown.
    pub fn from_vec(k: usize, coeffs: Vec<f64>) -> Result<Self> {
        Self::new(k, 0.0, coeffs)
    }

    pub fn band_limit(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    #[inline]
    pub fn flat_index(&self, mode: ModeIndex) -> usize {
        mode.kx * (self.k + 1) + mode.kz
    }

    pub fn get(&self, mode: ModeIndex) -> f64 {
        self.coeffs[self.flat_index(mode)]
    }

    pub fn set(&mut self, mode: ModeIndex, value: f64) {
        let idx = self.flat_index(mode);
        self.coeffs[idx] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.coeffs
    }

    pub fn modes(&self) -> impl Iterator<Item = ModeIndex> + '_ {
        let k = self.k;
        (0..=k).flat_map(move |kx| (0..=k).map(move |kz| ModeIndex::new(kx, kz)))
    }

    /// Same expansion with the offset moved into the constant mode.
    pub fn folded(&self) -> Self {
        let mut out = self.clone();
        out.coeffs[0] += out.offset;
        out.offset = 0.0;
        out
    }
}

/// Nodal values on a [`Grid`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarField {
    grid: Grid,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Dimension {
                expected: grid.len(),
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite field value".into()));
        }
        Ok(Self { grid, values })
    }

    pub fn constant(grid: Grid, value: f64) -> Self {
        Self {
            grid,
            values: vec![value; grid.len()],
        }
    }

    /// Samples `f(x, y)` at every node, in physical coordinates.
    pub fn from_fn(grid: Grid, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.len());
        for i in 0..grid.side() {
            for j in 0..grid.side() {
                values.push(f(grid.x(i), grid.y(j)));
            }
        }
        Self { grid, values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.index(i, j)]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            grid: self.grid,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Injection onto a coarser grid of the same placement whose nodes are a
    /// subset of these nodes.
    pub fn restrict(&self, coarse: &Grid) -> Result<ScalarField> {
        let (fine, mc) = (self.grid, coarse.m());
        if coarse.placement() != fine.placement() || fine.m() % mc != 0 {
            return Err(Error::GridMismatch(format!("cannot restrict {fine:?} to {coarse:?}")));
        }
        let r = fine.m() / mc;
        let mut values = Vec::with_capacity(coarse.len());
        for i in 0..=mc {
            for j in 0..=mc {
                values.push(self.at(i * r, j * r));
            }
        }
        ScalarField::new(*coarse, values)
    }

    pub fn ensure_same_grid(&self, other: &ScalarField) -> Result<()> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch(format!(
                "{:?} vs {:?}",
                self.grid, other.grid
            )));
        }
        Ok(())
    }

    /// Trapezoidal `L2` norm.
    pub fn l2_norm(&self) -> f64 {
        self.grid
            .trapezoid_weights()
            .iter()
            .zip(&self.values)
            .map(|(w, v)| w * v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.grid
            .trapezoid_weights()
            .iter()
            .zip(&self.values)
            .map(|(w, v)| w * v)
            .sum::<f64>()
    }
}

/// `cos(k pi t_i)` for `k = 0..=kmax`, `i = 0..=m`, indexed `[k][i]`.
fn cosine_table(kmax: usize, m: usize) -> Vec<Vec<f64>> {
    (0..=kmax)
        .map(|k| {
            (0..=m)
                .map(|i| (k as f64 * PI * i as f64 / m as f64).cos())
                .collect()
        })
        .collect()
}

/// Evaluates the expansion at every node of `grid`.
pub fn synthesize(c: &SpectralCoeffs, grid: &Grid) -> ScalarField {
    let k = c.band_limit();
    let side = grid.side();
    let table = cosine_table(k, grid.m());
    let mut values = vec![c.offset; grid.len()];
    // Separable evaluation: first contract over kz for each (kx, j).
    let mut partial = vec![0.0; side];
    for kx in 0..=k {
        partial.iter_mut().for_each(|p| *p = 0.0);
        for kz in 0..=k {
            let a = c.get(ModeIndex::new(kx, kz));
            if a == 0.0 {
                continue;
            }
            for (p, cz) in partial.iter_mut().zip(&table[kz]) {
                *p += a * cz;
            }
        }
        for i in 0..side {
            let cx = table[kx][i];
            let row = &mut values[i * side..(i + 1) * side];
            for (v, p) in row.iter_mut().zip(&partial) {
                *v += cx * p;
            }
        }
    }
    ScalarField {
        grid: *grid,
        values,
    }
}

/// Transpose of [`synthesize`] with respect to the coefficient array.
///
/// Given a cotangent `v` on the nodal values, returns
/// `d/dc_k <v, synthesize(c)> = sum_n v_n phi_k(x_n)` for every mode. The
/// offset cotangent is `sum_n v_n`.
pub fn synthesize_transpose(v: &ScalarField, k: usize) -> (Vec<f64>, f64) {
    let grid = v.grid();
    let side = grid.side();
    let table = cosine_table(k, grid.m());
    let mut out = vec![0.0; (k + 1) * (k + 1)];
    let mut partial = vec![0.0; side];
    for kx in 0..=k {
        partial.iter_mut().for_each(|p| *p = 0.0);
        for i in 0..side {
            let cx = table[kx][i];
            let row = &v.values()[i * side..(i + 1) * side];
            for (p, r) in partial.iter_mut().zip(row) {
                *p += cx * r;
            }
        }
        for kz in 0..=k {
            out[kx * (k + 1) + kz] = partial.iter().zip(&table[kz]).map(|(p, c)| p * c).sum();
        }
    }
    let total = v.values().iter().sum();
    (out, total)
}

/// Projection coefficients by trapezoidal quadrature, offset folded into `(0, 0)`.
pub fn analyze(f: &ScalarField, k: usize) -> Result<SpectralCoeffs> {
    let grid = f.grid();
    if grid.m() < 4 * k {
        return Err(Error::ResolutionTooCoarse { m: grid.m(), k });
    }
    let weights = grid.trapezoid_weights();
    let weighted: Vec<f64> = f
        .values()
        .iter()
        .zip(&weights)
        .map(|(v, w)| v * w)
        .collect();
    let weighted = ScalarField {
        grid: *grid,
        values: weighted,
    };
    let (mut coeffs, _) = synthesize_transpose(&weighted, k);
    for kx in 0..=k {
        for kz in 0..=k {
            coeffs[kx * (k + 1) + kz] *= ModeIndex::new(kx, kz).inverse_norm_sq();
        }
    }
    Ok(SpectralCoeffs {
        k,
        offset: 0.0,
        coeffs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_coeffs(k: usize, seed: u64) -> SpectralCoeffs {
        let mut rng = crate::rng::stream(seed, 0);
        let v = (0..(k + 1) * (k + 1))
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        SpectralCoeffs::from_vec(k, v).unwrap()
    }

    #[test]
    fn eigenfunction_examples() {
        assert_eq!(eigenfunction_value(ModeIndex::new(0, 0), 0.37, 0.81), 1.0);
        assert!(eigenfunction_value(ModeIndex::new(1, 0), 0.5, 0.3).abs() < 1e-15);
        // cos(0.2 pi) cos(0.6 pi) = (1 + sqrt5)/4 * (1 - sqrt5)/4 = -1/4 exactly.
        let v = eigenfunction_value(ModeIndex::new(2, 3), 0.1, 0.2);
        assert!((v + 0.25).abs() < 1e-15, "{v}");
        assert!((ModeIndex::new(1, 2).eigenvalue() - 5.0 * PI * PI).abs() < 1e-12);
    }

    #[test]
    fn synthesize_constant_and_single_mode() {
        let grid = Grid::unit(2);
        let mut c = SpectralCoeffs::zeros(1);
        c.offset = 2.0;
        assert!(synthesize(&c, &grid).values().iter().all(|&v| v == 2.0));

        let mut c = SpectralCoeffs::zeros(1);
        c.set(ModeIndex::new(1, 0), 1.0);
        let f = synthesize(&c, &grid);
        for i in 0..3 {
            for j in 0..3 {
                let expect = (PI * grid.x(i)).cos();
                assert!((f.at(i, j) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn lowered_grid_uses_shifted_coordinate() {
        let grid = Grid::lowered(8);
        let mut c = SpectralCoeffs::zeros(2);
        c.set(ModeIndex::new(0, 1), 1.0);
        let f = synthesize(&c, &grid);
        // Bottom row y = -1 maps to z = 0.
        assert!((f.at(3, 0) - 1.0).abs() < 1e-15);
        assert!((f.at(3, 8) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn roundtrip_k3_m64() {
        let grid = Grid::unit(64);
        let c = random_coeffs(3, 11);
        let back = analyze(&synthesize(&c, &grid), 3).unwrap();
        for (a, b) in c.as_slice().iter().zip(back.as_slice()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn analyze_constant_and_modes() {
        let grid = Grid::unit(64);
        let c = analyze(&ScalarField::constant(grid, 3.5), 3).unwrap();
        assert!((c.get(ModeIndex::new(0, 0)) - 3.5).abs() < 1e-10);
        assert!(c.as_slice()[1..].iter().all(|v| v.abs() < 1e-10));

        for mode in [ModeIndex::new(1, 2), ModeIndex::new(0, 3)] {
            let f = ScalarField::from_fn(grid, |x, y| eigenfunction_value(mode, x, y));
            let c = analyze(&f, 3).unwrap();
            for m in c.modes() {
                let expect = if m == mode { 1.0 } else { 0.0 };
                assert!((c.get(m) - expect).abs() < 1e-6, "{m:?}");
            }
        }
    }

    #[test]
    fn analyze_rejects_coarse_grid() {
        let f = ScalarField::constant(Grid::unit(11), 1.0);
        assert!(matches!(
            analyze(&f, 3),
            Err(Error::ResolutionTooCoarse { m: 11, k: 3 })
        ));
    }

    #[test]
    fn trapezoidal_orthogonality() {
        let grid = Grid::unit(16);
        let w = grid.trapezoid_weights();
        let k = 4;
        let modes: Vec<ModeIndex> = (0..=k)
            .flat_map(|a| (0..=k).map(move |b| ModeIndex::new(a, b)))
            .collect();
        let sample = |m: ModeIndex| ScalarField::from_fn(grid, |x, y| eigenfunction_value(m, x, y));
        for (ia, a) in modes.iter().enumerate() {
            let fa = sample(*a);
            for b in &modes[ia + 1..] {
                let fb = sample(*b);
                let dot: f64 = fa
                    .values()
                    .iter()
                    .zip(fb.values())
                    .zip(&w)
                    .map(|((p, q), w)| p * q * w)
                    .sum();
                assert!(dot.abs() < 1e-6);
            }
        }
    }

    #[test]
    fn transpose_is_adjoint_of_synthesize() {
        let grid = Grid::unit(12);
        let c = random_coeffs(3, 5);
        let v = ScalarField::from_fn(grid, |x, y| (3.0 * x - y).sin());
        let lhs: f64 = synthesize(&c, &grid)
            .values()
            .iter()
            .zip(v.values())
            .map(|(a, b)| a * b)
            .sum();
        let (ct, _) = synthesize_transpose(&v, 3);
        let rhs: f64 = ct.iter().zip(c.as_slice()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    proptest! {
        #[test]
        fn synthesize_is_linear(seed1 in 0u64..1000, seed2 in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let grid = Grid::unit(12);
            let c1 = random_coeffs(3, seed1);
            let c2 = random_coeffs(3, seed2);
            let combo: Vec<f64> = c1.as_slice().iter().zip(c2.as_slice()).map(|(x, y)| a * x + b * y).collect();
            let lhs = synthesize(&SpectralCoeffs::from_vec(3, combo).unwrap(), &grid);
            let s1 = synthesize(&c1, &grid);
            let s2 = synthesize(&c2, &grid);
            for ((l, p), q) in lhs.values().iter().zip(s1.values()).zip(s2.values()) {
                prop_assert!((l - (a * p + b * q)).abs() <= 1e-12 * (1.0 + l.abs()) * 10.0);
            }
        }

        #[test]
        fn analyze_inverts_synthesize(seed in 0u64..10_000, k in 1usize..4) {
            let grid = Grid::unit(4 * k + 3);
            let c = random_coeffs(k, seed);
            let back = analyze(&synthesize(&c, &grid), k).unwrap();
            for (a, b) in c.as_slice().iter().zip(back.as_slice()) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }
    }
}
