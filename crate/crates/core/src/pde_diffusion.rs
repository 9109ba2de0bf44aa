//! P1 finite elements for `-div(gamma grad u) + sigma u = q` on the unit
//! square with the Robin condition `n . gamma grad u + ell u = S`.
//!
//! Each grid cell `[i, i+1] x [j, j+1]` is cut along its rising diagonal into
//! the triangles `(i,j),(i+1,j),(i+1,j+1)` and `(i,j),(i+1,j+1),(i,j+1)`.
//! Element diffusion is the mean of the three vertex values of `gamma`, the
//! absorption and Robin mass matrices are lumped, so the system matrix is an
//! M-matrix and nonnegative sources give nonnegative solutions. Gradients are exact transposes of this discretization.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{Grid, ScalarField};
use crate::error::{Error, Result};
use crate::linalg::{BandedCholesky, BandedSpd};
use crate::synth::NoiseSpec;

/// Reference stiffness matrices (independent of `h` in 2D).
const K_LOWER: [[f64; 3]; 3] = [[0.5, -0.5, 0.0], [-0.5, 1.0, -0.5], [0.0, -0.5, 0.5]];
const K_UPPER: [[f64; 3]; 3] = [[0.5, 0.0, -0.5], [0.0, 0.5, -0.5], [-0.5, -0.5, 1.0]];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Bottom,
    Top,
    Left,
    Right,
}

impl Side {
    pub const ALL: [Side; 4] = [Side::Bottom, Side::Left, Side::Right, Side::Top];

    /// Flat node index of the `t`-th node along this side.
    fn node(self, grid: &Grid, t: usize) -> usize {
        let m = grid.m();
        match self {
            Side::Bottom => grid.index(t, 0),
            Side::Top => grid.index(t, m),
            Side::Left => grid.index(0, t),
            Side::Right => grid.index(m, t),
        }
    }
}

/// Boundary illumination: nodal profile along one side, indexed by the
/// tangential coordinate (x for bottom/top, y for left/right).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundarySource {
    pub side: Side,
    pub profile: Vec<f64>,
}

impl BoundarySource {
    pub fn new(side: Side, profile: Vec<f64>) -> Result<Self> {
        if profile.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite source profile".into()));
        }
        Ok(Self { side, profile })
    }

    pub fn from_fn(side: Side, grid: &Grid, f: impl Fn(f64) -> f64) -> Self {
        let profile = (0..grid.side()).map(|t| f(grid.x(t))).collect();
        Self { side, profile }
    }

    /// `exp(-(t - 0.5)^2 / 0.25)` along the given side.
    pub fn gaussian(side: Side, grid: &Grid) -> Self {
        Self::from_fn(side, grid, |t| (-(t - 0.5) * (t - 0.5) / 0.25).exp())
    }

    /// The centred Gaussian on each of the four sides.
    pub fn four_sides(grid: &Grid) -> Vec<Self> {
        Side::ALL.iter().map(|&s| Self::gaussian(s, grid)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct DiffusionProblem {
    pub gamma: ScalarField,
    pub sigma: ScalarField,
    pub ell: f64,
    pub sources: Vec<BoundarySource>,
    pub volume_source: Option<ScalarField>,
}

impl DiffusionProblem {
    pub fn new(gamma: ScalarField, sigma: ScalarField, ell: f64) -> Result<Self> {
        gamma.ensure_same_grid(&sigma)?;
        if !(ell > 0.0) {
            return Err(Error::InvalidArgument(format!("ell must be positive, got {ell}")));
        }
        Ok(Self {
            gamma,
            sigma,
            ell,
            sources: Vec::new(),
            volume_source: None,
        })
    }

    pub fn grid(&self) -> &Grid {
        self.gamma.grid()
    }

    fn validate(&self) -> Result<()> {
        self.gamma.ensure_same_grid(&self.sigma)?;
        if self.grid().m() < 2 {
            return Err(Error::InvalidArgument("diffusion grid needs M >= 2".into()));
        }
        if let Some((node, &value)) = self
            .gamma
            .values()
            .iter()
            .enumerate()
            .find(|(_, &g)| !(g > 0.0))
        {
            return Err(Error::Coercivity { node, value });
        }
        if let Some(q) = &self.volume_source {
            q.ensure_same_grid(&self.gamma)?;
        }
        for s in &self.sources {
            self.check_source(s)?;
        }
        Ok(())
    }

    fn check_source(&self, s: &BoundarySource) -> Result<()> {
        if s.profile.len() != self.grid().side() {
            return Err(Error::Dimension {
                expected: self.grid().side(),
                got: s.profile.len(),
            });
        }
        Ok(())
    }

    /// Assembles and factors the system matrix.
    pub fn factor(&self) -> Result<DiffusionSystem> {
        self.validate()?;
        let grid = *self.grid();
        let a = assemble(&grid, self.gamma.values(), self.sigma.values(), self.ell);
        let chol = a.cholesky()?;
        Ok(DiffusionSystem { grid, a, chol })
    }

    /// Right-hand side for the given boundary sources plus the volume source.
    pub fn rhs(&self, sources: &[&BoundarySource]) -> Result<Vec<f64>> {
        let grid = self.grid();
        let mut b = vec![0.0; grid.len()];
        if let Some(q) = &self.volume_source {
            let lumped = lumped_mass(grid);
            for ((bn, qn), mn) in b.iter_mut().zip(q.values()).zip(&lumped) {
                *bn += qn * mn;
            }
        }
        let h = grid.spacing();
        for s in sources {
            self.check_source(s)?;
            for t in 0..grid.m() {
                let (a, c) = (s.side.node(grid, t), s.side.node(grid, t + 1));
                let (sa, sc) = (s.profile[t], s.profile[t + 1]);
                b[a] += h / 6.0 * (2.0 * sa + sc);
                b[c] += h / 6.0 * (sa + 2.0 * sc);
            }
        }
        Ok(b)
    }
}

/// Factored system matrix for one `(gamma, sigma)` pair.
pub struct DiffusionSystem {
    grid: Grid,
    a: BandedSpd,
    chol: BandedCholesky,
}

impl DiffusionSystem {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// Solves `A u = b` with one step of iterative refinement.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let mut x = self.chol.solve(b);
        let ax = self.a.matvec(&x);
        let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
        let dx = self.chol.solve(&r);
        for (xi, di) in x.iter_mut().zip(&dx) {
            *xi += di;
        }
        let bnorm = crate::linalg::norm2(b);
        if bnorm > 0.0 {
            let ax = self.a.matvec(&x);
            let res = b
                .iter()
                .zip(&ax)
                .map(|(bi, ai)| (bi - ai) * (bi - ai))
                .sum::<f64>()
                .sqrt();
            // A residual far above rounding level means the factorization is useless.
            if !(res <= 1e-12 * bnorm * (1.0 + self.chol.pivot_ratio()).sqrt()) {
                return Err(Error::SolverFailure {
                    row: 0,
                    condition: self.chol.pivot_ratio(),
                });
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(x)
    }
}

/// Nodal weights of the lumped mass matrix (`sum of area / 3`).
pub fn lumped_mass(grid: &Grid) -> Vec<f64> {
    let m = grid.m();
    let third = grid.spacing() * grid.spacing() / 6.0;
    let mut w = vec![0.0; grid.len()];
    for i in 0..m {
        for j in 0..m {
            for (a, b, c) in cell_triangles(grid, i, j) {
                w[a] += third;
                w[b] += third;
                w[c] += third;
            }
        }
    }
    w
}

#[inline]
fn cell_triangles(grid: &Grid, i: usize, j: usize) -> [(usize, usize, usize); 2] {
    let n00 = grid.index(i, j);
    let n10 = grid.index(i + 1, j);
    let n11 = grid.index(i + 1, j + 1);
    let n01 = grid.index(i, j + 1);
    [(n00, n10, n11), (n00, n11, n01)]
}

const REFERENCE: [&[[f64; 3]; 3]; 2] = [&K_LOWER, &K_UPPER];

fn assemble(grid: &Grid, gamma: &[f64], sigma: &[f64], ell: f64) -> BandedSpd {
    let m = grid.m();
    let mut a = BandedSpd::zeros(grid.len(), m + 2);
    for i in 0..m {
        for j in 0..m {
            for (tri, k0) in cell_triangles(grid, i, j).iter().zip(REFERENCE) {
                let nodes = [tri.0, tri.1, tri.2];
                let ge = (gamma[nodes[0]] + gamma[nodes[1]] + gamma[nodes[2]]) / 3.0;
                for r in 0..3 {
                    for c in 0..=r {
                        let v = ge * k0[r][c];
                        if v != 0.0 {
                            a.add(nodes[r], nodes[c], v);
                        }
                    }
                }
            }
        }
    }
    for (n, mn) in lumped_mass(grid).iter().enumerate() {
        a.add(n, n, sigma[n] * mn);
    }
    let h = grid.spacing();
    for side in Side::ALL {
        for t in 0..m {
            let (p, q) = (side.node(grid, t), side.node(grid, t + 1));
            a.add(p, p, ell * h / 2.0);
            a.add(q, q, ell * h / 2.0);
        }
    }
    a
}

/// P1 solution for one boundary source (plus the volume source, if any).
pub fn solve_diffusion(p: &DiffusionProblem, s: &BoundarySource) -> Result<ScalarField> {
    solve_diffusion_multi(p, &[s])
}

/// P1 solution with several boundary sources active at once.
pub fn solve_diffusion_multi(p: &DiffusionProblem, sources: &[&BoundarySource]) -> Result<ScalarField> {
    let sys = p.factor()?;
    let b = p.rhs(sources)?;
    ScalarField::new(*p.grid(), sys.solve(&b)?)
}

/// `H = sigma u`, nodewise.
pub fn internal_data(sigma: &ScalarField, u: &ScalarField) -> Result<ScalarField> {
    sigma.ensure_same_grid(u)?;
    let v = sigma.values().iter().zip(u.values()).map(|(s, u)| s * u).collect();
    ScalarField::new(*sigma.grid(), v)
}

/// One internal datum per source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InternalData {
    pub fields: Vec<ScalarField>,
    pub noise: NoiseSpec,
}

/// Data for every source of `p`, computed from one factorization.
pub fn simulate_internal(p: &DiffusionProblem) -> Result<InternalData> {
    let sys = p.factor()?;
    let fields = p
        .sources
        .par_iter()
        .map(|s| {
            let u = ScalarField::new(*p.grid(), sys.solve(&p.rhs(&[s])?)?)?;
            internal_data(&p.sigma, &u)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(InternalData {
        fields,
        noise: NoiseSpec::none(),
    })
}

/// Misfit `J = 1/(2|H|) sum_h ||sigma u_h - H_h||^2` (trapezoidal L2) and,
/// optionally, its exact discrete gradient with respect to nodal gamma and sigma.
pub fn diffusion_misfit(
    p: &DiffusionProblem,
    data: &InternalData,
    with_gradient: bool,
) -> Result<(f64, Option<(ScalarField, ScalarField)>)> {
    if data.fields.len() != p.sources.len() {
        return Err(Error::Dimension {
            expected: p.sources.len(),
            got: data.fields.len(),
        });
    }
    for h in &data.fields {
        h.ensure_same_grid(&p.gamma)?;
    }
    let grid = *p.grid();
    let sys = p.factor()?;
    let w = grid.trapezoid_weights();
    let nh = p.sources.len() as f64;
    let sigma = p.sigma.values();

    let per_source: Vec<(f64, Option<(Vec<f64>, Vec<f64>)>)> = p
        .sources
        .par_iter()
        .zip(&data.fields)
        .map(|(s, h)| -> Result<_> {
            let u = sys.solve(&p.rhs(&[s])?)?;
            let r: Vec<f64> = u
                .iter()
                .zip(sigma)
                .zip(h.values())
                .map(|((u, s), h)| s * u - h)
                .collect();
            let j = 0.5 / nh * r.iter().zip(&w).map(|(r, w)| w * r * r).sum::<f64>();
            if !with_gradient {
                return Ok((j, None));
            }
            let rhs: Vec<f64> = r
                .iter()
                .zip(&w)
                .zip(sigma)
                .map(|((r, w), s)| w * s * r / nh)
                .collect();
            let lambda = sys.solve(&rhs)?;
            let (gg, gs) = coefficient_gradient(&grid, &u, &lambda, &r, &w, nh);
            Ok((j, Some((gg, gs))))
        })
        .collect::<Result<Vec<_>>>()?;

    // Sequential reduction keeps the sum order fixed.
    let mut j = 0.0;
    let mut grads = with_gradient.then(|| (vec![0.0; grid.len()], vec![0.0; grid.len()]));
    for (js, gs) in per_source {
        j += js;
        if let (Some((ag, as_)), Some((g, s))) = (grads.as_mut(), gs) {
            for (a, b) in ag.iter_mut().zip(&g) {
                *a += b;
            }
            for (a, b) in as_.iter_mut().zip(&s) {
                *a += b;
            }
        }
    }
    if !j.is_finite() {
        return Err(Error::NonFinite);
    }
    let grads = grads
        .map(|(g, s)| -> Result<_> { Ok((ScalarField::new(grid, g)?, ScalarField::new(grid, s)?)) })
        .transpose()?;
    Ok((j, grads))
}

/// Gradient of one source's misfit given state `u`, adjoint `lambda` and residual `r`.
fn coefficient_gradient(
    grid: &Grid,
    u: &[f64],
    lambda: &[f64],
    r: &[f64],
    w: &[f64],
    nh: f64,
) -> (Vec<f64>, Vec<f64>) {
    let m = grid.m();
    let mut gg = vec![0.0; grid.len()];
    for i in 0..m {
        for j in 0..m {
            for (tri, k0) in cell_triangles(grid, i, j).iter().zip(REFERENCE) {
                let nodes = [tri.0, tri.1, tri.2];
                let mut q = 0.0;
                for a in 0..3 {
                    for b in 0..3 {
                        q += lambda[nodes[a]] * k0[a][b] * u[nodes[b]];
                    }
                }
                for &n in &nodes {
                    gg[n] -= q / 3.0;
                }
            }
        }
    }
    let lumped = lumped_mass(grid);
    let gs = (0..grid.len())
        .map(|n| w[n] * r[n] * u[n] / nh - lambda[n] * lumped[n] * u[n])
        .collect();
    (gg, gs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn all_sides(grid: &Grid, f: impl Fn(f64, f64) -> f64) -> Vec<BoundarySource> {
        Side::ALL
            .iter()
            .map(|&side| {
                let profile = (0..grid.side())
                    .map(|t| {
                        let (i, j) = match side {
                            Side::Bottom => (t, 0),
                            Side::Top => (t, grid.m()),
                            Side::Left => (0, t),
                            Side::Right => (grid.m(), t),
                        };
                        f(grid.x(i), grid.y(j))
                    })
                    .collect();
                BoundarySource { side, profile }
            })
            .collect()
    }

    #[test]
    fn constant_solution_is_exact() {
        let grid = Grid::unit(10);
        let p = DiffusionProblem::new(
            ScalarField::constant(grid, 1.0),
            ScalarField::constant(grid, 0.0),
            1.0,
        )
        .unwrap();
        let sources = all_sides(&grid, |_, _| 1.0);
        let refs: Vec<&BoundarySource> = sources.iter().collect();
        let u = solve_diffusion_multi(&p, &refs).unwrap();
        assert!(u.values().iter().all(|v| (v - 1.0).abs() < 1e-10));
    }

    fn mms_error(m: usize) -> f64 {
        let grid = Grid::unit(m);
        let exact = |x: f64, y: f64| 2.0 + (PI * x).cos() * (PI * y).cos();
        let mut p = DiffusionProblem::new(
            ScalarField::constant(grid, 1.0),
            ScalarField::constant(grid, 1.0),
            1.0,
        )
        .unwrap();
        p.volume_source = Some(ScalarField::from_fn(grid, |x, y| {
            2.0 + (1.0 + 2.0 * PI * PI) * (PI * x).cos() * (PI * y).cos()
        }));
        let sources = all_sides(&grid, exact);
        let refs: Vec<&BoundarySource> = sources.iter().collect();
        let u = solve_diffusion_multi(&p, &refs).unwrap();
        let e = ScalarField::from_fn(grid, exact);
        let diff = ScalarField::new(
            grid,
            u.values().iter().zip(e.values()).map(|(a, b)| a - b).collect(),
        )
        .unwrap();
        diff.l2_norm()
    }

    #[test]
    fn manufactured_solution_converges_at_second_order() {
        let e: Vec<f64> = [16, 32, 64].iter().map(|&m| mms_error(m)).collect();
        for k in 0..2 {
            let order = (e[k] / e[k + 1]).log2();
            assert!(order >= 1.8, "order {order} from errors {e:?}");
        }
    }

    #[test]
    fn zero_gamma_is_rejected() {
        let grid = Grid::unit(8);
        let mut gamma = ScalarField::constant(grid, 1.0);
        gamma.values_mut()[17] = 0.0;
        let p = DiffusionProblem::new(gamma, ScalarField::constant(grid, 0.1), 1.0).unwrap();
        let s = BoundarySource::gaussian(Side::Top, &grid);
        assert!(matches!(
            solve_diffusion(&p, &s),
            Err(Error::Coercivity { node: 17, .. })
        ));
    }

    #[test]
    fn internal_data_examples() {
        let grid = Grid::unit(4);
        let u = ScalarField::constant(grid, 3.0);
        let h = internal_data(&ScalarField::constant(grid, 0.0), &u).unwrap();
        assert!(h.values().iter().all(|&v| v == 0.0));
        let h = internal_data(&ScalarField::constant(grid, 2.0), &u).unwrap();
        assert!(h.values().iter().all(|&v| v == 6.0));
        assert!(internal_data(&ScalarField::constant(Grid::unit(5), 1.0), &u).is_err());
    }

    fn smooth_problem(m: usize) -> DiffusionProblem {
        let grid = Grid::unit(m);
        let gamma = ScalarField::from_fn(grid, |x, y| 0.02 + 0.01 * (2.0 * x + y).sin().powi(2));
        let sigma = ScalarField::from_fn(grid, |x, y| 0.3 + 0.1 * (3.0 * x * y).cos());
        let mut p = DiffusionProblem::new(gamma, sigma, 1.0).unwrap();
        p.sources = BoundarySource::four_sides(&grid);
        p
    }

    #[test]
    fn maximum_principle_for_nonnegative_sources() {
        let p = smooth_problem(12);
        for s in &p.sources {
            let u = solve_diffusion(&p, s).unwrap();
            assert!(u.min() >= -1e-10);
        }
    }

    #[test]
    fn solution_is_linear_in_source() {
        let p = smooth_problem(10);
        let (s1, s2) = (&p.sources[0], &p.sources[3]);
        let u1 = solve_diffusion(&p, s1).unwrap();
        let u2 = solve_diffusion(&p, s2).unwrap();
        let u12 = solve_diffusion_multi(&p, &[s1, s2]).unwrap();
        for ((a, b), c) in u1.values().iter().zip(u2.values()).zip(u12.values()) {
            assert!((a + b - c).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_residual_gives_zero_gradient() {
        let p = smooth_problem(10);
        let data = simulate_internal(&p).unwrap();
        let (j, g) = diffusion_misfit(&p, &data, true).unwrap();
        assert!(j.abs() < 1e-24);
        let (gg, gs) = g.unwrap();
        assert!(gg.values().iter().chain(gs.values()).all(|v| v.abs() < 1e-10));
    }
}
