//! Oracles and small problems shared by the integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;

use jointinv::basis::{analyze, Grid, ScalarField};
use jointinv::harness::{Experiment, ExperimentConfig, RelationChoice, Setup};
use jointinv::invert::{gradient_check, Objective};
use jointinv::learn::{mlp_gradient_check, MlpRelation};
use jointinv::pde_diffusion::{solve_diffusion_multi, BoundarySource, DiffusionProblem, Side};
use jointinv::pde_wave::{propagate, step_count, BoundaryTrace, Envelope, TimeSource, WaveProblem};
use jointinv::rng::stream;
use rand::Rng as _;
use rand_distr::StandardNormal;

pub fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

pub fn orders(errors: &[f64]) -> Vec<f64> {
    errors.windows(2).map(|w| (w[0] / w[1]).log2()).collect()
}

// ---- diffusion ----

/// Robin data `gamma du/dn + ell u` of an exact solution on every side,
/// for `gamma = ell = 1`.
fn robin_sources(grid: &Grid, u: impl Fn(f64, f64) -> f64, dudn: impl Fn(Side, f64, f64) -> f64) -> Vec<BoundarySource> {
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
                    let (x, y) = (grid.x(i), grid.y(j));
                    dudn(side, x, y) + u(x, y)
                })
                .collect();
            BoundarySource { side, profile }
        })
        .collect()
}

fn unit_problem(grid: Grid, sigma: f64) -> DiffusionProblem {
    DiffusionProblem::new(ScalarField::constant(grid, 1.0), ScalarField::constant(grid, sigma), 1.0).unwrap()
}

/// Max nodal error for `u = 1` with `sigma = 0`.
pub fn constant_solution_error(m: usize) -> f64 {
    let grid = Grid::unit(m);
    let p = unit_problem(grid, 0.0);
    let sources = robin_sources(&grid, |_, _| 1.0, |_, _, _| 0.0);
    let refs: Vec<&BoundarySource> = sources.iter().collect();
    let u = solve_diffusion_multi(&p, &refs).unwrap();
    u.values().iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max)
}

/// L2 error for `u = 2 + cos(pi x) cos(pi y)` with `gamma = sigma = ell = 1`.
pub fn mms_error(m: usize) -> f64 {
    let grid = Grid::unit(m);
    let exact = |x: f64, y: f64| 2.0 + (PI * x).cos() * (PI * y).cos();
    let mut p = unit_problem(grid, 1.0);
    p.volume_source = Some(ScalarField::from_fn(grid, |x, y| {
        2.0 + (1.0 + 2.0 * PI * PI) * (PI * x).cos() * (PI * y).cos()
    }));
    // the normal derivative vanishes on every side
    let sources = robin_sources(&grid, exact, |_, _, _| 0.0);
    let refs: Vec<&BoundarySource> = sources.iter().collect();
    let u = solve_diffusion_multi(&p, &refs).unwrap();
    let e = ScalarField::from_fn(grid, exact);
    let diff = ScalarField::new(grid, u.values().iter().zip(e.values()).map(|(a, b)| a - b).collect()).unwrap();
    diff.l2_norm()
}

// ---- wave ----

pub fn smooth_wave(m: usize, dt: f64, t_final: f64) -> WaveProblem {
    let grid = Grid::lowered(m);
    let steps = step_count(dt, t_final).unwrap();
    WaveProblem {
        kappa: ScalarField::from_fn(grid, |x, y| 1.0 + 0.2 * (2.0 * PI * x).sin() * (PI * y).cos()),
        rho: ScalarField::from_fn(grid, |x, y| 1.0 + 0.1 * (2.0 * PI * x).cos() * (1.0 + y)),
        dt,
        t_final,
        source: TimeSource::sampled(&grid, steps, dt, Envelope::Ramp { width: 0.25 }, |x| {
            1.0 + 0.5 * (2.0 * PI * x).cos()
        }),
    }
}

pub fn homogeneous_wave(m: usize, dt: f64, t_final: f64, profile: impl Fn(f64) -> f64, env: Envelope) -> WaveProblem {
    let grid = Grid::lowered(m);
    let steps = step_count(dt, t_final).unwrap();
    WaveProblem {
        kappa: ScalarField::constant(grid, 1.0),
        rho: ScalarField::constant(grid, 1.0),
        dt,
        t_final,
        source: TimeSource::sampled(&grid, steps, dt, env, profile),
    }
}

/// Same leapfrog scheme for `p_tt = p_zz` on `[0, 1]` with flux `s(t)` at
/// the top node and a homogeneous flux at the bottom; returns `p(t_n, 0)`.
pub fn string_1d(m: usize, dt: f64, steps: usize, s: impl Fn(usize) -> f64) -> Vec<f64> {
    let h = 1.0 / m as f64;
    let acc = |p: &[f64], n: usize| -> Vec<f64> {
        (0..=m)
            .map(|j| {
                if j == 0 {
                    2.0 * (p[1] - p[0]) / (h * h)
                } else if j == m {
                    2.0 * (p[m - 1] - p[m]) / (h * h) + 2.0 * s(n) / h
                } else {
                    (p[j + 1] - 2.0 * p[j] + p[j - 1]) / (h * h)
                }
            })
            .collect()
    };
    let mut prev = vec![0.0; m + 1];
    let mut cur: Vec<f64> = acc(&prev, 0).iter().map(|a| 0.5 * dt * dt * a).collect();
    let mut out = vec![prev[0], cur[0]];
    for n in 1..steps {
        let a = acc(&cur, n);
        let next: Vec<f64> = (0..=m).map(|j| 2.0 * cur[j] - prev[j] + dt * dt * a[j]).collect();
        prev = cur;
        cur = next;
        out.push(cur[0]);
    }
    out
}

/// Largest spread across receivers of an x-invariant run, and its relative
/// L2 gap to the 1D oracle at eight times the resolution.
pub fn string_oracle_gap() -> (f64, f64) {
    let (m, dt, t_final) = (16, 0.02, 2.0);
    let env = Envelope::Ramp { width: 0.25 };
    let trace = propagate(&homogeneous_wave(m, dt, t_final, |_| 1.0, env)).unwrap();
    let spread = trace
        .values
        .iter()
        .map(|row| row.iter().map(|v| (v - row[0]).abs()).fold(0.0, f64::max))
        .fold(0.0, f64::max);
    let r = 8;
    let fine_dt = dt / r as f64;
    let steps = step_count(fine_dt, t_final).unwrap();
    let oracle = string_1d(r * m, fine_dt, steps, |n| env.value(n as f64 * fine_dt));
    let coarse: Vec<f64> = trace.values.iter().map(|row| row[0]).collect();
    let sampled: Vec<f64> = oracle.iter().step_by(r).copied().collect();
    assert_eq!(coarse.len(), sampled.len());
    (spread, rel_l2(&coarse, &sampled))
}

fn sampled_trace(trace: &BoundaryTrace, stride_x: usize, stride_t: usize) -> Vec<f64> {
    trace
        .values
        .iter()
        .step_by(stride_t)
        .flat_map(|row| row.iter().step_by(stride_x).copied().collect::<Vec<_>>())
        .collect()
}

/// Trace errors at M = 16, 32 (dt halved with h) against M = 64, dt / 8.
pub fn wave_self_convergence() -> Vec<f64> {
    let (t_final, base_dt) = (1.0, 0.02);
    let reference = propagate(&smooth_wave(64, base_dt / 8.0, t_final)).unwrap();
    [1usize, 2]
        .iter()
        .map(|&r| {
            let m = 16 * r;
            let trace = propagate(&smooth_wave(m, base_dt / r as f64, t_final)).unwrap();
            rel_l2(&sampled_trace(&trace, 1, 1), &sampled_trace(&reference, 64 / m, 8 / r))
        })
        .collect()
}

/// Largest trace magnitude with a zero source profile.
pub fn zero_source_trace_max() -> f64 {
    let mut p = smooth_wave(16, 0.02, 1.0);
    p.source.profile.iter_mut().for_each(|v| *v = 0.0);
    propagate(&p).unwrap().values.iter().flatten().fold(0.0, |a, v| a.max(v.abs()))
}

// ---- objectives ----

/// Small problems with a quick relation fit.
pub fn small_config(experiment: Experiment, relation: RelationChoice) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(experiment, relation);
    cfg.n = 250;
    cfg.poly.degree = 2;
    cfg.refinement = Some(1);
    if experiment == Experiment::Exp3 {
        cfg.m = Some(28);
        cfg.k = Some(3);
        cfg.wave.t_final = 1.0;
    } else {
        cfg.m = Some(16);
    }
    cfg
}

/// Worst gap over three random points near the truth, ten directions each,
/// for both the constrained and the penalized objective.
pub fn objective_gradient_gap(cfg: &ExperimentConfig) -> f64 {
    let setup = Setup::new(cfg).unwrap();
    let data = setup.measure(cfg).unwrap();
    let inv = cfg.inversion_config();
    let obj = Objective::new(
        &setup.forward,
        &data,
        &setup.trained.relation,
        inv.k,
        setup.scales,
        inv.tikhonov,
        inv.positivity_weight,
        inv.positivity_floor,
    )
    .unwrap();
    let scaled = |f: &ScalarField, s: f64| -> Vec<f64> {
        analyze(f, inv.k).unwrap().into_vec().iter().map(|v| v / s).collect()
    };
    let xf = scaled(&setup.truth.f, setup.scales.f);
    let xg = scaled(&setup.truth.g, setup.scales.g);
    let mut rng = stream(17, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..3 {
        let mut jitter = |x: &[f64]| -> Vec<f64> {
            x.iter().map(|v| v + 0.03 * rng.sample::<f64, _>(StandardNormal)).collect()
        };
        let pf = jitter(&xf);
        let mut pfg = pf.clone();
        pfg.extend(jitter(&xg));
        let mut dirs = stream(rng.random(), 1);
        let g0 = gradient_check(|x| obj.phi0(x).map(|e| (e.value, e.gradient)), &pf, 10, 1e-5, &mut dirs).unwrap();
        let gj = gradient_check(|x| obj.phij(x, 0.5).map(|e| (e.value, e.gradient)), &pfg, 10, 1e-5, &mut dirs).unwrap();
        worst = worst.max(g0).max(gj);
    }
    worst
}

pub fn mlp_backprop_gap() -> f64 {
    let mut rng = stream(5, 0);
    let model = MlpRelation::init(16, 16, 12, 4, &mut rng);
    let x: Vec<f64> = (0..16).map(|_| rng.sample(StandardNormal)).collect();
    let y: Vec<f64> = (0..16).map(|_| rng.sample(StandardNormal)).collect();
    mlp_gradient_check(&model, &x, &y, 30, &mut rng).unwrap()
}
