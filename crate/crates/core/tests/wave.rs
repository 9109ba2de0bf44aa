mod common;

use std::f64::consts::PI;

use common::{
    homogeneous_wave as homogeneous, orders, smooth_wave as smooth_problem, string_oracle_gap,
    wave_self_convergence, zero_source_trace_max,
};
use jointinv::basis::ScalarField;
use jointinv::pde_wave::{discrete_energy, propagate, propagate_states, wave_misfit, Envelope};

#[test]
fn x_invariant_source_matches_string_oracle() {
    let (spread, gap) = string_oracle_gap();
    assert!(spread <= 1e-12, "receivers differ by {spread:e}");
    assert!(gap <= 1e-2, "relative L2 gap to the 1D oracle {gap:e}");
}

#[test]
fn self_convergence_is_second_order() {
    let errors = wave_self_convergence();
    let order = orders(&errors)[0];
    assert!(order >= 1.8, "errors {errors:?}, observed order {order}");
}

#[test]
fn zero_source_is_silent() {
    assert_eq!(zero_source_trace_max(), 0.0);
}

#[test]
fn energy_is_conserved_after_shutoff() {
    let (m, dt, t_final) = (16, 0.01, 12.0);
    let mut p = homogeneous(m, dt, t_final, |x| (2.0 * PI * x).sin() + 0.3, Envelope::Ramp { width: 0.25 });
    let off = 100;
    for v in p.source.envelope.iter_mut().skip(off) {
        *v = 0.0;
    }
    let states = propagate_states(&p).unwrap();
    let e0 = discrete_energy(&p, &states[off + 1], &states[off + 2]).unwrap();
    let last = states.len() - 2;
    let e1 = discrete_energy(&p, &states[last], &states[last + 1]).unwrap();
    assert!(e0 > 0.0);
    let per_1000 = (e1 - e0).abs() / e0 * 1000.0 / (last - off - 1) as f64;
    assert!(per_1000 <= 1e-6, "relative drift per 1000 steps {per_1000:e}");
}

#[test]
fn shifted_source_shifts_trace() {
    let (m, dt, t_final) = (20, 0.01, 1.5);
    let env = Envelope::Ramp { width: 0.25 };
    let bump = |x: f64| (-(x - 0.3) * (x - 0.3) / 0.01).exp();
    let p = homogeneous(m, dt, t_final, bump, env);
    let base = propagate(&p).unwrap();
    for s in [1usize, 7] {
        let mut q = p.clone();
        for i in 0..=m {
            q.source.profile[i] = p.source.profile[(i + m - s) % m];
        }
        let shifted = propagate(&q).unwrap();
        for (a, b) in base.values.iter().zip(&shifted.values) {
            for i in 0..m {
                assert!((b[(i + s) % m] - a[i]).abs() <= 1e-10, "shift {s}");
            }
        }
    }
}

#[test]
fn adjoint_gradient_matches_finite_differences() {
    let p = smooth_problem(12, 0.02, 1.0);
    let grid = *p.kappa.grid();
    let mut target = p.clone();
    target.kappa = ScalarField::from_fn(grid, |x, y| 1.1 + 0.1 * (2.0 * PI * x).cos() * y);
    let observed = propagate(&target).unwrap();
    let (_, g) = wave_misfit(&p, &observed, true).unwrap();
    let (gk, gr) = g.unwrap();
    let mut worst: f64 = 0.0;
    for d in 0..10 {
        let (a, b) = (d as f64 + 1.0, 2.0 * d as f64 - 3.0);
        let dk = ScalarField::from_fn(grid, |x, y| (a * x + b * y).sin() * 0.1);
        let dr = ScalarField::from_fn(grid, |x, y| (b * x - a * y).cos() * 0.1);
        let h = 1e-5;
        let moved = |s: f64| {
            let mut q = p.clone();
            q.kappa = ScalarField::new(grid, p.kappa.values().iter().zip(dk.values()).map(|(v, e)| v + s * e).collect()).unwrap();
            q.rho = ScalarField::new(grid, p.rho.values().iter().zip(dr.values()).map(|(v, e)| v + s * e).collect()).unwrap();
            wave_misfit(&q, &observed, false).unwrap().0
        };
        let fd = (moved(h) - moved(-h)) / (2.0 * h);
        let an: f64 = gk.values().iter().zip(dk.values()).map(|(g, e)| g * e).sum::<f64>()
            + gr.values().iter().zip(dr.values()).map(|(g, e)| g * e).sum::<f64>();
        worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()));
    }
    assert!(worst <= 1e-4, "worst relative gap {worst:e}");
}
