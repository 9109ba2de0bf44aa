//! Leapfrog finite differences for `p_tt = kappa div((1/rho) grad p)` on
//! `(0, 1) x (-1, 0)`, periodic in x, with the flux condition
//! `(1/rho) dp/dz = S(t, x)` on the top row and a homogeneous one on the
//! bottom row, where the pressure is recorded.
//!
//! Pressure lives on the nodes. The flux `(1/rho) grad p` lives on the edges
//! between neighbouring nodes, with `1/rho` averaged arithmetically there
//! (the harmonic mean of `rho`). Boundary rows are half control volumes,
//! which is the same as mirroring ghost nodes across the boundary.
//!
//! Column `i = M` duplicates column `0`; its coefficient values are not used
//! and the recorded trace copies column `0` into it.

use serde::{Deserialize, Serialize};

use crate::basis::{trapezoid_1d, Grid, Placement, ScalarField};
use crate::error::{Error, Result};
use crate::synth::NoiseSpec;

/// Temporal shape multiplying the source profile.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Envelope {
    /// `0.5 (1 - cos(pi t / width))` up to `width`, then 1.
    Ramp { width: f64 },
    Step,
}

impl Default for Envelope {
    fn default() -> Self {
        Envelope::Ramp { width: 0.25 }
    }
}

impl Envelope {
    pub fn value(&self, t: f64) -> f64 {
        match *self {
            Envelope::Ramp { width } if t < width => {
                0.5 * (1.0 - (std::f64::consts::PI * t / width).cos())
            }
            _ => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSource {
    /// Top-row values, `M + 1` of them.
    pub profile: Vec<f64>,
    /// Envelope samples at `t_n = n dt`, one per step plus the initial time.
    pub envelope: Vec<f64>,
}

impl TimeSource {
    pub fn new(profile: Vec<f64>, envelope: Vec<f64>) -> Result<Self> {
        if profile.iter().chain(&envelope).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite source sample".into()));
        }
        Ok(Self { profile, envelope })
    }

    pub fn sampled(grid: &Grid, steps: usize, dt: f64, env: Envelope, f: impl Fn(f64) -> f64) -> Self {
        Self {
            profile: (0..grid.side()).map(|i| f(grid.x(i))).collect(),
            envelope: (0..=steps).map(|n| env.value(n as f64 * dt)).collect(),
        }
    }

    /// `exp(-(x-0.8)^2/0.1^2) - exp(-(x-0.2)^2/0.1^2)`.
    pub fn two_gaussians(grid: &Grid, steps: usize, dt: f64, env: Envelope) -> Self {
        Self::sampled(grid, steps, dt, env, |x| {
            (-(x - 0.8) * (x - 0.8) / 0.01).exp() - (-(x - 0.2) * (x - 0.2) / 0.01).exp()
        })
    }
}

#[derive(Clone, Debug)]
pub struct WaveProblem {
    pub kappa: ScalarField,
    pub rho: ScalarField,
    pub dt: f64,
    pub t_final: f64,
    pub source: TimeSource,
}

/// Bottom-row pressure at every time level: `values[n][i]`, `i = 0..=M`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryTrace {
    pub dt: f64,
    pub m: usize,
    pub values: Vec<Vec<f64>>,
    pub noise: NoiseSpec,
}

impl BoundaryTrace {
    pub fn steps(&self) -> usize {
        self.values.len().saturating_sub(1)
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.values.len()).map(|n| n as f64 * self.dt).collect()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.values.concat()
    }

    pub fn with_flat(&self, flat: Vec<f64>) -> Self {
        let cols = self.m + 1;
        Self {
            dt: self.dt,
            m: self.m,
            values: flat.chunks(cols).map(<[f64]>::to_vec).collect(),
            noise: self.noise.clone(),
        }
    }

    /// Squared norm `sum_n tau_n sum_i omega_i v^2` with trapezoidal weights.
    pub fn weighted_norm_sq(&self) -> f64 {
        let tau = time_weights(self.steps(), self.dt);
        let omega = trapezoid_1d(self.m);
        self.values
            .iter()
            .zip(&tau)
            .map(|(row, t)| t * row.iter().zip(&omega).map(|(v, w)| w * v * v).sum::<f64>())
            .sum()
    }
}

fn time_weights(steps: usize, dt: f64) -> Vec<f64> {
    (0..=steps)
        .map(|n| if n == 0 || n == steps { 0.5 * dt } else { dt })
        .collect()
}

/// Number of steps `T / dt`, which must be an integer to within 1e-9.
pub fn step_count(dt: f64, t_final: f64) -> Result<usize> {
    if !(dt > 0.0) || !(t_final > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "dt and T must be positive, got {dt} and {t_final}"
        )));
    }
    let r = t_final / dt;
    let n = r.round();
    if (r - n).abs() > 1e-9 * r.max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "T = {t_final} is not a whole number of steps of {dt}"
        )));
    }
    Ok(n as usize)
}

/// Precomputed stencil for one coefficient pair.
struct Stencil {
    m: usize,
    h2: f64,
    kappa: Vec<f64>,
    /// `omega_e b_e / h^2` for the edge to the right neighbour (periodic).
    ex: Vec<f64>,
    /// `b_e / h^2` for the edge to the upper neighbour (zero on the top row).
    ey: Vec<f64>,
    /// Inverse half-cell factor: 2 on the boundary rows, 1 inside.
    wfac: Vec<f64>,
}

impl Stencil {
    fn new(p: &WaveProblem) -> Result<Self> {
        let grid = *p.kappa.grid();
        p.kappa.ensure_same_grid(&p.rho)?;
        if grid.placement() != Placement::Lowered {
            return Err(Error::GridMismatch("wave fields must live on the lowered grid".into()));
        }
        let m = grid.m();
        if m < 2 {
            return Err(Error::InvalidArgument("wave grid needs M >= 2".into()));
        }
        let side = m + 1;
        let n = m * side;
        for (field, name) in [(&p.kappa, "kappa"), (&p.rho, "rho")] {
            if let Some(v) = field.values()[..n].iter().find(|v| !(**v > 0.0)) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, found {v}")));
            }
        }
        let h2 = grid.spacing() * grid.spacing();
        let binv: Vec<f64> = p.rho.values()[..n].iter().map(|r| 1.0 / r).collect();
        let mut ex = vec![0.0; n];
        let mut ey = vec![0.0; n];
        for i in 0..m {
            let ir = (i + 1) % m;
            for j in 0..side {
                let a = i * side + j;
                let omega = if j == 0 || j == m { 0.5 } else { 1.0 };
                ex[a] = omega * 0.5 * (binv[a] + binv[ir * side + j]) / h2;
                if j < m {
                    ey[a] = 0.5 * (binv[a] + binv[a + 1]) / h2;
                }
            }
        }
        let wfac = (0..n)
            .map(|a| if a % side == 0 || a % side == m { 2.0 } else { 1.0 })
            .collect();
        Ok(Self {
            m,
            h2,
            kappa: p.kappa.values()[..n].to_vec(),
            ex,
            ey,
            wfac,
        })
    }

    fn len(&self) -> usize {
        self.m * (self.m + 1)
    }

    /// Largest local wave speed `sqrt(kappa * max incident 1/rho)`.
    fn max_speed(&self) -> f64 {
        let side = self.m + 1;
        let mut c2 = 0.0f64;
        for a in 0..self.len() {
            let (i, j) = (a / side, a % side);
            let left = ((i + self.m - 1) % self.m) * side + j;
            let mut b = self.ex[a].max(self.ex[left]);
            // Undo the half weight on boundary rows to compare raw 1/rho.
            if j == 0 || j == self.m {
                b *= 2.0;
            }
            b = b.max(self.ey[a]);
            if j > 0 {
                b = b.max(self.ey[a - 1]);
            }
            c2 = c2.max(self.kappa[a] * b * self.h2);
        }
        c2.sqrt()
    }

    /// `out = S p`, the symmetric flux-difference operator.
    fn apply_sym(&self, p: &[f64], out: &mut [f64]) {
        let side = self.m + 1;
        out.iter_mut().for_each(|o| *o = 0.0);
        for i in 0..self.m {
            let ir = (i + 1) % self.m;
            for j in 0..side {
                let a = i * side + j;
                let r = ir * side + j;
                let fx = self.ex[a] * (p[r] - p[a]);
                out[a] += fx;
                out[r] -= fx;
                if j < self.m {
                    let fy = self.ey[a] * (p[a + 1] - p[a]);
                    out[a] += fy;
                    out[a + 1] -= fy;
                }
            }
        }
    }

    /// `out = kappa (B p + s_n)` with `B = diag(wfac) S`.
    fn acceleration(&self, p: &[f64], src: &[f64], env: f64, out: &mut [f64]) {
        self.apply_sym(p, out);
        let side = self.m + 1;
        let h = self.h2.sqrt();
        for (a, o) in out.iter_mut().enumerate() {
            let mut v = self.wfac[a] * *o;
            if a % side == self.m {
                v += self.wfac[a] * src[a / side] * env / h;
            }
            *o = self.kappa[a] * v;
        }
    }
}

/// Checks the CFL bound `dt c_max / dx <= 1/sqrt(2)`.
pub fn check_cfl(p: &WaveProblem) -> Result<()> {
    let st = Stencil::new(p)?;
    cfl(&st, p.dt)
}

fn cfl(st: &Stencil, dt: f64) -> Result<()> {
    let admissible = st.h2.sqrt() / (std::f64::consts::SQRT_2 * st.max_speed());
    if dt > admissible {
        return Err(Error::Stability { dt, admissible });
    }
    Ok(())
}

/// Largest time step the CFL bound admits for these coefficients.
pub fn admissible_dt(kappa: &ScalarField, rho: &ScalarField) -> Result<f64> {
    let probe = WaveProblem {
        kappa: kappa.clone(),
        rho: rho.clone(),
        dt: 1.0,
        t_final: 1.0,
        source: TimeSource {
            profile: Vec::new(),
            envelope: Vec::new(),
        },
    };
    let st = Stencil::new(&probe)?;
    Ok(st.h2.sqrt() / (std::f64::consts::SQRT_2 * st.max_speed()))
}

struct Run {
    trace: BoundaryTrace,
    states: Option<Vec<Vec<f64>>>,
}

fn run(p: &WaveProblem, keep_states: bool) -> Result<(Stencil, Run)> {
    let st = Stencil::new(p)?;
    let steps = step_count(p.dt, p.t_final)?;
    cfl(&st, p.dt)?;
    let m = st.m;
    if p.source.profile.len() != m + 1 {
        return Err(Error::Dimension {
            expected: m + 1,
            got: p.source.profile.len(),
        });
    }
    if p.source.envelope.len() != steps + 1 {
        return Err(Error::Dimension {
            expected: steps + 1,
            got: p.source.envelope.len(),
        });
    }
    let n = st.len();
    let side = m + 1;
    let dt2 = p.dt * p.dt;
    let record = |state: &[f64]| -> Vec<f64> {
        let mut row: Vec<f64> = (0..m).map(|i| state[i * side]).collect();
        row.push(state[0]);
        row
    };

    let mut prev = vec![0.0; n];
    let mut acc = vec![0.0; n];
    st.acceleration(&prev, &p.source.profile, p.source.envelope[0], &mut acc);
    let mut cur: Vec<f64> = acc.iter().map(|a| 0.5 * dt2 * a).collect();

    let mut values = Vec::with_capacity(steps + 1);
    values.push(record(&prev));
    values.push(record(&cur));
    let mut states = keep_states.then(|| {
        let mut s = Vec::with_capacity(steps + 1);
        s.push(prev.clone());
        s.push(cur.clone());
        s
    });
    for step in 1..steps {
        st.acceleration(&cur, &p.source.profile, p.source.envelope[step], &mut acc);
        let mut finite = true;
        for a in 0..n {
            let next = 2.0 * cur[a] - prev[a] + dt2 * acc[a];
            finite &= next.is_finite();
            prev[a] = next;
        }
        if !finite {
            return Err(Error::BlowUp { step: step + 1 });
        }
        std::mem::swap(&mut prev, &mut cur);
        values.push(record(&cur));
        if let Some(s) = states.as_mut() {
            s.push(cur.clone());
        }
    }
    values.truncate(steps + 1);
    if let Some(s) = states.as_mut() {
        s.truncate(steps + 1);
    }
    Ok((
        st,
        Run {
            trace: BoundaryTrace {
                dt: p.dt,
                m,
                values,
                noise: NoiseSpec::none(),
            },
            states,
        },
    ))
}

/// Bottom-row trace of the leapfrog solution from rest.
pub fn propagate(p: &WaveProblem) -> Result<BoundaryTrace> {
    Ok(run(p, false)?.1.trace)
}

/// Misfit `J = 1/2 sum_n tau_n sum_i omega_i (p_bottom - H)^2` and optionally
/// its exact discrete gradient with respect to nodal kappa and rho.
pub fn wave_misfit(
    p: &WaveProblem,
    observed: &BoundaryTrace,
    with_gradient: bool,
) -> Result<(f64, Option<(ScalarField, ScalarField)>)> {
    let (st, run) = run(p, with_gradient)?;
    let trace = run.trace;
    if observed.values.len() != trace.values.len() || observed.m != trace.m {
        return Err(Error::Dimension {
            expected: trace.values.len() * (trace.m + 1),
            got: observed.values.len() * (observed.m + 1),
        });
    }
    let steps = trace.steps();
    let m = st.m;
    let side = m + 1;
    let tau = time_weights(steps, p.dt);
    let omega = trapezoid_1d(m);
    let mut j = 0.0;
    let mut forcing = vec![vec![0.0; m]; steps + 1];
    for n in 0..=steps {
        let (row, obs) = (&trace.values[n], &observed.values[n]);
        if obs.len() != side {
            return Err(Error::Dimension {
                expected: side,
                got: obs.len(),
            });
        }
        for i in 0..=m {
            let r = row[i] - obs[i];
            j += 0.5 * tau[n] * omega[i] * r * r;
            forcing[n][i % m] += tau[n] * omega[i] * r;
        }
    }
    if !j.is_finite() {
        return Err(Error::NonFinite);
    }
    if !with_gradient {
        return Ok((j, None));
    }
    let states = run.states.expect("states kept for gradient");
    let n_act = st.len();
    let dt2 = p.dt * p.dt;

    let mut kbar = vec![0.0; n_act];
    let mut ex_bar = vec![0.0; n_act];
    let mut ey_bar = vec![0.0; n_act];
    // lam_next = lambda^{n+1}, lam_next2 = lambda^{n+2}.
    let mut lam_next = vec![0.0; n_act];
    let mut lam_next2 = vec![0.0; n_act];
    let mut work = vec![0.0; n_act];
    let mut acc = vec![0.0; n_act];
    let mut v = vec![0.0; n_act];
    let add_forcing = |lam: &mut [f64], n: usize| {
        for (i, f) in forcing[n].iter().enumerate() {
            lam[i * side] += f;
        }
    };
    add_forcing(&mut lam_next, steps);

    for n in (0..steps).rev() {
        // lam_next holds lambda^{n+1}, the multiplier of the update producing p^{n+1}.
        let c = if n == 0 { 0.5 * dt2 } else { dt2 };
        let pn = &states[n];
        st.acceleration(pn, &p.source.profile, p.source.envelope[n], &mut acc);
        for a in 0..n_act {
            // acc = kappa (B p + s); divide kappa back out for the kappa partial.
            kbar[a] += c * lam_next[a] * acc[a] / st.kappa[a];
            v[a] = st.wfac[a] * st.kappa[a] * lam_next[a];
        }
        for i in 0..m {
            let ir = (i + 1) % m;
            for jj in 0..side {
                let a = i * side + jj;
                let r = ir * side + jj;
                ex_bar[a] += c * (pn[r] - pn[a]) * (v[a] - v[r]);
                if jj < m {
                    ey_bar[a] += c * (pn[a + 1] - pn[a]) * (v[a] - v[a + 1]);
                }
            }
        }
        if n == 0 {
            break;
        }
        // lambda^n = dg_n + (2 + dt^2 B^T kappa) lambda^{n+1} - lambda^{n+2}
        st.apply_sym(&v, &mut work);
        let mut lam_n: Vec<f64> = (0..n_act)
            .map(|a| 2.0 * lam_next[a] + dt2 * work[a] - lam_next2[a])
            .collect();
        add_forcing(&mut lam_n, n);
        lam_next2 = std::mem::replace(&mut lam_next, lam_n);
    }

    // Chain edge coefficients back to nodal rho through b_e = (1/rho_a + 1/rho_r) / 2.
    let rho = p.rho.values();
    let mut rbar = vec![0.0; n_act];
    for i in 0..m {
        let ir = (i + 1) % m;
        for jj in 0..side {
            let a = i * side + jj;
            let r = ir * side + jj;
            let omega = if jj == 0 || jj == m { 0.5 } else { 1.0 };
            let gx = ex_bar[a] * omega / st.h2;
            rbar[a] -= 0.5 * gx / (rho[a] * rho[a]);
            rbar[r] -= 0.5 * gx / (rho[r] * rho[r]);
            if jj < m {
                let gy = ey_bar[a] / st.h2;
                rbar[a] -= 0.5 * gy / (rho[a] * rho[a]);
                rbar[a + 1] -= 0.5 * gy / (rho[a + 1] * rho[a + 1]);
            }
        }
    }
    let grid = *p.kappa.grid();
    let widen = |v: Vec<f64>| -> Result<ScalarField> {
        let mut full = v;
        full.resize(grid.len(), 0.0);
        ScalarField::new(grid, full)
    };
    Ok((j, Some((widen(kbar)?, widen(rbar)?))))
}

/// Discrete energy between levels `n` and `n+1` with the source switched off:
/// kinetic part weighted by the half-cell mass over kappa, minus `p^{n+1} S p^n / 2`.
pub fn discrete_energy(p: &WaveProblem, prev: &[f64], next: &[f64]) -> Result<f64> {
    let st = Stencil::new(p)?;
    let mut sp = vec![0.0; st.len()];
    st.apply_sym(prev, &mut sp);
    let mut e = 0.0;
    for a in 0..st.len() {
        let d = (next[a] - prev[a]) / p.dt;
        e += 0.5 * d * d / (st.wfac[a] * st.kappa[a]);
        e -= 0.5 * next[a] * sp[a];
    }
    Ok(e * st.h2)
}

/// Full active-node states at every level (column `M` excluded).
pub fn propagate_states(p: &WaveProblem) -> Result<Vec<Vec<f64>>> {
    Ok(run(p, true)?.1.states.expect("states kept"))
}
