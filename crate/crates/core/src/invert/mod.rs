//! Staged joint inversion with a learned relation.
//!
//! Stage one minimizes over `f` alone with `g` tied to `f` by the relation.
//! Each later stage minimizes over the pair with the relation as a penalty
//! whose weight halves from stage to stage, warm-started at the previous pair.

mod bfgs;
mod objective;

pub use bfgs::{bfgs_minimize, BfgsOptions, BfgsResult, IterRecord, StopReason};
pub use objective::{Evaluation, Objective, Scales};

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::basis::{analyze, synthesize, ScalarField, SpectralCoeffs};
use crate::error::{Error, Result};
use crate::forward::{ForwardProblem, MeasurementSet};
use crate::learn::LearnedRelation;
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InversionConfig {
    /// Number of penalized stages after stage one.
    pub j: usize,
    pub alpha0: f64,
    /// Tikhonov weight on the scaled unknowns.
    pub tikhonov: f64,
    pub tol_grad: f64,
    pub tol_step: f64,
    pub max_bfgs_iters: usize,
    /// Band limit of the unknowns.
    pub k: usize,
    pub positivity_weight: f64,
    pub positivity_floor: f64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            j: 3,
            alpha0: 0.0,
            tikhonov: 1e-8,
            tol_grad: 1e-7,
            tol_step: 1e-7,
            max_bfgs_iters: 200,
            k: 3,
            positivity_weight: 1e3,
            positivity_floor: 0.05,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.j < 1 {
            return bad("inversion.j must be at least 1");
        }
        if !(self.alpha0 >= 0.0) {
            return bad("inversion.alpha0 must be nonnegative");
        }
        if !(self.tol_grad > 0.0 && self.tol_step > 0.0) {
            return bad("inversion tolerances must be positive");
        }
        if !(self.tikhonov >= 0.0 && self.positivity_weight >= 0.0) {
            return bad("inversion weights must be nonnegative");
        }
        if self.max_bfgs_iters == 0 {
            return bad("inversion.max_bfgs_iters must be positive");
        }
        Ok(())
    }

    /// `alpha_j = alpha0 / 2^j` for `j = 1..=J`.
    pub fn alphas(&self) -> Vec<f64> {
        (1..=self.j).map(|j| self.alpha0 * 0.5f64.powi(j as i32)).collect()
    }

    fn bfgs(&self) -> BfgsOptions {
        BfgsOptions {
            tol_grad: self.tol_grad,
            tol_step: self.tol_step,
            max_iters: self.max_bfgs_iters,
            ..Default::default()
        }
    }
}

/// Exact coefficient fields, when known.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub f: ScalarField,
    pub g: ScalarField,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    /// Relation penalty weight; `None` for stage one where it is a constraint.
    pub alpha: Option<f64>,
    pub f_hat: Vec<f64>,
    pub g_hat: Vec<f64>,
    pub f_field: ScalarField,
    pub g_field: ScalarField,
    pub start_value: f64,
    pub value: f64,
    pub stop: StopReason,
    pub history: Vec<IterRecord>,
    pub f_error: Option<f64>,
    pub g_error: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InversionReport {
    pub config: InversionConfig,
    pub scales: Scales,
    pub data_scale: f64,
    pub relation: String,
    pub stages: Vec<StageRecord>,
}

impl InversionReport {
    pub fn first(&self) -> &StageRecord {
        &self.stages[0]
    }

    pub fn last(&self) -> &StageRecord {
        self.stages.last().expect("at least one stage")
    }
}

/// `||a - b|| / ||b||` in the trapezoidal L2 norm; `b` is the reference.
pub fn relative_l2_error(a: &ScalarField, b: &ScalarField) -> Result<f64> {
    a.ensure_same_grid(b)?;
    let nb = b.l2_norm();
    if nb == 0.0 {
        return Err(Error::InvalidArgument("reference field has zero norm".into()));
    }
    let diff = ScalarField::new(*a.grid(), a.values().iter().zip(b.values()).map(|(x, y)| x - y).collect())?;
    Ok(diff.l2_norm() / nb)
}

/// Largest relative gap between `<grad, d>` and a central difference of the
/// objective along `n_dirs` random unit directions `d`.
pub fn gradient_check<F>(mut obj: F, x: &[f64], n_dirs: usize, h: f64, rng: &mut Rng) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (_, g) = obj(x)?;
    let mut worst: f64 = 0.0;
    for _ in 0..n_dirs {
        let mut d: Vec<f64> = (0..x.len()).map(|_| rng.sample(StandardNormal)).collect();
        let norm = crate::linalg::norm2(&d);
        d.iter_mut().for_each(|v| *v /= norm);
        let xp: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + h * b).collect();
        let xm: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a - h * b).collect();
        let fd = (obj(&xp)?.0 - obj(&xm)?.0) / (2.0 * h);
        let an = crate::linalg::dot(&g, &d);
        let gap = (fd - an).abs() / fd.abs().max(an.abs()).max(f64::MIN_POSITIVE);
        worst = worst.max(gap);
    }
    Ok(worst)
}

/// BFGS restarted from the best iterate (with a fresh Hessian) when the line
/// search stalls; a stall without progress ends at the best iterate.
fn minimize<F>(mut obj: F, x0: &[f64], opts: &BfgsOptions) -> Result<BfgsResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    const MAX_RESTARTS: usize = 5;
    let record = |iter: usize, value: f64, grad: &[f64], step: f64| IterRecord {
        iter,
        value,
        grad_inf: crate::linalg::norm_inf(grad),
        step,
    };
    let mut history: Vec<IterRecord> = Vec::new();
    let mut x = x0.to_vec();
    let mut budget = opts.max_iters;
    for restart in 0..=MAX_RESTARTS {
        let run = BfgsOptions {
            max_iters: budget,
            ..opts.clone()
        };
        let (v_start, _) = obj(&x)?;
        match bfgs_minimize(&mut obj, &x, &run) {
            Err(Error::LineSearchStall {
                trials,
                best_value,
                best_x,
            }) => {
                log::warn!("line search stalled after {trials} trials at value {best_value:.6e} (restart {restart})");
                if history.is_empty() {
                    let (v0, g0) = obj(x0)?;
                    history.push(record(0, v0, &g0, 0.0));
                }
                let (value, grad) = obj(&best_x)?;
                let step = crate::linalg::norm2(&best_x.iter().zip(&x).map(|(a, b)| a - b).collect::<Vec<_>>());
                if step > 0.0 {
                    history.push(record(history.len(), value, &grad, step));
                }
                let progress = value < v_start - 1e-12 * v_start.abs();
                x = best_x;
                budget = budget.saturating_sub(1);
                if !progress || restart == MAX_RESTARTS || budget == 0 {
                    return Ok(BfgsResult {
                        x,
                        value,
                        grad,
                        history,
                        stop: StopReason::Stall,
                    });
                }
            }
            Err(e) => return Err(e),
            Ok(mut r) => {
                if history.is_empty() {
                    return Ok(r);
                }
                let offset = history.len() - 1;
                history.extend(r.history.drain(..).skip(1).map(|mut h| {
                    h.iter += offset;
                    h
                }));
                r.history = history;
                return Ok(r);
            }
        }
    }
    unreachable!("the restart loop always returns")
}

/// Shared state of one inversion problem.
pub struct Inversion<'a> {
    pub objective: Objective<'a>,
    pub cfg: &'a InversionConfig,
    truth: Option<&'a Truth>,
}

impl<'a> Inversion<'a> {
    pub fn new(
        forward: &'a ForwardProblem,
        data: &'a MeasurementSet,
        rel: &'a LearnedRelation,
        cfg: &'a InversionConfig,
        scales: Scales,
        truth: Option<&'a Truth>,
    ) -> Result<Self> {
        cfg.validate()?;
        let objective = Objective::new(
            forward,
            data,
            rel,
            cfg.k,
            scales,
            cfg.tikhonov,
            cfg.positivity_weight,
            cfg.positivity_floor,
        )?;
        Ok(Self { objective, cfg, truth })
    }

    fn errors(&self, f: &ScalarField, g: &ScalarField) -> Result<(Option<f64>, Option<f64>)> {
        match self.truth {
            Some(t) => Ok((Some(relative_l2_error(f, &t.f)?), Some(relative_l2_error(g, &t.g)?))),
            None => Ok((None, None)),
        }
    }

    /// Stage one from the constant reference level of `f`.
    pub fn stage_one(&self) -> Result<StageRecord> {
        let obj = &self.objective;
        let (k, scales) = (self.cfg.k, obj.scales);
        let rel = obj.rel;
        let mut x0 = vec![0.0; obj.n_coeffs()];
        x0[0] = 1.0;
        let run = || -> Result<StageRecord> {
            let start_value = obj.phi0(&x0)?.value;
            let r = minimize(|x: &[f64]| obj.phi0(x).map(|e| (e.value, e.gradient)), &x0, &self.cfg.bfgs())?;
            let f_hat: Vec<f64> = r.x.iter().map(|v| scales.f * v).collect();
            let f_field = obj.f_field(&r.x)?;
            let (g_hat, g_field) = if rel.is_pointwise() {
                let g = rel.predict_field(&f_field)?;
                (analyze(&g, k)?.into_vec(), g)
            } else {
                let gh = rel.predict(&f_hat)?;
                let g = synthesize(&SpectralCoeffs::from_vec(k, gh.clone())?, &obj.forward.grid());
                (gh, g)
            };
            let (f_error, g_error) = self.errors(&f_field, &g_field)?;
            log::info!(
                "stage 0: value {:.4e} after {} iterations ({:?}); errors {:?} {:?}",
                r.value,
                r.iterations(),
                r.stop,
                f_error,
                g_error
            );
            Ok(StageRecord {
                stage: 0,
                alpha: None,
                f_hat,
                g_hat,
                f_field,
                g_field,
                start_value,
                value: r.value,
                stop: r.stop,
                history: r.history,
                f_error,
                g_error,
            })
        };
        run().map_err(|e| e.context("stage 0"))
    }

    /// One penalized stage warm-started at `prev`.
    pub fn stage(&self, j: usize, alpha: f64, prev: &StageRecord) -> Result<StageRecord> {
        let obj = &self.objective;
        let (k, scales) = (self.cfg.k, obj.scales);
        let n = obj.n_coeffs();
        let grid = obj.forward.grid();
        let run = || -> Result<StageRecord> {
            let mut x: Vec<f64> = prev.f_hat.iter().map(|v| v / scales.f).collect();
            x.extend(prev.g_hat.iter().map(|v| v / scales.g));
            let start_value = obj.phij(&x, alpha)?.value;
            let r = minimize(|x: &[f64]| obj.phij(x, alpha).map(|e| (e.value, e.gradient)), &x, &self.cfg.bfgs())?;
            let (xf, xg) = r.x.split_at(n);
            let f_hat: Vec<f64> = xf.iter().map(|v| scales.f * v).collect();
            let g_hat: Vec<f64> = xg.iter().map(|v| scales.g * v).collect();
            let f_field = synthesize(&SpectralCoeffs::from_vec(k, f_hat.clone())?, &grid);
            let g_field = synthesize(&SpectralCoeffs::from_vec(k, g_hat.clone())?, &grid);
            let (f_error, g_error) = self.errors(&f_field, &g_field)?;
            log::info!(
                "stage {j} (alpha {alpha:e}): value {:.4e} after {} iterations ({:?}); errors {:?} {:?}",
                r.value,
                r.iterations(),
                r.stop,
                f_error,
                g_error
            );
            Ok(StageRecord {
                stage: j,
                alpha: Some(alpha),
                f_hat,
                g_hat,
                f_field,
                g_field,
                start_value,
                value: r.value,
                stop: r.stop,
                history: r.history,
                f_error,
                g_error,
            })
        };
        run().map_err(|e| e.context(format!("stage {j}")))
    }

    /// Stages `1..=alphas.len()` after `first`.
    pub fn refine(&self, first: StageRecord, alphas: &[f64]) -> Result<InversionReport> {
        let mut stages = vec![first];
        for (i, &alpha) in alphas.iter().enumerate() {
            let next = self.stage(i + 1, alpha, stages.last().expect("nonempty"))?;
            stages.push(next);
        }
        Ok(InversionReport {
            config: self.cfg.clone(),
            scales: self.objective.scales,
            data_scale: self.objective.data_scale(),
            relation: self.objective.rel.variant_name().to_string(),
            stages,
        })
    }
}

/// Runs stage one and `cfg.j` penalized stages.
pub fn joint_invert(
    forward: &ForwardProblem,
    data: &MeasurementSet,
    rel: &LearnedRelation,
    cfg: &InversionConfig,
    scales: Scales,
    truth: Option<&Truth>,
) -> Result<InversionReport> {
    let inv = Inversion::new(forward, data, rel, cfg, scales, truth)?;
    let first = inv.stage_one()?;
    inv.refine(first, &cfg.alphas())
}
