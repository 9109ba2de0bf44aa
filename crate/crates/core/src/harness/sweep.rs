//! Hyperparameter grid and relation-perturbation sweeps.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::basis::{analyze, synthesize, ScalarField, SpectralCoeffs};
use crate::error::{Error, Result};
use crate::forward::{ForwardProblem, MeasurementSet};
use crate::harness::config::ExperimentConfig;
use crate::harness::pipeline::{make_dataset, make_truth, reference_scales, train_relation, Trained};
use crate::invert::{relative_l2_error, Inversion, InversionConfig, Scales, StageRecord, Truth};
use crate::io::{fmt_f64, Table};
use crate::learn::LearnedRelation;
use crate::rng::{stream, Phase};

/// Trained relation, truth and measurement shared by every sweep cell.
pub struct Setup {
    pub forward: ForwardProblem,
    pub trained: Trained,
    pub scales: Scales,
    pub truth: Truth,
}

impl Setup {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let forward = cfg.forward_problem()?;
        let ds = make_dataset(cfg, &forward)?;
        let trained = train_relation(cfg, ds.as_ref(), &forward)?;
        let scales = reference_scales(ds.as_ref(), &trained.relation)?;
        let truth = make_truth(cfg, &forward)?;
        Ok(Self {
            forward,
            trained,
            scales,
            truth,
        })
    }

    pub fn measure(&self, cfg: &ExperimentConfig) -> Result<MeasurementSet> {
        crate::harness::pipeline::measure(cfg, &self.forward, &self.truth)
    }
}

/// Error grids in the layout `J, <alpha0 columns>`, one per coefficient.
#[derive(Clone, Debug)]
pub struct SweepTables {
    pub f_table: Table,
    pub g_table: Table,
    /// One message per failed cell; the cell holds NaN.
    pub failures: Vec<String>,
}

impl SweepTables {
    /// Errors as `[j][alpha0]` grids.
    pub fn grids(&self) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let grid = |t: &Table| {
            t.rows
                .iter()
                .map(|r| r[1..].iter().map(|v| v.parse().unwrap_or(f64::NAN)).collect())
                .collect()
        };
        (grid(&self.f_table), grid(&self.g_table))
    }
}

/// Runs every `(J, alpha0)` cell against one trained relation and one
/// measurement. Stage one is shared; the stages for each `alpha0` are run
/// once up to the largest `J`, since `alpha_j` does not depend on `J`.
pub fn sweep_hyperparams(
    cfg: &ExperimentConfig,
    setup: &Setup,
    data: &MeasurementSet,
    j_list: &[usize],
    alpha0_list: &[f64],
) -> Result<SweepTables> {
    if j_list.is_empty() || alpha0_list.is_empty() {
        return Err(Error::Config("sweep lists must be nonempty".into()));
    }
    let j_max = *j_list.iter().max().expect("nonempty");
    let base = cfg.inversion_config();
    let inv = Inversion::new(&setup.forward, data, &setup.trained.relation, &base, setup.scales, Some(&setup.truth))?;
    let first = inv.stage_one()?;

    // columns[a][j - 1] = errors after stage j for alpha0_list[a]
    let columns: Vec<(Vec<(f64, f64)>, Option<String>)> = alpha0_list
        .par_iter()
        .map(|&alpha0| {
            let cell_cfg = InversionConfig {
                j: j_max,
                alpha0,
                ..base.clone()
            };
            let mut errs = Vec::with_capacity(j_max);
            let mut prev: StageRecord = first.clone();
            for (i, alpha) in cell_cfg.alphas().into_iter().enumerate() {
                match inv.stage(i + 1, alpha, &prev) {
                    Ok(s) => {
                        errs.push((s.f_error.unwrap_or(f64::NAN), s.g_error.unwrap_or(f64::NAN)));
                        prev = s;
                    }
                    Err(e) => {
                        let msg = format!("alpha0 {}: {e}", fmt_f64(alpha0));
                        log::warn!("sweep cell failed: {msg}");
                        errs.resize(j_max, (f64::NAN, f64::NAN));
                        return (errs, Some(msg));
                    }
                }
            }
            (errs, None)
        })
        .collect();

    let mut header: Vec<String> = vec!["J".into()];
    header.extend(alpha0_list.iter().map(|a| fmt_f64(*a)));
    let mut f_table = Table {
        header: header.clone(),
        rows: Vec::new(),
    };
    let mut g_table = Table { header, rows: Vec::new() };
    for &j in j_list {
        let cell = |pick: fn(&(f64, f64)) -> f64| -> Vec<String> {
            std::iter::once(j.to_string())
                .chain(columns.iter().map(|(errs, _)| fmt_f64(pick(&errs[j - 1]))))
                .collect()
        };
        f_table.push(cell(|e| e.0));
        g_table.push(cell(|e| e.1));
    }
    let failures = columns.into_iter().filter_map(|(_, f)| f).collect();
    Ok(SweepTables {
        f_table,
        g_table,
        failures,
    })
}

pub const SENSITIVITY_HEADER: [&str; 3] = ["epsilon", "relation_discrepancy", "reconstruction_discrepancy"];

/// Unit-norm random direction in parameter space.
pub fn perturbation_direction(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = stream(seed, 0);
    let d: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = crate::linalg::norm2(&d);
    d.into_iter().map(|v| v / norm).collect()
}

/// Relation output at the true `f`, as a field.
fn relation_at(rel: &LearnedRelation, truth: &ScalarField, k: usize) -> Result<ScalarField> {
    if rel.is_pointwise() {
        rel.predict_field(truth)
    } else {
        let fstar = analyze(truth, k)?.into_vec();
        let g = rel.predict(&fstar)?;
        Ok(synthesize(&SpectralCoeffs::from_vec(k, g)?, truth.grid()))
    }
}

/// Perturbs the relation parameters by `eps ||theta||` along one fixed random
/// direction and repeats the constrained stage on noise-free data.
///
/// The relation discrepancy is the L2 norm of `N_eps(f*) - N_0(f*)` at the
/// true `f*`; the reconstruction discrepancy is the relative L2 change of the
/// reconstructed `g`.
pub fn sensitivity_sweep(cfg: &ExperimentConfig, setup: &Setup, epsilons: &[f64]) -> Result<Table> {
    if epsilons.iter().any(|e| !(*e >= 0.0)) || epsilons.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Config("epsilons must be nonnegative and sorted".into()));
    }
    let clean = crate::harness::pipeline::clean_measurement(cfg, &setup.forward, &setup.truth)?;
    let base = cfg.inversion_config();
    let rel0 = &setup.trained.relation;
    let dir = perturbation_direction(rel0.params().len(), cfg.phase_seed(Phase::Sensitivity));
    let k = base.k;
    let reference = relation_at(rel0, &setup.truth.f, k)?;

    let run = |rel: &LearnedRelation| -> Result<StageRecord> {
        Inversion::new(&setup.forward, &clean, rel, &base, setup.scales, None)?.stage_one()
    };
    let g0 = run(rel0)?.g_field;
    let rows: Vec<Vec<String>> = epsilons
        .par_iter()
        .map(|&eps| -> Result<Vec<String>> {
            let wrap = |e: Error| e.context(format!("epsilon {}", fmt_f64(eps)));
            let (rel_d, rec_d) = if eps == 0.0 {
                (0.0, 0.0)
            } else {
                let rel = rel0.perturbed(eps, &dir).map_err(wrap)?;
                let moved = relation_at(&rel, &setup.truth.f, k).map_err(wrap)?;
                let diff = ScalarField::new(
                    *reference.grid(),
                    moved.values().iter().zip(reference.values()).map(|(a, b)| a - b).collect(),
                )?;
                let g = run(&rel).map_err(wrap)?.g_field;
                (diff.l2_norm(), relative_l2_error(&g, &g0).map_err(wrap)?)
            };
            Ok(vec![fmt_f64(eps), fmt_f64(rel_d), fmt_f64(rec_d)])
        })
        .collect::<Result<_>>()?;
    let mut t = Table::new(&SENSITIVITY_HEADER);
    rows.into_iter().for_each(|r| t.push(r));
    Ok(t)
}
