//! Pipeline phases and their artifacts.
//!
//! Every phase derives its randomness from the master seed through
//! [`phase_seed`](crate::rng::phase_seed), so a phase recomputes its inputs
//! bit-identically when run on its own.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::basis::{Grid, ScalarField};
use crate::error::{Error, Result};
use crate::forward::{ForwardProblem, MeasurementSet};
use crate::harness::config::{Experiment, ExperimentConfig, RelationChoice};
use crate::invert::{joint_invert, InversionReport, Scales, Truth};
use crate::io::{self, fmt_f64, Table};
use crate::learn::{fit_polynomial, mean_relative_error, train_mlp, LearnedRelation, LossRecord, PolyOptions};
use crate::rng::{stream, Phase};
use crate::synth::{add_noise, build_training_dataset, gen_pair_exp3, PairGenerator, TrainingDataset};

/// Names of `(f, g)` for the experiment.
pub fn coefficient_names(e: Experiment) -> (&'static str, &'static str) {
    match e {
        Experiment::Exp1 | Experiment::Exp2 => ("gamma", "sigma"),
        Experiment::Exp3 => ("rho", "kappa"),
    }
}

/// Factors the figures of the original study apply before display.
pub fn display_factors(e: Experiment) -> (f64, f64) {
    match e {
        Experiment::Exp1 | Experiment::Exp2 => (1e3, 50.0),
        Experiment::Exp3 => (1.0, 1.0),
    }
}

pub fn pair_generator(cfg: &ExperimentConfig) -> Option<PairGenerator> {
    let seed = cfg.phase_seed(Phase::Relation);
    match cfg.experiment {
        Experiment::Exp1 => Some(PairGenerator::fourier(cfg.k(), seed)),
        Experiment::Exp2 => Some(PairGenerator::gaussian(cfg.k(), seed)),
        Experiment::Exp3 => None,
    }
}

/// Historical pairs; `None` for the experiment with a known surrogate.
pub fn make_dataset(cfg: &ExperimentConfig, forward: &ForwardProblem) -> Result<Option<TrainingDataset>> {
    let Some(gen) = pair_generator(cfg) else {
        return Ok(None);
    };
    let fw = cfg.needs_measurements().then_some(forward);
    build_training_dataset(&gen, &forward.grid(), cfg.n, fw, cfg.phase_seed(Phase::Dataset))
        .map(Some)
        .map_err(|e| e.context("generating the training set"))
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub relation: LearnedRelation,
    pub curves: Option<Vec<LossRecord>>,
    pub train_error: Option<f64>,
    pub test_error: Option<f64>,
}

pub fn train_relation(cfg: &ExperimentConfig, ds: Option<&TrainingDataset>, forward: &ForwardProblem) -> Result<Trained> {
    let seed = cfg.phase_seed(Phase::Train);
    let (relation, curves) = match (cfg.relation, ds) {
        (RelationChoice::Surrogate, _) => (gen_pair_exp3(&forward.grid(), &mut stream(0, 0)).surrogate, None),
        (RelationChoice::Polynomial, Some(ds)) => {
            let opts = PolyOptions {
                seed,
                ..cfg.poly.clone()
            };
            (LearnedRelation::Polynomial(fit_polynomial(ds, &opts, Some(forward))?), None)
        }
        (RelationChoice::Mlp, Some(ds)) => {
            let mut opts = cfg.mlp.clone();
            opts.seed = seed;
            let (m, curves) = train_mlp(ds, &opts, Some(forward))?;
            (LearnedRelation::Mlp(m), Some(curves))
        }
        (_, None) => return Err(Error::Config("a learned relation needs a training set".into())),
    };
    let (train_error, test_error) = match ds {
        Some(ds) if !relation.is_pointwise() => (
            Some(mean_relative_error(&relation, &ds.inputs, &ds.outputs, &ds.train)?),
            Some(mean_relative_error(&relation, &ds.inputs, &ds.outputs, &ds.test)?),
        ),
        _ => (None, None),
    };
    Ok(Trained {
        relation,
        curves,
        train_error,
        test_error,
    })
}

fn truth_on(cfg: &ExperimentConfig, grid: &Grid) -> Result<Truth> {
    let seed = cfg.phase_seed(Phase::Truth);
    match pair_generator(cfg) {
        Some(gen) => {
            let p = gen.sample(grid, seed, 0)?;
            Ok(Truth {
                f: p.f_field,
                g: p.g_field,
            })
        }
        None => {
            let t = gen_pair_exp3(grid, &mut stream(seed, 0));
            Ok(Truth { f: t.rho, g: t.kappa })
        }
    }
}

/// The exact pair behind the fresh measurement, on the inversion grid.
///
/// With `refinement() > 1` the pair is drawn on the data grid and injected,
/// so random per-node features agree with the ones that generated the data.
pub fn make_truth(cfg: &ExperimentConfig, forward: &ForwardProblem) -> Result<Truth> {
    let grid = forward.grid();
    if cfg.refinement() == 1 {
        return truth_on(cfg, &grid);
    }
    let fine = truth_on(cfg, &cfg.data_problem()?.grid())?;
    Ok(Truth {
        f: fine.f.restrict(&grid)?,
        g: fine.g.restrict(&grid)?,
    })
}

/// Noise-free measurement of the truth as seen on the inversion grid.
pub fn clean_measurement(cfg: &ExperimentConfig, forward: &ForwardProblem, truth: &Truth) -> Result<MeasurementSet> {
    if cfg.refinement() == 1 {
        return forward.simulate(&truth.f, &truth.g);
    }
    let fine_problem = cfg.data_problem()?;
    let fine = truth_on(cfg, &fine_problem.grid())?;
    fine_problem.simulate(&fine.f, &fine.g)?.restrict(&forward.grid())
}

/// Simulated measurement of the truth, with the configured noise.
pub fn measure(cfg: &ExperimentConfig, forward: &ForwardProblem, truth: &Truth) -> Result<MeasurementSet> {
    add_noise(&clean_measurement(cfg, forward, truth)?, &cfg.noise_spec()?)
}

/// Reference levels: dataset means, or the surrogate at unit density.
pub fn reference_scales(ds: Option<&TrainingDataset>, rel: &LearnedRelation) -> Result<Scales> {
    match (ds, rel) {
        (Some(ds), _) => {
            let (f, g) = ds.mean_levels();
            Ok(Scales { f, g })
        }
        (None, LearnedRelation::Pointwise(c)) => Ok(Scales { f: 1.0, g: c.value(1.0) }),
        (None, _) => Err(Error::InvalidArgument("no reference levels without a training set".into())),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelHeader {
    pub variant: String,
    pub d_in: usize,
    pub d_out: usize,
    pub n_params: usize,
    pub degree: Option<usize>,
    pub ordering: String,
    pub layer_order: String,
    pub bounds: Option<(f64, f64)>,
    pub seed: u64,
    pub train_error: Option<f64>,
    pub test_error: Option<f64>,
    /// The model with all parameters zeroed; the blob fills them in.
    pub skeleton: LearnedRelation,
}

pub fn write_model(dir: &Path, trained: &Trained, seed: u64) -> Result<Vec<PathBuf>> {
    let rel = &trained.relation;
    let params = rel.params();
    let (d_in, d_out, degree, bounds) = match rel {
        LearnedRelation::Polynomial(p) => (p.d, p.d_out, Some(p.degree), p.bounds),
        LearnedRelation::Mlp(m) => (m.d_in(), m.d_out(), None, None),
        LearnedRelation::Pointwise(_) => (1, 1, Some(3), None),
    };
    let header = ModelHeader {
        variant: rel.variant_name().into(),
        d_in,
        d_out,
        n_params: params.len(),
        degree,
        ordering: "graded_lex".into(),
        layer_order: "encoder,decoder,predictor; per layer row-major W then b".into(),
        bounds,
        seed,
        train_error: trained.train_error,
        test_error: trained.test_error,
        skeleton: rel.with_params(&vec![0.0; params.len()])?,
    };
    let json = dir.join("model.json");
    let bin = dir.join("model.bin");
    io::write_json(&json, &header)?;
    let bytes: Vec<u8> = params.iter().flat_map(|v| v.to_le_bytes()).collect();
    io::write_bytes(&bin, &bytes)?;
    Ok(vec![json, bin])
}

pub fn read_model(dir: &Path) -> Result<LearnedRelation> {
    let header: ModelHeader = serde_json::from_str(&io::read_text(&dir.join("model.json"))?)?;
    let bytes = std::fs::read(dir.join("model.bin"))?;
    if bytes.len() != 8 * header.n_params {
        return Err(Error::Parse(format!(
            "model.bin holds {} bytes, expected {}",
            bytes.len(),
            8 * header.n_params
        )));
    }
    let params: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    header.skeleton.with_params(&params)
}

/// `index,split,f_0..,g_0..` with one row per pair.
pub fn dataset_table(ds: &TrainingDataset) -> Table {
    let d = ds.inputs.first().map_or(0, Vec::len);
    let d_out = ds.outputs.first().map_or(0, Vec::len);
    let mut header = vec!["index".to_string(), "split".to_string()];
    header.extend((0..d).map(|i| format!("f_{i}")));
    header.extend((0..d_out).map(|i| format!("g_{i}")));
    let mut t = Table { header, rows: Vec::new() };
    let mut split = vec!["test"; ds.len()];
    for &i in &ds.train {
        split[i] = "train";
    }
    for i in 0..ds.len() {
        let mut row = vec![i.to_string(), split[i].to_string()];
        row.extend(ds.inputs[i].iter().chain(&ds.outputs[i]).map(|v| fmt_f64(*v)));
        t.push(row);
    }
    t
}

pub fn curves_table(curves: &[LossRecord]) -> Result<Table> {
    Table::from_csv(&LossRecord::to_csv(curves))
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// Per-stage errors: `stage,alpha,<f>_error,<g>_error`.
pub fn errors_table(report: &InversionReport, names: (&str, &str)) -> Table {
    let (fe, ge) = (format!("{}_error", names.0), format!("{}_error", names.1));
    let mut t = Table::new(&["stage", "alpha", &fe, &ge]);
    for s in &report.stages {
        t.push(vec![s.stage.to_string(), opt(s.alpha), opt(s.f_error), opt(s.g_error)]);
    }
    t
}

/// Step-one / step-two errors with one column pair per labelled report.
pub fn evaluation_table(runs: &[(String, &InversionReport, &Truth)], names: (&str, &str)) -> Result<Table> {
    let mut header = vec!["step".to_string()];
    for (label, _, _) in runs {
        header.push(format!("{}_{label}", names.0));
        header.push(format!("{}_{label}", names.1));
    }
    let mut t = Table { header, rows: Vec::new() };
    for (step, pick) in [("step_one", 0usize), ("step_two", 1)] {
        let mut row = vec![step.to_string()];
        for (_, report, truth) in runs {
            let s = if pick == 0 { report.first() } else { report.last() };
            row.push(fmt_f64(crate::invert::relative_l2_error(&s.f_field, &truth.f)?));
            row.push(fmt_f64(crate::invert::relative_l2_error(&s.g_field, &truth.g)?));
        }
        t.push(row);
    }
    Ok(t)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: ExperimentConfig,
    pub seeds: BTreeMap<String, u64>,
    pub artifacts: Vec<PathBuf>,
    pub phase_seconds: BTreeMap<String, f64>,
    pub failed_phase: Option<String>,
    pub error: Option<String>,
    pub display_factors: (f64, f64),
}

impl RunManifest {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        let seeds = [
            ("master", cfg.seed),
            ("relation", cfg.phase_seed(Phase::Relation)),
            ("dataset", cfg.phase_seed(Phase::Dataset)),
            ("train", cfg.phase_seed(Phase::Train)),
            ("truth", cfg.phase_seed(Phase::Truth)),
            ("noise", cfg.phase_seed(Phase::Noise)),
            ("sensitivity", cfg.phase_seed(Phase::Sensitivity)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: cfg.clone(),
            seeds,
            artifacts: Vec::new(),
            phase_seconds: BTreeMap::new(),
            failed_phase: None,
            error: None,
            display_factors: display_factors(cfg.experiment),
        }
    }

    /// Times `f` as phase `name`; a failure is recorded before it propagates.
    pub fn phase<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f(self);
        self.phase_seconds.insert(name.to_string(), start.elapsed().as_secs_f64());
        if let Err(e) = &out {
            self.failed_phase = Some(name.to_string());
            self.error = Some(e.to_string());
        }
        out.map_err(|e| e.context(format!("phase {name}")))
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.json");
        io::write_json(&path, self)?;
        Ok(path)
    }
}

fn write_table(dir: &Path, name: &str, t: &Table, manifest: &mut RunManifest) -> Result<()> {
    let path = dir.join(name);
    io::write_text(&path, &t.to_csv())?;
    manifest.artifacts.push(path);
    Ok(())
}

fn write_field(dir: &Path, name: &str, f: &ScalarField, manifest: &mut RunManifest) -> Result<()> {
    let path = dir.join(name);
    io::write_text(&path, &io::field_to_csv(f))?;
    manifest.artifacts.push(path);
    Ok(())
}

fn write_measurement(dir: &Path, data: &MeasurementSet, manifest: &mut RunManifest) -> Result<()> {
    match data {
        MeasurementSet::Internal(d) => {
            for (h, f) in d.fields.iter().enumerate() {
                write_field(dir, &format!("measurement_{h}.csv"), f, manifest)?;
            }
        }
        MeasurementSet::Boundary(t) => {
            let path = dir.join("trace.csv");
            io::write_text(&path, &io::trace_to_csv(t))?;
            manifest.artifacts.push(path);
        }
    }
    Ok(())
}

/// Everything a full run produces in memory.
#[derive(Debug)]
pub struct PipelineOutput {
    pub manifest: RunManifest,
    pub trained: Trained,
    pub truth: Truth,
    pub report: InversionReport,
}

fn finish<T>(manifest: &RunManifest, dir: &Path, out: Result<T>) -> Result<T> {
    // The manifest is written whether or not the phases succeeded.
    manifest.write(dir)?;
    out
}

/// Inputs of a run: the historical pairs, the truth and its measurement.
struct Generated {
    ds: Option<TrainingDataset>,
    truth: Truth,
    data: MeasurementSet,
}

fn do_generate(cfg: &ExperimentConfig, forward: &ForwardProblem, dir: &Path, m: &mut RunManifest) -> Result<Generated> {
    let ds = make_dataset(cfg, forward)?;
    if let Some(ds) = &ds {
        write_table(dir, "dataset.csv", &dataset_table(ds), m)?;
    }
    let truth = make_truth(cfg, forward)?;
    let (fname, gname) = coefficient_names(cfg.experiment);
    write_field(dir, &format!("truth_{fname}.csv"), &truth.f, m)?;
    write_field(dir, &format!("truth_{gname}.csv"), &truth.g, m)?;
    let data = measure(cfg, forward, &truth)?;
    write_measurement(dir, &data, m)?;
    Ok(Generated { ds, truth, data })
}

/// Writes the training set, the truth and the measurement.
pub fn generate(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let dir = cfg.out_dir();
    let mut manifest = RunManifest::new(cfg);
    let out = manifest.phase("generate", |m| {
        let forward = cfg.forward_problem()?;
        do_generate(cfg, &forward, &dir, m).map(|_| ())
    });
    finish(&manifest, &dir, out)?;
    Ok(manifest)
}

fn do_train(
    cfg: &ExperimentConfig,
    forward: &ForwardProblem,
    ds: Option<&TrainingDataset>,
    dir: &Path,
    m: &mut RunManifest,
) -> Result<Trained> {
    let trained = train_relation(cfg, ds, forward)?;
    let files = write_model(dir, &trained, cfg.phase_seed(Phase::Train))?;
    m.artifacts.extend(files);
    if let Some(c) = &trained.curves {
        write_table(dir, "loss_curve.csv", &curves_table(c)?, m)?;
    }
    if let (Some(tr), Some(te)) = (trained.train_error, trained.test_error) {
        let mut t = Table::new(&["train_error", "test_error"]);
        t.push(vec![fmt_f64(tr), fmt_f64(te)]);
        write_table(dir, "fit.csv", &t, m)?;
    }
    Ok(trained)
}

/// Trains (or loads the surrogate) and writes the model files.
pub fn train(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let dir = cfg.out_dir();
    let mut manifest = RunManifest::new(cfg);
    let out = manifest.phase("train", |m| {
        let forward = cfg.forward_problem()?;
        let ds = make_dataset(cfg, &forward)?;
        do_train(cfg, &forward, ds.as_ref(), &dir, m).map(|_| ())
    });
    finish(&manifest, &dir, out)?;
    Ok(manifest)
}

#[allow(clippy::too_many_arguments)]
fn do_invert(
    cfg: &ExperimentConfig,
    forward: &ForwardProblem,
    rel: &LearnedRelation,
    scales: Scales,
    truth: &Truth,
    data: &MeasurementSet,
    dir: &Path,
    m: &mut RunManifest,
) -> Result<InversionReport> {
    let report = joint_invert(forward, data, rel, &cfg.inversion_config(), scales, Some(truth))?;
    let names = coefficient_names(cfg.experiment);
    let path = dir.join("report.json");
    io::write_json(&path, &report)?;
    m.artifacts.push(path);
    for s in &report.stages {
        write_field(dir, &format!("stage{}_{}.csv", s.stage, names.0), &s.f_field, m)?;
        write_field(dir, &format!("stage{}_{}.csv", s.stage, names.1), &s.g_field, m)?;
    }
    write_table(dir, "errors.csv", &errors_table(&report, names), m)?;
    Ok(report)
}

/// Inverts a fresh measurement with the model saved by [`train`].
pub fn invert(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let dir = cfg.out_dir();
    let mut manifest = RunManifest::new(cfg);
    let out = manifest.phase("invert", |m| {
        let forward = cfg.forward_problem()?;
        let rel = read_model(&dir).map_err(|e| e.context("loading the trained model (run `train` first)"))?;
        // Reference levels need only the coefficient pairs, not measurements.
        let ds = match pair_generator(cfg) {
            Some(gen) => Some(build_training_dataset(&gen, &forward.grid(), cfg.n, None, cfg.phase_seed(Phase::Dataset))?),
            None => None,
        };
        let scales = reference_scales(ds.as_ref(), &rel)?;
        let truth = make_truth(cfg, &forward)?;
        let data = measure(cfg, &forward, &truth)?;
        do_invert(cfg, &forward, &rel, scales, &truth, &data, &dir, m).map(|_| ())
    });
    finish(&manifest, &dir, out)?;
    Ok(manifest)
}

/// Step-one / step-two table from the report in the output directory.
pub fn evaluate(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let dir = cfg.out_dir();
    let mut manifest = RunManifest::new(cfg);
    let out = manifest.phase("evaluate", |m| {
        let report: InversionReport = serde_json::from_str(&io::read_text(&dir.join("report.json"))?)?;
        let forward = cfg.forward_problem()?;
        let truth = make_truth(cfg, &forward)?;
        let names = coefficient_names(cfg.experiment);
        let label = noise_label(cfg);
        let t = evaluation_table(&[(label, &report, &truth)], names)?;
        write_table(&dir, "table.csv", &t, m)
    });
    finish(&manifest, &dir, out)?;
    Ok(manifest)
}

pub fn noise_label(cfg: &ExperimentConfig) -> String {
    match cfg.noise.kind {
        crate::synth::NoiseKind::None => "noise_free".into(),
        k => format!("{}_{}", serde_json::to_value(k).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(), fmt_f64(cfg.noise.level)),
    }
}

/// generate, train, invert and evaluate in one process.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    let dir = cfg.out_dir();
    let mut manifest = RunManifest::new(cfg);
    let run = |m: &mut RunManifest| -> Result<(Trained, Truth, InversionReport)> {
        let forward = cfg.forward_problem()?;
        let Generated { ds, truth, data } = m.phase("generate", |m| do_generate(cfg, &forward, &dir, m))?;
        let trained = m.phase("train", |m| do_train(cfg, &forward, ds.as_ref(), &dir, m))?;
        let scales = reference_scales(ds.as_ref(), &trained.relation)?;
        let report = m.phase("invert", |m| {
            do_invert(cfg, &forward, &trained.relation, scales, &truth, &data, &dir, m)
        })?;
        m.phase("evaluate", |m| {
            let names = coefficient_names(cfg.experiment);
            let t = evaluation_table(&[(noise_label(cfg), &report, &truth)], names)?;
            write_table(&dir, "table.csv", &t, m)
        })?;
        Ok((trained, truth, report))
    };
    let out = run(&mut manifest);
    let (trained, truth, report) = finish(&manifest, &dir, out)?;
    Ok(PipelineOutput {
        manifest,
        trained,
        truth,
        report,
    })
}
