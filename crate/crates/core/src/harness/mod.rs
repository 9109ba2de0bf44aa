//! Experiment orchestration: configuration, pipeline phases, sweeps.
//!
//! Phase seeds are `phase_seed(master, phase)` with the fixed phase ids of
//! [`Phase`](crate::rng::Phase), so each phase can be rerun on its own.
//! All tables are written as CSV under the configured output directory,
//! together with a `manifest.json` describing the run.

pub mod config;
pub mod pipeline;
pub mod sweep;

pub use config::{
    DiffusionConfig, Experiment, ExperimentConfig, NoiseConfig, RelationChoice, SensitivityConfig, SweepConfig,
    WaveConfig,
};
pub use pipeline::{
    coefficient_names, evaluate, evaluation_table, generate, invert, read_model, run_pipeline, train, PipelineOutput,
    RunManifest,
};
pub use sweep::{sensitivity_sweep, sweep_hyperparams, Setup, SweepTables};

use crate::error::Result;
use crate::io::{self, Table};

fn write_table(dir: &std::path::Path, name: &str, t: &Table, manifest: &mut RunManifest) -> Result<()> {
    let path = dir.join(name);
    io::write_text(&path, &t.to_csv())?;
    manifest.artifacts.push(path);
    Ok(())
}

/// Writes `sweep_<f>.csv` and `sweep_<g>.csv` (rows J, columns alpha0).
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<(RunManifest, SweepTables)> {
    let dir = cfg.out_dir();
    let mut manifest = RunManifest::new(cfg);
    let out = (|| {
        let setup = manifest.phase("train", |_| Setup::new(cfg))?;
        manifest.phase("sweep", |m| {
            let data = setup.measure(cfg)?;
            let tables = sweep_hyperparams(cfg, &setup, &data, &cfg.sweep.j_list, &cfg.sweep.alpha0_list)?;
            let (f, g) = coefficient_names(cfg.experiment);
            write_table(&dir, &format!("sweep_{f}.csv"), &tables.f_table, m)?;
            write_table(&dir, &format!("sweep_{g}.csv"), &tables.g_table, m)?;
            if !tables.failures.is_empty() {
                let path = dir.join("sweep_failures.log");
                io::write_text(&path, &(tables.failures.join("\n") + "\n"))?;
                m.artifacts.push(path);
            }
            Ok(tables)
        })
    })();
    manifest.write(&dir)?;
    out.map(|t| (manifest, t))
}

/// Writes `sensitivity.csv`.
pub fn run_sensitivity(cfg: &ExperimentConfig) -> Result<(RunManifest, Table)> {
    let dir = cfg.out_dir();
    let mut manifest = RunManifest::new(cfg);
    let out = (|| {
        let setup = manifest.phase("train", |_| Setup::new(cfg))?;
        manifest.phase("sensitivity", |m| {
            let t = sensitivity_sweep(cfg, &setup, &cfg.sensitivity.epsilons)?;
            write_table(&dir, "sensitivity.csv", &t, m)?;
            Ok(t)
        })
    })();
    manifest.write(&dir)?;
    out.map(|t| (manifest, t))
}
