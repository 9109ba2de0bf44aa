//! Experiment configuration read from TOML.
//!
//! ```toml
//! experiment = "exp1"      # exp1 | exp2 | exp3
//! relation = "polynomial"  # polynomial | mlp | surrogate
//! seed = 42
//! m = 32                   # default 32, or 48 for exp3
//! k = 3                  # default 3, or 7 for exp3
//! n = 2000
//! refinement = 2          # truth measured on an M*refinement grid (1 for exp3)
//! out = "runs/exp1"
//!
//! [noise]
//! kind = "additive"        # none | additive | multiplicative
//! level = 0.05
//!
//! [poly]         # degree, ridge, standardize, consistency_weight, ...
//! [mlp]          # hidden, latent, learning_rate, batch_size, max_epochs, ...
//! [inversion]    # j, alpha0, tikhonov, tol_grad, tol_step, max_bfgs_iters, ...
//! [diffusion]    # ell
//! [wave]         # dt, t_final, ramp
//! [sweep]        # j_list, alpha0_list
//! [sensitivity]  # epsilons
//! ```
//!
//! The top-level `k` is the band limit of both the training data and the
//! inversion unknowns; it overrides `inversion.k`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{DiffusionSetup, ForwardProblem, WaveSetup};
use crate::invert::InversionConfig;
use crate::learn::{MlpOptions, PolyOptions};
use crate::pde_wave::Envelope;
use crate::rng::{phase_seed, Phase};
use crate::synth::{NoiseKind, NoiseSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Exp1,
    Exp2,
    Exp3,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationChoice {
    Polynomial,
    Mlp,
    Surrogate,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub kind: NoiseKind,
    pub level: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub ell: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self { ell: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WaveConfig {
    pub dt: f64,
    pub t_final: f64,
    /// Width of the source ramp; zero switches the source on at once.
    pub ramp: f64,
}

impl Default for WaveConfig {
    fn default() -> Self {
        Self {
            dt: 0.005,
            t_final: 5.0,
            ramp: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub j_list: Vec<usize>,
    pub alpha0_list: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            j_list: vec![1, 2, 3],
            alpha0_list: vec![0.0, 1e-7, 1e-8],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensitivityConfig {
    pub epsilons: Vec<f64>,
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        Self {
            epsilons: vec![0.0, 1e-3, 1e-2, 1e-1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub relation: RelationChoice,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub m: Option<usize>,
    /// Band limit; 3 by default, or 7 for exp3.
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default = "default_n")]
    pub n: usize,
    /// Measurements of the truth are simulated on a grid this many times
    /// finer and injected onto the inversion grid; 1 inverts on the
    /// generating grid. Default 2, or 1 for exp3.
    #[serde(default)]
    pub refinement: Option<usize>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub poly: PolyOptions,
    #[serde(default)]
    pub mlp: MlpOptions,
    #[serde(default)]
    pub inversion: InversionConfig,
    #[serde(default)]
    pub diffusion: DiffusionConfig,
    #[serde(default)]
    pub wave: WaveConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub sensitivity: SensitivityConfig,
}

fn default_n() -> usize {
    2000
}



impl ExperimentConfig {
    /// Defaults for an experiment with its natural relation choice.
    pub fn new(experiment: Experiment, relation: RelationChoice) -> Self {
        Self {
            experiment,
            relation,
            seed: 0,
            m: None,
            k: None,
            n: default_n(),
            refinement: None,
            out: None,
            noise: NoiseConfig::default(),
            poly: PolyOptions::default(),
            mlp: MlpOptions::default(),
            inversion: InversionConfig::default(),
            diffusion: DiffusionConfig::default(),
            wave: WaveConfig::default(),
            sweep: SweepConfig::default(),
            sensitivity: SensitivityConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::io::read_text(path)?;
        Self::from_toml(&text).map_err(|e| e.context(path.display().to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn m(&self) -> usize {
        self.m.unwrap_or(match self.experiment {
            Experiment::Exp3 => 48,
            _ => 32,
        })
    }

    pub fn k(&self) -> usize {
        self.k.unwrap_or(match self.experiment {
            Experiment::Exp3 => 7,
            _ => 3,
        })
    }

    pub fn refinement(&self) -> usize {
        self.refinement.unwrap_or(if self.is_wave() { 1 } else { 2 })
    }

    pub fn is_wave(&self) -> bool {
        self.experiment == Experiment::Exp3
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match (self.experiment, self.relation) {
            (Experiment::Exp3, RelationChoice::Surrogate) => {}
            (Experiment::Exp3, r) => {
                return bad(format!("exp3 uses the pointwise surrogate relation, not {r:?}"));
            }
            (e, RelationChoice::Surrogate) => {
                return bad(format!("{e:?} needs a learned relation (polynomial or mlp)"));
            }
            _ => {}
        }
        if self.noise.kind == NoiseKind::None && self.noise.level != 0.0 {
            return bad(format!(
                "noise level {} given without a noise kind",
                self.noise.level
            ));
        }
        if self.noise.kind != NoiseKind::None && !(self.noise.level > 0.0 && self.noise.level < 1.0) {
            return bad(format!("noise level must lie in (0, 1), got {}", self.noise.level));
        }
        if self.k() == 0 || self.m() < 4 * self.k() {
            return bad(format!("m = {} is too coarse for band limit k = {}", self.m(), self.k()));
        }
        if self.refinement() == 0 {
            return bad("refinement must be at least 1".into());
        }
        if !self.is_wave() && self.n < 10 {
            return bad(format!("n = {} is too small for a dataset", self.n));
        }
        if !(self.diffusion.ell > 0.0) {
            return bad("diffusion.ell must be positive".into());
        }
        if !(self.wave.dt > 0.0 && self.wave.t_final > 0.0 && self.wave.ramp >= 0.0) {
            return bad("wave.dt and wave.t_final must be positive, wave.ramp nonnegative".into());
        }
        if self.sweep.j_list.is_empty() || self.sweep.alpha0_list.is_empty() {
            return bad("sweep lists must be nonempty".into());
        }
        if self.sweep.j_list.contains(&0) || self.sweep.alpha0_list.iter().any(|a| !(*a >= 0.0)) {
            return bad("sweep needs j >= 1 and alpha0 >= 0".into());
        }
        let eps = &self.sensitivity.epsilons;
        if eps.iter().any(|e| !(*e >= 0.0)) || eps.windows(2).any(|w| w[1] < w[0]) {
            return bad("sensitivity.epsilons must be nonnegative and sorted".into());
        }
        if self.mlp.batch_size == 0 || self.mlp.hidden == 0 || self.mlp.latent == 0 {
            return bad("mlp sizes must be positive".into());
        }
        self.inversion_config().validate()
    }

    pub fn inversion_config(&self) -> InversionConfig {
        InversionConfig {
            k: self.k(),
            ..self.inversion.clone()
        }
    }

    pub fn noise_spec(&self) -> Result<NoiseSpec> {
        NoiseSpec::new(self.noise.kind, self.noise.level, self.phase_seed(Phase::Noise))
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn phase_seed(&self, phase: Phase) -> u64 {
        phase_seed(self.seed, phase)
    }

    pub fn envelope(&self) -> Envelope {
        if self.wave.ramp > 0.0 {
            Envelope::Ramp { width: self.wave.ramp }
        } else {
            Envelope::Step
        }
    }

    pub fn forward_problem(&self) -> Result<ForwardProblem> {
        self.problem_on(self.m())
    }

    /// The problem on the grid the measurement of the truth is simulated on.
    pub fn data_problem(&self) -> Result<ForwardProblem> {
        self.problem_on(self.m() * self.refinement())
    }

    fn problem_on(&self, m: usize) -> Result<ForwardProblem> {
        Ok(if self.is_wave() {
            ForwardProblem::Wave(WaveSetup::two_gaussians(m, self.wave.dt, self.wave.t_final, self.envelope())?)
        } else {
            ForwardProblem::Diffusion(DiffusionSetup::four_sides(m, self.diffusion.ell))
        })
    }

    /// Whether training uses simulated measurements.
    pub fn needs_measurements(&self) -> bool {
        match self.relation {
            RelationChoice::Polynomial => self.poly.consistency_weight > 0.0,
            RelationChoice::Mlp => self.mlp.consistency_weight > 0.0,
            RelationChoice::Surrogate => false,
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("runs"))
    }
}
