//! Ground-truth coefficient pairs, training datasets and measurement noise.
//!
//! Three generators:
//!
//! * cosine-expansion pairs whose absorption coefficients are a fixed
//!   nonlinear function of the diffusion coefficients,
//! * Gaussian-bump pairs whose absorption bump parameters depend on the
//!   diffusion bump parameters (with a center that jumps between halves of
//!   the square),
//! * the density/bulk-modulus pair of the wave problem.
//!
//! Every draw comes from a ChaCha substream keyed by `(seed, sample index)`.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{analyze, synthesize, Grid, ModeIndex, ScalarField, SpectralCoeffs};
use crate::error::{Error, Result};
use crate::forward::{ForwardProblem, MeasurementSet};
use crate::learn::{LearnedRelation, PointwiseCubic};
use crate::rng::{stream, Rng};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    #[default]
    None,
    Additive,
    Multiplicative,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub level: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn new(kind: NoiseKind, level: f64, seed: u64) -> Result<Self> {
        let spec = Self { kind, level, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.level >= 0.0) || self.level >= 1.0 {
            return Err(Error::InvalidArgument(format!(
                "noise level must lie in [0, 1), got {}",
                self.level
            )));
        }
        Ok(())
    }
}

fn rms(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len().max(1) as f64).sqrt()
}

/// Corrupts one measurement array in place with draws from `rng`.
pub fn corrupt(values: &mut [f64], kind: NoiseKind, level: f64, rng: &mut Rng) {
    match kind {
        NoiseKind::None => {}
        NoiseKind::Additive => {
            let scale = level * rms(values);
            for v in values.iter_mut() {
                let xi: f64 = StandardNormal.sample(rng);
                *v += scale * xi;
            }
        }
        NoiseKind::Multiplicative => {
            for v in values.iter_mut() {
                let xi: f64 = StandardNormal.sample(rng);
                *v *= 1.0 + level * xi;
            }
        }
    }
}

/// Adds noise to every measurement array; array `h` uses substream `h` of the seed.
pub fn add_noise(data: &MeasurementSet, spec: &NoiseSpec) -> Result<MeasurementSet> {
    spec.validate()?;
    let mut out = data.clone();
    match &mut out {
        MeasurementSet::Internal(d) => {
            for (h, f) in d.fields.iter_mut().enumerate() {
                let mut rng = stream(spec.seed, h as u64);
                corrupt(f.values_mut(), spec.kind, spec.level, &mut rng);
            }
        }
        MeasurementSet::Boundary(t) => {
            let mut flat = t.flat();
            corrupt(&mut flat, spec.kind, spec.level, &mut stream(spec.seed, 0));
            *t = t.with_flat(flat);
        }
    }
    out.set_noise(spec.clone());
    Ok(out)
}

/// Fixed relation array of the cosine-expansion generator, `a[k][k']` in `[0, 0.1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationSpecExpI {
    pub k: usize,
    /// Row-major `(K+1)^2 x (K+1)^2`, rows indexed by the target mode.
    pub a: Vec<f64>,
}

impl RelationSpecExpI {
    pub fn sample(k: usize, seed: u64) -> Self {
        let n = (k + 1) * (k + 1);
        let mut rng = stream(seed, 0);
        Self {
            k,
            a: (0..n * n).map(|_| rng.random_range(0.0..0.1)).collect(),
        }
    }

    fn modes(&self) -> usize {
        (self.k + 1) * (self.k + 1)
    }

    pub fn entry(&self, k: ModeIndex, kp: ModeIndex) -> f64 {
        let s = self.k + 1;
        self.a[(k.kx * s + k.kz) * self.modes() + kp.kx * s + kp.kz]
    }
}

/// Affine maps taking raw expansions into the physical coefficient bands.
///
/// The bounds are worst-case magnitudes of the raw synthesized fields, so the
/// bands `center +- half_width` hold for every sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exp1Rescale {
    pub gamma_center: f64,
    pub gamma_half_width: f64,
    pub gamma_bound: f64,
    pub sigma_center: f64,
    pub sigma_half_width: f64,
    pub sigma_bound: f64,
}

impl Exp1Rescale {
    pub fn for_spec(spec: &RelationSpecExpI) -> Self {
        let n = spec.modes();
        // |sum_k gamma_k phi_k| <= 0.5 (K+1)^2 for gamma_k in [-0.5, 0.5].
        let gamma_bound = 0.5 * n as f64;
        // The constant mode of sigma is always zero (sin(pi) = 0); the others are
        // bounded by their row sums of `a`.
        let sigma_bound: f64 = (1..n).map(|r| spec.a[r * n..(r + 1) * n].iter().sum::<f64>()).sum();
        Self {
            gamma_center: 1.0e-3,
            gamma_half_width: 0.5e-3,
            gamma_bound,
            sigma_center: 0.035,
            sigma_half_width: 0.025,
            sigma_bound: sigma_bound.max(f64::MIN_POSITIVE),
        }
    }

    pub fn gamma(&self, raw: &[f64], k: usize) -> SpectralCoeffs {
        let c = raw.iter().map(|r| self.gamma_half_width * r / self.gamma_bound).collect();
        SpectralCoeffs::new(k, self.gamma_center, c).expect("finite coefficients")
    }

    pub fn sigma(&self, raw: &[f64], k: usize) -> SpectralCoeffs {
        let c = raw.iter().map(|r| self.sigma_half_width * r / self.sigma_bound).collect();
        SpectralCoeffs::new(k, self.sigma_center, c).expect("finite coefficients")
    }
}

/// `sigma_k = sum_k' a[k][k'] sin(pi (2 + gamma_k')^(kx+kz))` on raw coefficients.
pub fn exp1_raw_sigma(spec: &RelationSpecExpI, raw_gamma: &[f64]) -> Vec<f64> {
    let s = spec.k + 1;
    let n = spec.modes();
    (0..n)
        .map(|r| {
            let p = (r / s + r % s) as i32;
            raw_gamma
                .iter()
                .enumerate()
                .map(|(c, g)| spec.a[r * n + c] * (PI * (2.0 + g).powi(p)).sin())
                .sum()
        })
        .collect()
}

/// Raw `(gamma, sigma)` coefficient vectors before rescaling.
pub fn gen_pair_exp1_raw(spec: &RelationSpecExpI, rng: &mut Rng) -> (Vec<f64>, Vec<f64>) {
    let gamma: Vec<f64> = (0..spec.modes()).map(|_| rng.random_range(-0.5..0.5)).collect();
    let sigma = exp1_raw_sigma(spec, &gamma);
    (gamma, sigma)
}

pub fn gen_pair_exp1(spec: &RelationSpecExpI, rng: &mut Rng) -> (SpectralCoeffs, SpectralCoeffs) {
    let (g, s) = gen_pair_exp1_raw(spec, rng);
    let r = Exp1Rescale::for_spec(spec);
    (r.gamma(&g, spec.k), r.sigma(&s, spec.k))
}

/// Relation array of the Gaussian-bump generator, `a[i][j]` in `[0, 0.1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationSpecExpII {
    pub a: [[f64; 5]; 5],
}

impl RelationSpecExpII {
    pub fn sample(seed: u64) -> Self {
        let mut rng = stream(seed, 1);
        let mut a = [[0.0; 5]; 5];
        for row in a.iter_mut() {
            for v in row.iter_mut() {
                *v = rng.random_range(0.0..0.1);
            }
        }
        Self { a }
    }
}

/// `c` from `b`. The half-square offsets of `c4`, `c5` are chosen by where the
/// diffusion bump sits (`b4`, `b5`).
pub fn exp2_relation(spec: &RelationSpecExpII, b: &[f64; 5]) -> [f64; 5] {
    let s = |i: usize, freq: f64| -> f64 {
        spec.a[i]
            .iter()
            .zip(b)
            .map(|(a, bj)| a * (freq * PI * bj).cos())
            .sum()
    };
    let half = |v: f64| if v <= 0.5 { 0.75 } else { 0.25 };
    [
        s(0, 10.0) + 8.0,
        5.0 * s(1, 20.0) + 2.5,
        0.1 * s(2, 30.0) + 0.2,
        0.5 * s(3, 40.0) + half(b[3]),
        0.5 * s(4, 50.0) + half(b[4]),
    ]
}

/// `p1 + p2 exp(-((x-p4)^2 + (z-p5)^2) / (2 p3^2))`.
pub fn bump_value(p: &[f64; 5], x: f64, z: f64) -> f64 {
    let two_var = 2.0 * p[2] * p[2];
    let d2 = (x - p[3]).powi(2) + (z - p[4]).powi(2);
    let e = if two_var > 0.0 {
        (-d2 / two_var).exp()
    } else if d2 == 0.0 {
        1.0
    } else {
        0.0
    };
    p[0] + p[1] * e
}

pub fn gaussian_bump(grid: &Grid, p: &[f64; 5]) -> ScalarField {
    let off = grid.y_offset();
    ScalarField::from_fn(*grid, |x, y| bump_value(p, x, y - off))
}

/// Bump parameters `(b, c)`, `b_j ~ U[0, 1]`.
pub fn gen_pair_exp2(spec: &RelationSpecExpII, rng: &mut Rng) -> ([f64; 5], [f64; 5]) {
    let mut b = [0.0; 5];
    for v in b.iter_mut() {
        *v = rng.random_range(0.0..1.0);
    }
    (b, exp2_relation(spec, &b))
}

pub const EXP3_CUBIC: [f64; 4] = [1.0, 0.15, 0.2, 0.05];

/// Density with two narrow Gaussian inclusions, in wave-domain coordinates.
pub fn exact_rho(x: f64, y: f64) -> f64 {
    1.0 + 0.2 * (-((x - 0.2).powi(2) + (y + 0.2).powi(2)) / (2.0 * 0.03 * 0.03)).exp()
        + 0.3 * (-((x - 0.6).powi(2) + (y + 0.6).powi(2)) / (2.0 * 0.04 * 0.04)).exp()
}

fn cubic(r: f64) -> f64 {
    EXP3_CUBIC[0] + r * (EXP3_CUBIC[1] + r * (EXP3_CUBIC[2] + r * EXP3_CUBIC[3]))
}

/// Bulk modulus: the cubic of a locally shifted density, scaled by 1.1 in one box.
pub fn exact_kappa(x: f64, y: f64) -> f64 {
    if (0.1..=0.4).contains(&x) && (-0.94..=-0.64).contains(&y) {
        1.1 * cubic(exact_rho(x - 0.04, y + 0.58))
    } else if (0.58..=1.0).contains(&x) && (-0.42..=0.0).contains(&y) {
        cubic(exact_rho(x - 0.18, y - 0.4))
    } else {
        cubic(exact_rho(x, y))
    }
}

pub struct Exp3Truth {
    pub rho: ScalarField,
    pub kappa_clean: ScalarField,
    /// The randomly perturbed modulus that generates the data.
    pub kappa: ScalarField,
    pub perturbed_nodes: usize,
    pub surrogate: LearnedRelation,
}

/// Wave-problem truth on a lowered grid; each node of kappa is perturbed by
/// `N(0, 0.1)` with probability one half.
pub fn gen_pair_exp3(grid: &Grid, rng: &mut Rng) -> Exp3Truth {
    let rho = ScalarField::from_fn(*grid, exact_rho);
    let kappa_clean = ScalarField::from_fn(*grid, exact_kappa);
    let mut kappa = kappa_clean.clone();
    let mut perturbed_nodes = 0;
    for v in kappa.values_mut() {
        if rng.random_bool(0.5) {
            let xi: f64 = StandardNormal.sample(rng);
            *v += 0.1 * xi;
            perturbed_nodes += 1;
        }
    }
    Exp3Truth {
        rho,
        kappa_clean,
        kappa,
        perturbed_nodes,
        surrogate: LearnedRelation::Pointwise(PointwiseCubic::new(EXP3_CUBIC)),
    }
}

/// Historical pair generators used to build training sets.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case")]
pub enum PairGenerator {
    Fourier {
        spec: RelationSpecExpI,
        rescale: Exp1Rescale,
    },
    Gaussian {
        spec: RelationSpecExpII,
        /// Band limit of the spectral representation.
        k: usize,
    },
}

/// One generated pair: spectral representations plus the exact nodal fields.
#[derive(Clone, Debug)]
pub struct GeneratedPair {
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub f_field: ScalarField,
    pub g_field: ScalarField,
}

impl PairGenerator {
    pub fn fourier(k: usize, relation_seed: u64) -> Self {
        let spec = RelationSpecExpI::sample(k, relation_seed);
        let rescale = Exp1Rescale::for_spec(&spec);
        PairGenerator::Fourier { spec, rescale }
    }

    pub fn gaussian(k: usize, relation_seed: u64) -> Self {
        PairGenerator::Gaussian {
            spec: RelationSpecExpII::sample(relation_seed),
            k,
        }
    }

    pub fn band_limit(&self) -> usize {
        match self {
            PairGenerator::Fourier { spec, .. } => spec.k,
            PairGenerator::Gaussian { k, .. } => *k,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PairGenerator::Fourier { .. } => "fourier",
            PairGenerator::Gaussian { .. } => "gaussian",
        }
    }

    /// Sample `index` of the stream keyed by `seed`, on `grid`.
    pub fn sample(&self, grid: &Grid, seed: u64, index: u64) -> Result<GeneratedPair> {
        let mut rng = stream(seed, index);
        match self {
            PairGenerator::Fourier { spec, rescale } => {
                let (g, s) = gen_pair_exp1_raw(spec, &mut rng);
                let gamma = rescale.gamma(&g, spec.k);
                let sigma = rescale.sigma(&s, spec.k);
                let f_field = synthesize(&gamma, grid);
                let g_field = synthesize(&sigma, grid);
                Ok(GeneratedPair {
                    f: gamma.folded().into_vec(),
                    g: sigma.folded().into_vec(),
                    f_field,
                    g_field,
                })
            }
            PairGenerator::Gaussian { spec, k } => {
                let (b, c) = gen_pair_exp2(spec, &mut rng);
                let f_field = gaussian_bump(grid, &b);
                let g_field = gaussian_bump(grid, &c);
                Ok(GeneratedPair {
                    f: analyze(&f_field, *k)?.into_vec(),
                    g: analyze(&g_field, *k)?.into_vec(),
                    f_field,
                    g_field,
                })
            }
        }
    }
}

/// Historical pairs with an 80/20 train/test split.
#[derive(Clone, Debug)]
pub struct TrainingDataset {
    pub k: usize,
    pub inputs: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
    /// Exact input fields, kept when measurements are simulated.
    pub input_fields: Option<Vec<ScalarField>>,
    pub measurements: Option<Vec<MeasurementSet>>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Manifest fields describing how a dataset was produced.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub generator: PairGenerator,
    pub n: usize,
    pub seed: u64,
    pub m: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub f_mean: f64,
    pub g_mean: f64,
}

impl TrainingDataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Mean of the constant coefficient, i.e. of the field average.
    pub fn mean_levels(&self) -> (f64, f64) {
        let n = self.len().max(1) as f64;
        (
            self.inputs.iter().map(|v| v[0]).sum::<f64>() / n,
            self.outputs.iter().map(|v| v[0]).sum::<f64>() / n,
        )
    }
}

/// Draws `n` pairs, optionally simulating measurements for each.
pub fn build_training_dataset(
    generator: &PairGenerator,
    grid: &Grid,
    n: usize,
    forward: Option<&ForwardProblem>,
    seed: u64,
) -> Result<TrainingDataset> {
    if n < 10 {
        return Err(Error::InvalidArgument(format!("dataset needs at least 10 pairs, got {n}")));
    }
    let samples: Vec<(GeneratedPair, Option<MeasurementSet>)> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<_> {
            let wrap = |e: Error| Error::Sample {
                index: i,
                source: Box::new(e),
            };
            let pair = generator.sample(grid, seed, i as u64).map_err(wrap)?;
            let meas = forward
                .map(|fw| fw.simulate(&pair.f_field, &pair.g_field))
                .transpose()
                .map_err(wrap)?;
            Ok((pair, meas))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, u64::MAX));
    let n_train = (0.8 * n as f64).round() as usize;
    let mut train = order[..n_train].to_vec();
    let mut test = order[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();

    let mut inputs = Vec::with_capacity(n);
    let mut outputs = Vec::with_capacity(n);
    let mut fields = Vec::new();
    let mut measurements = Vec::new();
    for (pair, meas) in samples {
        inputs.push(pair.f);
        outputs.push(pair.g);
        if let Some(m) = meas {
            fields.push(pair.f_field);
            measurements.push(m);
        }
    }
    Ok(TrainingDataset {
        k: generator.band_limit(),
        inputs,
        outputs,
        input_fields: forward.is_some().then_some(fields),
        measurements: forward.is_some().then_some(measurements),
        train,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pde_diffusion::InternalData;

    #[test]
    fn zero_gamma_gives_zero_sigma() {
        let spec = RelationSpecExpI::sample(3, 1);
        let s = exp1_raw_sigma(&spec, &[0.0; 16]);
        assert!(s.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn single_mode_relation_value() {
        let mut spec = RelationSpecExpI::sample(1, 1);
        spec.a.iter_mut().for_each(|v| *v = 0.0);
        // target (0, 1) is flat index 1; source (0, 0) is flat index 0
        spec.a[4] = 0.1;
        let mut g = vec![0.0; 4];
        g[0] = 0.5;
        let s = exp1_raw_sigma(&spec, &g);
        assert!((s[1] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn rescaled_fields_stay_in_band() {
        let spec = RelationSpecExpI::sample(3, 5);
        let grid = Grid::unit(32);
        let gen = PairGenerator::Fourier {
            rescale: Exp1Rescale::for_spec(&spec),
            spec,
        };
        for i in 0..20 {
            let p = gen.sample(&grid, 9, i).unwrap();
            assert!(p.f_field.min() >= 0.5e-3 && p.f_field.max() <= 1.5e-3);
            assert!(p.g_field.min() >= 0.01 && p.g_field.max() <= 0.06);
        }
    }

    #[test]
    fn exp2_zero_relation_constants() {
        let spec = RelationSpecExpII { a: [[0.0; 5]; 5] };
        let c = exp2_relation(&spec, &[0.1, 0.2, 0.3, 0.4, 0.9]);
        assert_eq!(&c[..3], &[8.0, 2.5, 0.2]);
        assert_eq!(c[3], 0.75);
        assert_eq!(c[4], 0.25);
    }

    #[test]
    fn exp2_sigma_peak_value() {
        let spec = RelationSpecExpII::sample(3);
        let (_, c) = gen_pair_exp2(&spec, &mut stream(4, 0));
        assert!((bump_value(&c, c[3], c[4]) - (c[0] + c[1])).abs() < 1e-12);
        // the sampled maximum sits within one cell of the center
        let grid = Grid::unit(32);
        let s = gaussian_bump(&grid, &c);
        let (mut best, mut at) = (f64::MIN, (0, 0));
        for i in 0..=32 {
            for j in 0..=32 {
                if s.at(i, j) > best {
                    best = s.at(i, j);
                    at = (i, j);
                }
            }
        }
        if (0.0..=1.0).contains(&c[3]) && (0.0..=1.0).contains(&c[4]) {
            assert!((grid.x(at.0) - c[3]).abs() <= grid.spacing());
            assert!((grid.y(at.1) - c[4]).abs() <= grid.spacing());
        }
    }

    #[test]
    fn exp3_examples() {
        let r = exact_rho(0.2, -0.2);
        assert!((r - (1.2 + 0.3 * (-100.0f64).exp())).abs() < 1e-12);
        assert!((cubic(1.0) - 1.4).abs() < 1e-15);
        // far from both inclusions and outside the shifted boxes
        assert!((exact_kappa(0.9, -0.9) - 1.4).abs() < 1e-12);
    }

    #[test]
    fn noise_none_and_zero_are_identity() {
        let grid = Grid::unit(4);
        let data = MeasurementSet::Internal(InternalData {
            fields: vec![ScalarField::from_fn(grid, |x, y| x + y)],
            noise: NoiseSpec::none(),
        });
        let same = add_noise(&data, &NoiseSpec::new(NoiseKind::Additive, 0.0, 3).unwrap()).unwrap();
        assert_eq!(same.arrays(), data.arrays());
        let same = add_noise(&data, &NoiseSpec::none()).unwrap();
        assert_eq!(same, data);
        assert!(NoiseSpec::new(NoiseKind::Additive, -0.1, 0).is_err());
    }

    #[test]
    fn split_sizes() {
        let grid = Grid::unit(8);
        let gen = PairGenerator::fourier(1, 2);
        let ds = build_training_dataset(&gen, &grid, 10, None, 4).unwrap();
        assert_eq!((ds.train.len(), ds.test.len()), (8, 2));
        assert!(build_training_dataset(&gen, &grid, 9, None, 4).is_err());
    }
}
