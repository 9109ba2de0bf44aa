//! Learned maps from one coefficient's representation to the other's.
//!
//! Spectral relations take the folded cosine coefficients of `f` to those of
//! `g`; the pointwise relation applies a scalar cubic at every node.

mod mlp;
mod poly;

pub use mlp::{
    mlp_gradient_check, network_gradient_check, train_mlp, Activation, Dense, LossRecord, MlpOptions, MlpRelation, Network,
};
pub use poly::{fit_polynomial, monomials, poly_features, PolyOptions, PolynomialRelation};

use serde::{Deserialize, Serialize};

use crate::basis::{synthesize, synthesize_transpose, ScalarField, SpectralCoeffs};
use crate::error::{Error, Result};
use crate::forward::{ForwardProblem, MeasurementSet};

/// `kappa = c0 + c1 r + c2 r^2 + c3 r^3`, applied nodewise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointwiseCubic {
    pub c: [f64; 4],
}

impl PointwiseCubic {
    pub fn new(c: [f64; 4]) -> Self {
        Self { c }
    }

    pub fn value(&self, r: f64) -> f64 {
        self.c[0] + r * (self.c[1] + r * (self.c[2] + r * self.c[3]))
    }

    pub fn derivative(&self, r: f64) -> f64 {
        self.c[1] + r * (2.0 * self.c[2] + 3.0 * r * self.c[3])
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum LearnedRelation {
    Polynomial(PolynomialRelation),
    Mlp(MlpRelation),
    Pointwise(PointwiseCubic),
}

impl LearnedRelation {
    pub fn is_pointwise(&self) -> bool {
        matches!(self, LearnedRelation::Pointwise(_))
    }

    pub fn variant_name(&self) -> &'static str {
        match self {
            LearnedRelation::Polynomial(_) => "polynomial",
            LearnedRelation::Mlp(_) => "mlp",
            LearnedRelation::Pointwise(_) => "pointwise",
        }
    }

    /// Spectral prediction `g_hat = N(f_hat)`.
    pub fn predict(&self, fhat: &[f64]) -> Result<Vec<f64>> {
        match self {
            LearnedRelation::Polynomial(p) => p.predict(fhat),
            LearnedRelation::Mlp(m) => m.predict(fhat),
            LearnedRelation::Pointwise(_) => Err(Error::InvalidArgument(
                "pointwise relation has no spectral prediction".into(),
            )),
        }
    }

    /// Vector-Jacobian product `J(f_hat)^T gbar`.
    pub fn vjp(&self, fhat: &[f64], gbar: &[f64]) -> Result<Vec<f64>> {
        match self {
            LearnedRelation::Polynomial(p) => p.vjp(fhat, gbar),
            LearnedRelation::Mlp(m) => m.vjp(fhat, gbar),
            LearnedRelation::Pointwise(_) => Err(Error::InvalidArgument(
                "pointwise relation has no spectral Jacobian".into(),
            )),
        }
    }

    /// Pointwise prediction on a field.
    pub fn predict_field(&self, f: &ScalarField) -> Result<ScalarField> {
        match self {
            LearnedRelation::Pointwise(c) => Ok(f.map(|r| c.value(r))),
            _ => Err(Error::InvalidArgument("spectral relation applied to a field".into())),
        }
    }

    pub fn derivative_field(&self, f: &ScalarField) -> Result<ScalarField> {
        match self {
            LearnedRelation::Pointwise(c) => Ok(f.map(|r| c.derivative(r))),
            _ => Err(Error::InvalidArgument("spectral relation applied to a field".into())),
        }
    }

    /// Flat trainable parameters.
    pub fn params(&self) -> Vec<f64> {
        match self {
            LearnedRelation::Polynomial(p) => p.theta.clone(),
            LearnedRelation::Mlp(m) => m.params(),
            LearnedRelation::Pointwise(c) => c.c.to_vec(),
        }
    }

    pub fn with_params(&self, params: &[f64]) -> Result<Self> {
        let n = self.params().len();
        if params.len() != n {
            return Err(Error::Dimension {
                expected: n,
                got: params.len(),
            });
        }
        Ok(match self {
            LearnedRelation::Polynomial(p) => {
                let mut q = p.clone();
                q.theta = params.to_vec();
                LearnedRelation::Polynomial(q)
            }
            LearnedRelation::Mlp(m) => {
                let mut q = m.clone();
                q.set_params(params);
                LearnedRelation::Mlp(q)
            }
            LearnedRelation::Pointwise(_) => {
                LearnedRelation::Pointwise(PointwiseCubic::new([params[0], params[1], params[2], params[3]]))
            }
        })
    }

    /// Moves the parameters by `eps ||theta||` along the unit direction `dir`.
    pub fn perturbed(&self, eps: f64, dir: &[f64]) -> Result<Self> {
        let theta = self.params();
        let norm = crate::linalg::norm2(&theta);
        let dnorm = crate::linalg::norm2(dir);
        if dnorm == 0.0 {
            return Err(Error::InvalidArgument("zero perturbation direction".into()));
        }
        let moved: Vec<f64> = theta
            .iter()
            .zip(dir)
            .map(|(t, d)| t + eps * norm * d / dnorm)
            .collect();
        self.with_params(&moved)
    }
}

/// Model-consistency loss for one historical sample and its gradient in the
/// predicted coefficients: `misfit(f, synth(g_hat); data) / scale(data)`.
pub fn consistency_term(
    forward: &ForwardProblem,
    k: usize,
    f_field: &ScalarField,
    ghat: &[f64],
    data: &MeasurementSet,
) -> Result<(f64, Vec<f64>)> {
    let grid = forward.grid();
    let g = synthesize(&SpectralCoeffs::from_vec(k, ghat.to_vec())?, &grid);
    let scale = data.data_scale();
    if !(scale > 0.0) {
        return Err(Error::InvalidArgument("measurement with zero norm".into()));
    }
    let (j, grads) = forward.misfit(f_field, &g, data, true)?;
    let (_, dg) = grads.expect("gradient requested");
    let (gbar, _) = synthesize_transpose(&dg, k);
    Ok((j / scale, gbar.into_iter().map(|v| v / scale).collect()))
}

/// Mean of `||pred - truth|| / ||truth||` over the listed samples.
pub fn mean_relative_error(rel: &LearnedRelation, inputs: &[Vec<f64>], outputs: &[Vec<f64>], idx: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for &i in idx {
        let p = rel.predict(&inputs[i])?;
        let num: f64 = p.iter().zip(&outputs[i]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den = crate::linalg::norm2(&outputs[i]);
        total += if den > 0.0 { num / den } else { num };
    }
    Ok(total / idx.len().max(1) as f64)
}
