//! Stage objectives in scaled spectral unknowns.
//!
//! The unknown vector `x` holds cosine coefficients divided by a reference
//! level: `f_hat = s_f x_f` and `g_hat = s_g x_g`. The misfit is divided by
//! the data scale (misfit of the zero prediction) so all terms are O(1).

use serde::{Deserialize, Serialize};

use crate::basis::{synthesize, synthesize_transpose, ScalarField, SpectralCoeffs};
use crate::error::{Error, Result};
use crate::forward::{ForwardProblem, MeasurementSet};
use crate::learn::LearnedRelation;

/// Reference levels of the two coefficients.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scales {
    pub f: f64,
    pub g: f64,
}

/// Value of an objective split into its parts, with the full gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub misfit: f64,
    pub relation: f64,
    pub tikhonov: f64,
    pub positivity: f64,
}

/// Everything an objective evaluation needs besides the point.
#[derive(Clone, Debug)]
pub struct Objective<'a> {
    pub forward: &'a ForwardProblem,
    pub data: &'a MeasurementSet,
    pub rel: &'a LearnedRelation,
    pub k: usize,
    pub scales: Scales,
    pub tikhonov: f64,
    pub positivity_weight: f64,
    /// Fields below `floor * scale` are penalized.
    pub positivity_floor: f64,
    data_scale: f64,
}

/// `w/2 sum_n omega_n max(0, floor - v_n/s)^2` and its nodal gradient.
fn positivity(v: &ScalarField, s: f64, floor: f64, weight: f64) -> (f64, ScalarField) {
    let w = v.grid().trapezoid_weights();
    let mut val = 0.0;
    let grad: Vec<f64> = v
        .values()
        .iter()
        .zip(&w)
        .map(|(x, wn)| {
            let gap = (floor - x / s).max(0.0);
            val += 0.5 * weight * wn * gap * gap;
            -weight * wn * gap / s
        })
        .collect();
    (val, ScalarField::new(*v.grid(), grad).expect("same grid"))
}

fn add(a: &mut [f64], b: &[f64], scale: f64) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += scale * y;
    }
}

impl<'a> Objective<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        forward: &'a ForwardProblem,
        data: &'a MeasurementSet,
        rel: &'a LearnedRelation,
        k: usize,
        scales: Scales,
        tikhonov: f64,
        positivity_weight: f64,
        positivity_floor: f64,
    ) -> Result<Self> {
        let data_scale = data.data_scale();
        if !(data_scale > 0.0) {
            return Err(Error::InvalidArgument("measurements are identically zero".into()));
        }
        if !(scales.f > 0.0 && scales.g > 0.0) {
            return Err(Error::InvalidArgument("reference levels must be positive".into()));
        }
        Ok(Self {
            forward,
            data,
            rel,
            k,
            scales,
            tikhonov,
            positivity_weight,
            positivity_floor,
            data_scale,
        })
    }

    pub fn data_scale(&self) -> f64 {
        self.data_scale
    }

    pub fn n_coeffs(&self) -> usize {
        (self.k + 1) * (self.k + 1)
    }

    /// Spectral coefficients `s x`.
    pub fn coeffs(&self, x: &[f64], s: f64) -> Result<SpectralCoeffs> {
        SpectralCoeffs::from_vec(self.k, x.iter().map(|v| s * v).collect())
    }

    /// Field of `f` at the stage-one point `x_f`.
    pub fn f_field(&self, x_f: &[f64]) -> Result<ScalarField> {
        Ok(synthesize(&self.coeffs(x_f, self.scales.f)?, &self.forward.grid()))
    }

    /// `g` implied by the relation at `x_f`: synthesized prediction, or the
    /// nodewise map for a pointwise relation.
    pub fn related_g_field(&self, x_f: &[f64]) -> Result<ScalarField> {
        if self.rel.is_pointwise() {
            self.rel.predict_field(&self.f_field(x_f)?)
        } else {
            let fhat = self.coeffs(x_f, self.scales.f)?;
            let ghat = self.rel.predict(fhat.as_slice())?;
            Ok(synthesize(&SpectralCoeffs::from_vec(self.k, ghat)?, &self.forward.grid()))
        }
    }

    /// Data misfit plus positivity for the pair of fields, returning nodal
    /// cotangents `(f_bar, g_bar)`.
    fn data_part(&self, f: &ScalarField, g: &ScalarField) -> Result<(f64, f64, ScalarField, ScalarField)> {
        let (j, grads) = self.forward.misfit(f, g, self.data, true)?;
        let (df, dg) = grads.expect("gradient requested");
        let (pf, pfg) = positivity(f, self.scales.f, self.positivity_floor, self.positivity_weight);
        let (pg, pgg) = positivity(g, self.scales.g, self.positivity_floor, self.positivity_weight);
        let mut fbar = df.map(|v| v / self.data_scale);
        let mut gbar = dg.map(|v| v / self.data_scale);
        add(fbar.values_mut(), pfg.values(), 1.0);
        add(gbar.values_mut(), pgg.values(), 1.0);
        Ok((j / self.data_scale, pf + pg, fbar, gbar))
    }

    /// Stage-one objective with `g` tied to `f` through the relation.
    pub fn phi0(&self, x_f: &[f64]) -> Result<Evaluation> {
        self.check_len(x_f, self.n_coeffs())?;
        let sf = self.scales.f;
        let fhat = self.coeffs(x_f, sf)?;
        let grid = self.forward.grid();
        let f = synthesize(&fhat, &grid);
        let (misfit, pos, fbar, gbar, ghat) = if self.rel.is_pointwise() {
            let g = self.rel.predict_field(&f)?;
            let (m, p, mut fbar, gbar) = self.data_part(&f, &g)?;
            let dn = self.rel.derivative_field(&f)?;
            for ((a, b), d) in fbar.values_mut().iter_mut().zip(gbar.values()).zip(dn.values()) {
                *a += b * d;
            }
            (m, p, fbar, gbar, None)
        } else {
            let ghat = self.rel.predict(fhat.as_slice())?;
            let g = synthesize(&SpectralCoeffs::from_vec(self.k, ghat.clone())?, &grid);
            let (m, p, fbar, gbar) = self.data_part(&f, &g)?;
            (m, p, fbar, gbar, Some(ghat))
        };
        let (mut fhat_bar, _) = synthesize_transpose(&fbar, self.k);
        if ghat.is_some() {
            let (ghat_bar, _) = synthesize_transpose(&gbar, self.k);
            add(&mut fhat_bar, &self.rel.vjp(fhat.as_slice(), &ghat_bar)?, 1.0);
        }
        let tik = 0.5 * self.tikhonov * crate::linalg::dot(x_f, x_f);
        let gradient: Vec<f64> = fhat_bar
            .iter()
            .zip(x_f)
            .map(|(b, x)| sf * b + self.tikhonov * x)
            .collect();
        self.finish(misfit, 0.0, tik, pos, gradient)
    }

    /// Stage-`j` objective in the concatenated unknown `(x_f, x_g)`.
    pub fn phij(&self, x: &[f64], alpha: f64) -> Result<Evaluation> {
        let n = self.n_coeffs();
        self.check_len(x, 2 * n)?;
        let (x_f, x_g) = x.split_at(n);
        let (sf, sg) = (self.scales.f, self.scales.g);
        let fhat = self.coeffs(x_f, sf)?;
        let ghat = self.coeffs(x_g, sg)?;
        let grid = self.forward.grid();
        let f = synthesize(&fhat, &grid);
        let g = synthesize(&ghat, &grid);
        let (misfit, pos, mut fbar, mut gbar) = self.data_part(&f, &g)?;

        let mut relation = 0.0;
        let mut xg_bar = vec![0.0; n];
        let mut fhat_bar_rel = vec![0.0; n];
        if alpha != 0.0 {
            if self.rel.is_pointwise() {
                let pred = self.rel.predict_field(&f)?;
                let dn = self.rel.derivative_field(&f)?;
                let w = grid.trapezoid_weights();
                for n_ in 0..grid.len() {
                    let e = (g.values()[n_] - pred.values()[n_]) / sg;
                    relation += 0.5 * alpha * w[n_] * e * e;
                    let c = alpha * w[n_] * e / sg;
                    gbar.values_mut()[n_] += c;
                    fbar.values_mut()[n_] -= c * dn.values()[n_];
                }
            } else {
                let pred = self.rel.predict(fhat.as_slice())?;
                let e: Vec<f64> = x_g.iter().zip(&pred).map(|(xg, p)| xg - p / sg).collect();
                relation = 0.5 * alpha * crate::linalg::dot(&e, &e);
                add(&mut xg_bar, &e, alpha);
                add(&mut fhat_bar_rel, &self.rel.vjp(fhat.as_slice(), &e)?, -alpha / sg);
            }
        }
        let (fhat_bar, _) = synthesize_transpose(&fbar, self.k);
        let (ghat_bar, _) = synthesize_transpose(&gbar, self.k);
        let tik = 0.5 * self.tikhonov * crate::linalg::dot(x, x);
        let mut gradient = Vec::with_capacity(2 * n);
        for i in 0..n {
            gradient.push(sf * (fhat_bar[i] + fhat_bar_rel[i]) + self.tikhonov * x_f[i]);
        }
        for i in 0..n {
            gradient.push(sg * ghat_bar[i] + xg_bar[i] + self.tikhonov * x_g[i]);
        }
        self.finish(misfit, relation, tik, pos, gradient)
    }

    fn check_len(&self, x: &[f64], n: usize) -> Result<()> {
        if x.len() != n {
            return Err(Error::Dimension { expected: n, got: x.len() });
        }
        Ok(())
    }

    fn finish(&self, misfit: f64, relation: f64, tikhonov: f64, positivity: f64, gradient: Vec<f64>) -> Result<Evaluation> {
        let value = misfit + relation + tikhonov + positivity;
        if !value.is_finite() || gradient.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Evaluation {
            value,
            gradient,
            misfit,
            relation,
            tikhonov,
            positivity,
        })
    }
}
