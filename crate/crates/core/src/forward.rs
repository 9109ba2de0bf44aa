//! The two forward problems behind a common interface.
//!
//! Each problem maps a coefficient pair `(f, g)` to measurements. For the
//! diffusion problem `f` is the diffusion coefficient and `g` the absorption;
//! for the wave problem `f` is the density and `g` the bulk modulus.

use serde::{Deserialize, Serialize};

use crate::basis::{Grid, ScalarField};
use crate::error::{Error, Result};
use crate::pde_diffusion::{diffusion_misfit, simulate_internal, BoundarySource, DiffusionProblem, InternalData};
use crate::pde_wave::{propagate, step_count, wave_misfit, BoundaryTrace, Envelope, TimeSource, WaveProblem};
use crate::synth::NoiseSpec;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiffusionSetup {
    pub grid: Grid,
    pub ell: f64,
    pub sources: Vec<BoundarySource>,
}

impl DiffusionSetup {
    /// Four Gaussian illuminations, one per side.
    pub fn four_sides(m: usize, ell: f64) -> Self {
        let grid = Grid::unit(m);
        Self {
            grid,
            ell,
            sources: BoundarySource::four_sides(&grid),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WaveSetup {
    pub grid: Grid,
    pub dt: f64,
    pub t_final: f64,
    pub source: TimeSource,
}

impl WaveSetup {
    pub fn two_gaussians(m: usize, dt: f64, t_final: f64, envelope: Envelope) -> Result<Self> {
        let grid = Grid::lowered(m);
        let steps = step_count(dt, t_final)?;
        Ok(Self {
            grid,
            dt,
            t_final,
            source: TimeSource::two_gaussians(&grid, steps, dt, envelope),
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum ForwardProblem {
    Diffusion(DiffusionSetup),
    Wave(WaveSetup),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeasurementSet {
    Internal(InternalData),
    Boundary(BoundaryTrace),
}

impl MeasurementSet {
    /// Every independent measurement array (one per source, or the whole trace).
    pub fn arrays(&self) -> Vec<&[f64]> {
        match self {
            MeasurementSet::Internal(d) => d.fields.iter().map(|f| f.values()).collect(),
            MeasurementSet::Boundary(t) => t.values.iter().map(Vec::as_slice).collect::<Vec<_>>(),
        }
    }

    pub fn noise(&self) -> &NoiseSpec {
        match self {
            MeasurementSet::Internal(d) => &d.noise,
            MeasurementSet::Boundary(t) => &t.noise,
        }
    }

    pub fn set_noise(&mut self, spec: NoiseSpec) {
        match self {
            MeasurementSet::Internal(d) => d.noise = spec,
            MeasurementSet::Boundary(t) => t.noise = spec,
        }
    }

    /// The same measurements seen from the nodes of a coarser grid.
    pub fn restrict(&self, coarse: &Grid) -> Result<MeasurementSet> {
        match self {
            MeasurementSet::Internal(d) => Ok(MeasurementSet::Internal(InternalData {
                fields: d.fields.iter().map(|f| f.restrict(coarse)).collect::<Result<_>>()?,
                noise: d.noise.clone(),
            })),
            MeasurementSet::Boundary(t) => {
                let mc = coarse.m();
                if t.m % mc != 0 {
                    return Err(Error::GridMismatch(format!("cannot restrict a trace on M = {} to M = {mc}", t.m)));
                }
                let r = t.m / mc;
                Ok(MeasurementSet::Boundary(BoundaryTrace {
                    dt: t.dt,
                    m: mc,
                    values: t.values.iter().map(|row| row.iter().step_by(r).copied().collect()).collect(),
                    noise: t.noise.clone(),
                }))
            }
        }
    }

    /// Misfit of the all-zero prediction; objectives are divided by it.
    pub fn data_scale(&self) -> f64 {
        match self {
            MeasurementSet::Internal(d) => {
                let nh = d.fields.len().max(1) as f64;
                d.fields
                    .iter()
                    .map(|f| {
                        let n = f.l2_norm();
                        n * n
                    })
                    .sum::<f64>()
                    * 0.5
                    / nh
            }
            MeasurementSet::Boundary(t) => 0.5 * t.weighted_norm_sq(),
        }
    }
}

impl ForwardProblem {
    pub fn grid(&self) -> Grid {
        match self {
            ForwardProblem::Diffusion(s) => s.grid,
            ForwardProblem::Wave(s) => s.grid,
        }
    }

    fn diffusion(s: &DiffusionSetup, f: &ScalarField, g: &ScalarField) -> Result<DiffusionProblem> {
        let mut p = DiffusionProblem::new(f.clone(), g.clone(), s.ell)?;
        p.sources = s.sources.clone();
        Ok(p)
    }

    fn wave(s: &WaveSetup, f: &ScalarField, g: &ScalarField) -> WaveProblem {
        WaveProblem {
            kappa: g.clone(),
            rho: f.clone(),
            dt: s.dt,
            t_final: s.t_final,
            source: s.source.clone(),
        }
    }

    fn check_grid(&self, f: &ScalarField, g: &ScalarField) -> Result<()> {
        f.ensure_same_grid(g)?;
        if *f.grid() != self.grid() {
            return Err(Error::GridMismatch(format!(
                "coefficients on {:?}, problem on {:?}",
                f.grid(),
                self.grid()
            )));
        }
        Ok(())
    }

    /// Noise-free measurements for the pair `(f, g)`.
    pub fn simulate(&self, f: &ScalarField, g: &ScalarField) -> Result<MeasurementSet> {
        self.check_grid(f, g)?;
        match self {
            ForwardProblem::Diffusion(s) => Ok(MeasurementSet::Internal(simulate_internal(
                &Self::diffusion(s, f, g)?,
            )?)),
            ForwardProblem::Wave(s) => Ok(MeasurementSet::Boundary(propagate(&Self::wave(s, f, g))?)),
        }
    }

    /// Data misfit and optionally its gradient `(d/df, d/dg)` on the nodes.
    pub fn misfit(
        &self,
        f: &ScalarField,
        g: &ScalarField,
        data: &MeasurementSet,
        with_gradient: bool,
    ) -> Result<(f64, Option<(ScalarField, ScalarField)>)> {
        self.check_grid(f, g)?;
        match (self, data) {
            (ForwardProblem::Diffusion(s), MeasurementSet::Internal(d)) => {
                diffusion_misfit(&Self::diffusion(s, f, g)?, d, with_gradient)
            }
            (ForwardProblem::Wave(s), MeasurementSet::Boundary(t)) => {
                let (j, grads) = wave_misfit(&Self::wave(s, f, g), t, with_gradient)?;
                // wave_misfit reports (kappa, rho); f is rho.
                Ok((j, grads.map(|(gk, gr)| (gr, gk))))
            }
            _ => Err(Error::InvalidArgument(
                "measurement kind does not match the forward problem".into(),
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{add_noise, NoiseKind};

    #[test]
    fn trace_noise_keeps_shape() {
        let setup = WaveSetup::two_gaussians(8, 0.02, 0.4, Envelope::default()).unwrap();
        let fw = ForwardProblem::Wave(setup);
        let grid = fw.grid();
        let one = ScalarField::constant(grid, 1.0);
        let data = fw.simulate(&one, &one).unwrap();
        let noisy = add_noise(&data, &NoiseSpec::new(NoiseKind::Additive, 0.1, 1).unwrap()).unwrap();
        match (&data, &noisy) {
            (MeasurementSet::Boundary(a), MeasurementSet::Boundary(b)) => {
                assert_eq!(a.values.len(), b.values.len());
                assert!(b.values.iter().all(|r| r.len() == 9));
                assert_ne!(a.values, b.values);
            }
            _ => unreachable!(),
        }
    }
}
