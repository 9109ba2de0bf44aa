//! Joint reconstruction of two PDE coefficients with a learned relation
//! between them.
//!
//! The crate covers the cosine basis used to parameterize coefficients, a P1
//! finite element diffusion solver with internal data, an explicit acoustic
//! wave solver with boundary traces, synthetic coefficient generators,
//! polynomial and network relation surrogates, a staged BFGS inversion and an
//! experiment harness.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::type_complexity)]

pub mod basis;
pub mod error;
pub mod forward;
pub mod harness;
pub mod invert;
pub mod io;
pub mod learn;
pub mod linalg;
pub mod pde_diffusion;
pub mod pde_wave;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
