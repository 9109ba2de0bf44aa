//! Seed handling.
//!
//! Every random quantity is drawn from a ChaCha8 stream addressed by an
//! explicit 64-bit seed plus a stream index, so samples can be generated in
//! any order (or in parallel) and still come out bit-identical.
//!
//! Phase seeds are derived from the master seed with [`phase_seed`]:
//! `splitmix64(master ^ splitmix64(tag))`, where `tag` is the phase's fixed
//! numeric id listed in [`Phase`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Generator for substream `stream` of `seed`.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Pipeline phases that consume randomness.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Relation coefficients (the fixed `a` arrays of the generators).
    Relation = 1,
    /// Historical coefficient pairs.
    Dataset = 2,
    /// Model initialization and minibatch order.
    Train = 3,
    /// The ground-truth pair behind the fresh measurement.
    Truth = 4,
    /// Measurement noise.
    Noise = 5,
    /// Perturbation directions of the sensitivity sweep.
    Sensitivity = 6,
}

pub fn phase_seed(master: u64, phase: Phase) -> u64 {
    splitmix64(master ^ splitmix64(phase as u64))
}
