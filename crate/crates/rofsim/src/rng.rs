use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Handle to one independent, reproducible noise stream.
///
/// Every stochastic operation in the simulator draws from exactly one
/// `RngStream`; the same `(seed, stream_id)` pair yields a bit-identical
/// sample sequence on every run, which is what makes whole scenario runs
/// byte-reproducible and safe to parallelize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    /// A stream for a sub-source, e.g. the per-element noise of a chain.
    pub fn substream(&self, offset: u64) -> Self {
        Self {
            seed: self.seed,
            stream_id: self.stream_id.wrapping_add(offset),
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

// Fixed stream ids so that adding or removing one noise source never
// perturbs the draws of another.
pub mod streams {
    pub const PAYLOAD_BITS: u64 = 0;
    pub const COHERENT_BITS_X: u64 = 2;
    pub const COHERENT_BITS_Y: u64 = 3;
    pub const LASER_PHASE: u64 = 4;
    pub const MISALIGNMENT: u64 = 8;
    pub const PD_THERMAL: u64 = 16;
    pub const PD_SHOT: u64 = 17;
    /// Per-EDFA ASE: `EDFA_BASE + 2 * element_index` (+1 for the Y polarization).
    pub const EDFA_BASE: u64 = 64;
}
