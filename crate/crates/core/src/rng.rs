//! Counter-based random streams.
//!
//! Every consumer of randomness gets its own ChaCha stream keyed by the master
//! seed, a purpose tag and an index, so results never depend on the order in
//! which parallel workers run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// What a stream is used for. Distinct purposes never share key material.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum Purpose {
    Trajectory = 0,
    Tomography = 1,
    Calibration = 2,
}

/// Independent stream for `(master_seed, purpose, index)`.
pub fn substream(master_seed: u64, purpose: Purpose, index: u64) -> StreamRng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&master_seed.to_le_bytes());
    key[8..12].copy_from_slice(&(purpose as u32).to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}
