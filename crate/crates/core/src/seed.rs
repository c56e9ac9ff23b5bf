//! Seed streams. Every random decision in the pipeline draws from a ChaCha
//! stream keyed by a base seed plus a purpose tag and indices, so results do
//! not depend on evaluation order or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Purpose tags keep streams for different consumers disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Split = 2,
    Shuffle = 3,
    Views = 4,
    Scale = 5,
    Synth = 6,
    Misc = 7,
}

// splitmix64 finalizer
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(base: u64, stream: Stream, indices: &[u64]) -> u64 {
    let mut h = mix(base ^ mix(stream as u64));
    for &i in indices {
        h = mix(h ^ mix(i.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    h
}

pub fn rng(base: u64, stream: Stream, indices: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive(base, stream, indices))
}
