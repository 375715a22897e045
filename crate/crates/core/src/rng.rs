//! Named RNG streams derived from a single 64-bit run seed.
//!
//! Each stream is an independent ChaCha8 sequence selected by hashing the
//! stream name into the cipher's stream id. Stream state is a (name, word
//! position) pair, so it can be checkpointed and restored exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const STREAM_INIT: &str = "init";
pub const STREAM_DATA: &str = "data";
pub const STREAM_NOISE: &str = "noise";

/// Deterministically derive a sub-seed for an independent purpose.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    seed ^ hash_name(tag).rotate_left(17)
}

/// FNV-1a, used only to map stream names onto ChaCha stream ids.
fn hash_name(name: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// A named, seekable RNG stream.
#[derive(Clone, Debug)]
pub struct Stream {
    rng: ChaCha8Rng,
}

impl Stream {
    pub fn new(seed: u64, name: &str) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(hash_name(name));
        Stream { rng }
    }

    /// A one-shot child stream, e.g. one per dataset index. Children do not
    /// advance the parent.
    pub fn child(seed: u64, name: &str, index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15u64.wrapping_mul(index.wrapping_add(1)));
        rng.set_stream(hash_name(name));
        Stream { rng }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn state(&self) -> StreamState {
        let pos = self.rng.get_word_pos();
        StreamState {
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
        }
    }

    pub fn restore(&mut self, state: &StreamState) {
        let pos = ((state.word_pos_hi as u128) << 64) | state.word_pos_lo as u128;
        self.rng.set_word_pos(pos);
    }

    /// Standard normal draw (Box-Muller, two uniforms per call).
    pub fn normal(&mut self) -> f64 {
        use rand::Rng;
        let u1: f64 = self.rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = self.rng.gen::<f64>();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

/// Checkpointable position within a stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamState {
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}
