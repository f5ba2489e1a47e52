//! Seeded random tensors for tests, verification suites and benchmark
//! inputs. ChaCha8 keeps every draw reproducible across platforms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::Qkv;
use crate::tensor::Tensor;

/// A 64-bit seed that hands out independent deterministic substreams.
#[derive(Debug, Clone, Copy)]
pub struct SeedStream {
    seed: u64,
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }

    /// Substream `i`; distinct indices give independent streams.
    pub fn substream(&self, i: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i))
    }
}

pub fn uniform_tensor(rng: &mut ChaCha8Rng, dims: &[usize], lo: f32, hi: f32) -> Tensor {
    let len: usize = dims.iter().product();
    let data = (0..len).map(|_| rng.gen_range(lo..=hi)).collect();
    Tensor::new(dims.to_vec(), data).expect("dims/data consistent by construction")
}

/// Query/key/value triple with entries in `[lo, hi]`.
pub fn qkv_instance(
    rng: &mut ChaCha8Rng,
    n_q: usize,
    n_k: usize,
    d: usize,
    lo: f32,
    hi: f32,
) -> Qkv {
    Qkv {
        q: uniform_tensor(rng, &[n_q, d], lo, hi),
        k: uniform_tensor(rng, &[n_k, d], lo, hi),
        v: uniform_tensor(rng, &[n_k, d], lo, hi),
    }
}
