//! Seeded, platform-independent random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::tensor::Tensor;

/// A ChaCha8 stream derived from `(seed, label)`; distinct labels give
/// independent streams for the same seed.
pub fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Tensor with i.i.d. N(0, std²) entries.
pub fn normal(rng: &mut ChaCha8Rng, dims: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
    let n = dims.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(dims.to_vec(), data).expect("finite normal samples")
}
