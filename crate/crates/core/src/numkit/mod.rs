//! Minimal dense numeric kernel: tensors, a reverse-mode tape over the
//! layer primitives, Adam, and a finite-difference gradient checker.

mod adam;
pub mod dd;
pub mod gradcheck;
mod graph;
pub mod layers;
pub mod mtns;
mod params;
mod real;
mod tensor;

pub use adam::{adam_step, Adam, AdamConfig};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub(crate) use graph::lora_permute;
pub use params::{Grads, Param, ParamStore};
pub use real::Real;
pub use tensor::Tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic RNG used everywhere a seed is taken.
pub type SeededRng = ChaCha8Rng;

pub fn rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 step, for deriving independent child seeds.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
