//! Deterministic `f64` tensor arithmetic, reverse-mode gradients and seeded
//! Gaussian sampling.

mod attention;
pub mod checkpoint;
mod rng;
mod tape;
mod tensor;

pub use attention::AttentionSpec;
pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use rng::{sample_standard_normal, Rng};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
