//! Gated attention units and the attention-kernel variants around them.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] and [`autodiff`]: dense tensors and a tape-based reverse-mode
//!   differentiator with a finite-difference oracle.
//! - [`kernels`]: rotary position embedding, the ReLU²/softmax attention
//!   score kernels, Swish and the variance normalization.
//! - [`gau`]: the GLU, the gated attention unit and the MHSA+FFN baseline.
//! - [`train`]: vocabulary, MLM batches, the stacked-GAU encoder, AdamW,
//!   checkpoints and the training loop.
//! - [`analysis`]: numerical rank, sparsity and entropy of attention matrices.
//! - [`bench`]: block-level time and memory comparison.

pub mod analysis;
pub mod autodiff;
pub mod bench;
pub mod error;
pub mod gau;
pub mod kernels;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, Element, Tensor};
