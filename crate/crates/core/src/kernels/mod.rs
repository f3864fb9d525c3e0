//! Numeric primitives of the attention unit: rotary embedding, the score
//! kernels, Swish and the variance normalization.

mod attention;
mod norm;
mod rope;

pub use attention::{
    attention_scores, attn_scores_relu2, attn_scores_scaled_relu2, attn_scores_softmax,
    attn_scores_softmax_plus, AttentionKernelSpec, Denominator, KernelVariant,
};
pub use norm::{layer_norm, swish, var_norm, NormConfig};
pub use rope::{apply_rope, RopeConfig};
