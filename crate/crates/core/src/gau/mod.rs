//! The gated attention unit, the GLU it extends, the MHSA+FFN baseline,
//! and parameter accounting.

mod baseline;
mod block;
mod glu;
mod params;

pub use baseline::{mhsa_ffn_forward, BaselineConfig, BaselineParams, BaselineVars};
pub use block::{gau_forward, BlockConfig, GauOutput, GauParams, GauVars};
pub use glu::{glu_forward, GluParams, GluVars};
pub use params::{count_params, BlockKind, ParamCount};

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

/// An ordered, named collection of parameter tensors.
pub trait ParamSet<T: Element> {
    fn named(&self) -> Vec<(String, &Tensor<T>)>;
    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)>;

    fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Registers every tensor as a trainable leaf, in `named()` order.
    fn bind_all(&self, tape: &mut Tape<T>) -> Result<Vec<Var>> {
        self.named()
            .into_iter()
            .map(|(_, t)| tape.param(t.clone()))
            .collect()
    }
}

/// `N(0, 1/fan_in)` weights for a `[fan_in, fan_out]` matrix.
pub(crate) fn fan_in_init<T: Element>(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor<T> {
    Tensor::randn(&[fan_in, fan_out], 0.0, 1.0 / (fan_in as f64).sqrt(), rng)
}

pub(crate) fn prefixed(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
