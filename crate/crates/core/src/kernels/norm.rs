use serde::{Deserialize, Serialize};

use crate::autodiff::{ReduceKind, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Element;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormConfig {
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Use the mean square instead of the variance.
    #[serde(default)]
    pub rms_mode: bool,
}

fn default_eps() -> f64 {
    1e-6
}

impl Default for NormConfig {
    fn default() -> Self {
        Self {
            eps: default_eps(),
            rms_mode: false,
        }
    }
}

/// `x / √(VAR(x) + eps)` over the last axis, with population variance.
///
/// The output is not re-centred and has no gain or bias. With `rms_mode`
/// the mean square replaces the variance.
pub fn var_norm<T: Element>(tape: &mut Tape<T>, x: Var, cfg: &NormConfig) -> Result<Var> {
    let shape = tape.shape(x);
    let d = *shape.last().unwrap_or(&0);
    if d < 2 {
        return Err(Error::Input(format!("var_norm needs a last axis of at least 2, got {shape:?}")));
    }
    let axis = shape.len() - 1;
    let stat = if cfg.rms_mode {
        let sq = tape.square(x)?;
        tape.reduce(sq, axis, ReduceKind::Mean)?
    } else {
        tape.reduce(x, axis, ReduceKind::Var)?
    };
    let shifted = tape.add_scalar(stat, cfg.eps)?;
    let inv = tape.pow(shifted, -0.5)?;
    tape.mul_per_row(x, inv)
}

/// Classic layer normalization with gain and bias over the last axis.
pub fn layer_norm<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    gain: Var,
    bias: Var,
    eps: f64,
) -> Result<Var> {
    let axis = tape.shape(x).len().checked_sub(1).ok_or_else(|| {
        Error::Input("layer_norm on a scalar".into())
    })?;
    let mean = tape.reduce(x, axis, ReduceKind::Mean)?;
    let neg = tape.scale(mean, -1.0)?;
    let centred = tape.add_per_row(x, neg)?;
    let normed = var_norm(tape, centred, &NormConfig { eps, rms_mode: false })?;
    let scaled = tape.hadamard(normed, gain)?;
    tape.add(scaled, bias)
}

/// `x · sigmoid(x)`.
pub fn swish<T: Element>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    tape.swish(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn norm(data: &[f64]) -> Vec<f64> {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[1, data.len()], data).unwrap()).unwrap();
        let y = var_norm(&mut tape, x, &NormConfig::default()).unwrap();
        tape.value(y).to_f64_vec()
    }

    #[test]
    fn var_norm_examples() {
        let a = norm(&[1.0, -1.0]);
        assert!((a[0] - 1.0).abs() < 1e-6 && (a[1] + 1.0).abs() < 1e-6);
        assert_eq!(norm(&[0.0, 0.0]), vec![0.0, 0.0]);
        let b = norm(&[2.0, -2.0]);
        assert!((b[0] - 1.0).abs() < 1e-6 && (b[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn var_norm_does_not_recentre() {
        // var([3, 5]) = 1
        let a = norm(&[3.0, 5.0]);
        assert!((a[0] - 3.0).abs() < 1e-5 && (a[1] - 5.0).abs() < 1e-5);
    }

    #[test]
    fn rms_mode_uses_mean_square() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[1, 2], &[3.0, 5.0]).unwrap()).unwrap();
        let cfg = NormConfig { eps: 0.0, rms_mode: true };
        let y = var_norm(&mut tape, x, &cfg).unwrap();
        let ms: f64 = (9.0 + 25.0) / 2.0;
        assert!((tape.value(y).data()[0] - 3.0 / ms.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn var_norm_needs_two_features() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[3, 1])).unwrap();
        assert!(var_norm(&mut tape, x, &NormConfig::default()).is_err());
    }

    #[test]
    fn swish_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[2], &[0.0, 1.0]).unwrap()).unwrap();
        let y = swish(&mut tape, x).unwrap();
        let y = tape.value(y).data();
        assert_eq!(y[0], 0.0);
        let oracle = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((y[1] - oracle).abs() < 1e-15);
        assert!((y[1] - 0.731059).abs() < 1e-6);
    }
}
