use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Element;

/// Rotary embedding over `dim` features with frequencies
/// `θ_i = theta_base^(−2i/dim)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RopeConfig {
    pub dim: usize,
    #[serde(default = "default_theta_base")]
    pub theta_base: f64,
}

fn default_theta_base() -> f64 {
    10_000.0
}

impl RopeConfig {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            theta_base: default_theta_base(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || !self.dim.is_multiple_of(2) {
            return Err(Error::Config(format!("rope dim must be even and positive, got {}", self.dim)));
        }
        if !(self.theta_base > 1.0) {
            return Err(Error::Config(format!("rope theta_base must exceed 1, got {}", self.theta_base)));
        }
        Ok(())
    }

    pub fn thetas(&self) -> Vec<f64> {
        (0..self.dim / 2)
            .map(|i| self.theta_base.powf(-2.0 * i as f64 / self.dim as f64))
            .collect()
    }
}

/// Rotates interleaved pairs `(x[2i], x[2i+1])` of row `m` by `positions[m]·θ_i`:
/// the even slot becomes `x₂ᵢ cos − x₂ᵢ₊₁ sin`, the odd slot `x₂ᵢ₊₁ cos + x₂ᵢ sin`.
pub fn apply_rope<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    positions: &[f64],
    cfg: &RopeConfig,
) -> Result<Var> {
    cfg.validate()?;
    let d = *tape.shape(x).last().unwrap_or(&0);
    if d != cfg.dim {
        return Err(Error::Config(format!(
            "rope configured for dim {}, input has {d}",
            cfg.dim
        )));
    }
    tape.rope(x, positions, &cfg.thetas())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn thetas_decrease() {
        let th = RopeConfig::new(8).thetas();
        assert_eq!(th[0], 1.0);
        assert!(th.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn odd_dim_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(
            apply_rope(&mut tape, x, &[0.0, 1.0], &RopeConfig::new(3)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn position_zero_is_identity() {
        let mut rng = crate::rng::seeded(3);
        let mut tape = Tape::<f64>::new();
        let v = Tensor::randn(&[1, 8], 0.0, 1.0, &mut rng);
        let x = tape.constant(v.clone()).unwrap();
        let y = apply_rope(&mut tape, x, &[0.0], &RopeConfig::new(8)).unwrap();
        assert_eq!(tape.value(y), &v);
    }

    #[test]
    fn quarter_turn() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[1, 2], &[1.0, 0.0]).unwrap()).unwrap();
        let y = apply_rope(&mut tape, x, &[std::f64::consts::FRAC_PI_2], &RopeConfig::new(2)).unwrap();
        let y = tape.value(y).data();
        assert!(y[0].abs() < 1e-15 && (y[1] - 1.0).abs() < 1e-15, "{y:?}");
    }
}
