use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

use super::{fan_in_init, ParamSet};

#[derive(Clone, Debug, PartialEq)]
pub struct GluParams<T> {
    pub w_u: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_o: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct GluVars {
    pub w_u: Var,
    pub w_v: Var,
    pub w_o: Var,
}

impl<T: Element> GluParams<T> {
    pub fn init(d_h: usize, d_ff: usize, rng: &mut Rng) -> Self {
        Self {
            w_u: fan_in_init(d_h, d_ff, rng),
            w_v: fan_in_init(d_h, d_ff, rng),
            w_o: fan_in_init(d_ff, d_h, rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Result<GluVars> {
        let v = self.bind_all(tape)?;
        Ok(GluVars {
            w_u: v[0],
            w_v: v[1],
            w_o: v[2],
        })
    }
}

impl<T: Element> ParamSet<T> for GluParams<T> {
    fn named(&self) -> Vec<(String, &Tensor<T>)> {
        vec![
            ("w_u".into(), &self.w_u),
            ("w_v".into(), &self.w_v),
            ("w_o".into(), &self.w_o),
        ]
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![
            ("w_u".into(), &mut self.w_u),
            ("w_v".into(), &mut self.w_v),
            ("w_o".into(), &mut self.w_o),
        ]
    }
}

/// `U = swish(x W_u)`, `V = swish(x W_v)`, `O = (U ⊙ V) W_o`.
pub fn glu_forward<T: Element>(tape: &mut Tape<T>, x: Var, p: &GluVars) -> Result<Var> {
    let d_h = *tape.shape(x).last().unwrap_or(&0);
    if tape.shape(p.w_u)[0] != d_h || tape.shape(p.w_o)[1] != d_h {
        return Err(Error::shape("glu_forward", tape.shape(x), tape.shape(p.w_u)));
    }
    let u = tape.matmul(x, p.w_u)?;
    let u = tape.swish(u)?;
    let v = tape.matmul(x, p.w_v)?;
    let v = tape.swish(v)?;
    let h = tape.hadamard(u, v)?;
    tape.matmul(h, p.w_o)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn swish(x: f64) -> f64 {
        x / (1.0 + (-x).exp())
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut tape = Tape::<f64>::new();
        let p = GluParams {
            w_u: Tensor::zeros(&[3, 6]),
            w_v: Tensor::zeros(&[3, 6]),
            w_o: Tensor::zeros(&[6, 3]),
        }
        .bind(&mut tape)
        .unwrap();
        let x = tape.constant(Tensor::ones(&[4, 3])).unwrap();
        let o = glu_forward(&mut tape, x, &p).unwrap();
        assert_eq!(tape.shape(o), &[4, 3]);
        assert!(tape.value(o).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_computed_single_token() {
        let w_u = [0.5, -1.0, 2.0, 0.25];
        let w_v = [1.0, 0.0, -0.5, 1.5];
        let w_o = [2.0, -1.0, 0.5, 3.0];
        let x = [0.3, -0.7];
        let mut tape = Tape::<f64>::new();
        let p = GluParams {
            w_u: Tensor::from_f64(&[2, 2], &w_u).unwrap(),
            w_v: Tensor::from_f64(&[2, 2], &w_v).unwrap(),
            w_o: Tensor::from_f64(&[2, 2], &w_o).unwrap(),
        }
        .bind(&mut tape)
        .unwrap();
        let xv = tape.constant(Tensor::from_f64(&[1, 2], &x).unwrap()).unwrap();
        let o = glu_forward(&mut tape, xv, &p).unwrap();

        // by hand: u_j = swish(Σ_i x_i W_u[i][j]) etc.
        let lin = |w: &[f64], j: usize| x[0] * w[j] + x[1] * w[2 + j];
        let h: Vec<f64> = (0..2).map(|j| swish(lin(&w_u, j)) * swish(lin(&w_v, j))).collect();
        let expected: Vec<f64> = (0..2).map(|j| h[0] * w_o[j] + h[1] * w_o[2 + j]).collect();
        let got = tape.value(o).data();
        for j in 0..2 {
            assert!((got[j] - expected[j]).abs() < 1e-15, "{got:?} vs {expected:?}");
        }
    }
}
