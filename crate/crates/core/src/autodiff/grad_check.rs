//! Central finite-difference gradient oracle.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::tape::{Tape, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Perturbation size for `(f(x+ε) − f(x−ε)) / 2ε`.
    pub eps: f64,
    /// Denominator floor: error is `|a − n| / max(|a|, |n|, floor)`, so
    /// gradients smaller than the floor are compared absolutely.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, flat element index) of the worst element.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<(Tape<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::NonScalarLoss(tape.shape(out).to_vec()));
    }
    Ok((tape, vars, out))
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences in float64, over every element of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let (mut tape, vars, out) = evaluate(&f, inputs)?;
    let grads = tape.backward(out)?;
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[k].shape());
        let analytic = grads.get(*var).unwrap_or(&zeros);
        for e in 0..inputs[k].numel() {
            let x0 = inputs[k].data()[e];
            probe[k].data_mut()[e] = x0 + cfg.eps;
            let (t, _, o) = evaluate(&f, &probe)?;
            let plus = t.value(o).item();
            probe[k].data_mut()[e] = x0 - cfg.eps;
            let (t, _, o) = evaluate(&f, &probe)?;
            let minus = t.value(o).item();
            probe[k].data_mut()[e] = x0;

            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let a = analytic.data()[e];
            let denom = a.abs().max(numeric.abs()).max(cfg.floor);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_err || rel.is_nan() {
                report.max_rel_err = rel;
                report.worst = (k, e);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Deterministic random weights for turning a tensor output into a scalar
/// with non-degenerate gradients: `Σ out ⊙ w`.
pub fn weighted_sum(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = crate::rng::keyed(seed, &[0xfeed]);
    let w = Tensor::<f64>::uniform(tape.shape(out), -1.0, 1.0, &mut rng);
    let p = tape.mul_const(out, &w)?;
    tape.sum(p)
}
