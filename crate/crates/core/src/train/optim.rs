use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gau::ParamSet;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Parameters whose name contains any of these substrings are not decayed.
    pub no_decay: Vec<String>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 0.01,
            no_decay: ["gamma", "beta", "embedding", "norm", "bias"].map(String::from).to_vec(),
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("adam eps must be positive and weight_decay non-negative".into()));
        }
        Ok(())
    }

    pub fn decays(&self, name: &str) -> bool {
        !self.no_decay.iter().any(|s| name.contains(s.as_str()))
    }
}

/// First and second moments per parameter, in `named()` order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn new<P: ParamSet<T>>(params: &P) -> Self {
        let zeros: Vec<Tensor<T>> = params.named().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// Checks every gradient for NaN or infinity, naming the first bad tensor.
pub fn check_finite<T: Element>(names: &[String], grads: &[Tensor<T>]) -> Result<()> {
    for (name, g) in names.iter().zip(grads) {
        let bad: Vec<usize> = g
            .data()
            .iter()
            .enumerate()
            .filter(|(_, x)| !x.is_finite())
            .map(|(i, _)| i)
            .collect();
        if let Some(&first) = bad.first() {
            return Err(Error::NonFiniteGradient {
                name: name.clone(),
                count: bad.len(),
                first,
            });
        }
    }
    Ok(())
}

/// One AdamW update with bias-corrected moments and decoupled decay:
/// `p ← p − lr·m̂/(√v̂ + ε) − lr·wd·p`.
pub fn adamw_step<T: Element, P: ParamSet<T>>(
    params: &mut P,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    if grads.len() != names.len() || state.m.len() != names.len() || state.v.len() != names.len() {
        return Err(Error::Input(format!(
            "{} parameters, {} gradients, {} moment tensors",
            names.len(),
            grads.len(),
            state.m.len()
        )));
    }
    check_finite(&names, grads)?;
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, (name, p)) in params.named_mut().into_iter().enumerate() {
        let g = &grads[i];
        if g.shape() != p.shape() {
            return Err(Error::shape("adamw_step", p.shape(), g.shape()));
        }
        let wd = if cfg.decays(&name) { cfg.weight_decay } else { 0.0 };
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            let gf = g.f64();
            let mf = b1 * m.f64() + (1.0 - b1) * gf;
            let vf = b2 * v.f64() + (1.0 - b2) * gf * gf;
            *m = T::of(mf);
            *v = T::of(vf);
            let pf = p.f64();
            let update = (mf / c1) / ((vf / c2).sqrt() + cfg.eps) + wd * pf;
            *p = T::of(pf - lr * update);
        }
    }
    Ok(())
}
