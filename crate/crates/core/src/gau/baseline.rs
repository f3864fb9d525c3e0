//! Multi-head self-attention followed by a vanilla FFN, each with a
//! residual connection and post-normalization.

use crate::autodiff::{Mode, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{layer_norm, var_norm, NormConfig};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

use super::{fan_in_init, ParamSet};

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineConfig {
    pub d_h: usize,
    pub heads: usize,
    /// FFN width, `4·d_h` by default.
    pub d_ff: usize,
    pub hidden_dropout: f64,
    pub attn_dropout: f64,
    pub norm: NormConfig,
    /// Mean-centred layer norm with gain and bias instead of `var_norm`.
    pub classic_layer_norm: bool,
}

impl BaselineConfig {
    pub fn new(d_h: usize, heads: usize) -> Self {
        Self {
            d_h,
            heads,
            d_ff: 4 * d_h,
            hidden_dropout: 0.0,
            attn_dropout: 0.0,
            norm: NormConfig::default(),
            classic_layer_norm: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_h.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "head count {} must divide d_h = {}",
                self.heads, self.d_h
            )));
        }
        for (name, r) in [("hidden_dropout", self.hidden_dropout), ("attn_dropout", self.attn_dropout)] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("{name} = {r} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineParams<T> {
    /// Per-head projections stacked along the output axis: `[d_h, H·(d_h/H)]`.
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_out: Tensor<T>,
    pub ffn_w_u: Tensor<T>,
    pub ffn_w_o: Tensor<T>,
    /// Gains and biases, present only for classic layer norm.
    pub norms: Option<[Tensor<T>; 4]>,
}

#[derive(Clone, Copy, Debug)]
pub struct BaselineVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_out: Var,
    pub ffn_w_u: Var,
    pub ffn_w_o: Var,
    pub norms: Option<[Var; 4]>,
}

const NORM_NAMES: [&str; 4] = ["ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias"];

impl<T: Element> BaselineParams<T> {
    pub fn init(cfg: &BaselineConfig, rng: &mut Rng) -> Self {
        let d = cfg.d_h;
        Self {
            w_q: fan_in_init(d, d, rng),
            w_k: fan_in_init(d, d, rng),
            w_v: fan_in_init(d, d, rng),
            w_out: fan_in_init(d, d, rng),
            ffn_w_u: fan_in_init(d, cfg.d_ff, rng),
            ffn_w_o: fan_in_init(cfg.d_ff, d, rng),
            norms: cfg.classic_layer_norm.then(|| {
                [
                    Tensor::ones(&[d]),
                    Tensor::zeros(&[d]),
                    Tensor::ones(&[d]),
                    Tensor::zeros(&[d]),
                ]
            }),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Result<BaselineVars> {
        let v = self.bind_all(tape)?;
        Ok(BaselineVars::from_slice(&v))
    }
}

impl BaselineVars {
    /// Builds from vars in `BaselineParams::named()` order; ten vars means
    /// layer-norm gains and biases are present.
    pub fn from_slice(v: &[Var]) -> Self {
        Self {
            w_q: v[0],
            w_k: v[1],
            w_v: v[2],
            w_out: v[3],
            ffn_w_u: v[4],
            ffn_w_o: v[5],
            norms: (v.len() >= 10).then(|| [v[6], v[7], v[8], v[9]]),
        }
    }
}

impl<T: Element> ParamSet<T> for BaselineParams<T> {
    fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v: Vec<(String, &Tensor<T>)> = vec![
            ("w_q".into(), &self.w_q),
            ("w_k".into(), &self.w_k),
            ("w_v".into(), &self.w_v),
            ("w_out".into(), &self.w_out),
            ("ffn_w_u".into(), &self.ffn_w_u),
            ("ffn_w_o".into(), &self.ffn_w_o),
        ];
        if let Some(n) = &self.norms {
            v.extend(NORM_NAMES.iter().map(|s| s.to_string()).zip(n.iter()));
        }
        v
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut v: Vec<(String, &mut Tensor<T>)> = vec![
            ("w_q".into(), &mut self.w_q),
            ("w_k".into(), &mut self.w_k),
            ("w_v".into(), &mut self.w_v),
            ("w_out".into(), &mut self.w_out),
            ("ffn_w_u".into(), &mut self.ffn_w_u),
            ("ffn_w_o".into(), &mut self.ffn_w_o),
        ];
        if let Some(n) = &mut self.norms {
            v.extend(NORM_NAMES.iter().map(|s| s.to_string()).zip(n.iter_mut()));
        }
        v
    }
}

fn residual_norm<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    o: Var,
    cfg: &BaselineConfig,
    gain_bias: Option<(Var, Var)>,
) -> Result<Var> {
    let r = tape.add(x, o)?;
    match gain_bias {
        Some((g, b)) => layer_norm(tape, r, g, b, cfg.norm.eps),
        None => var_norm(tape, r, &cfg.norm),
    }
}

/// `[B, n, H·dk] → [B, H, n, dk]`
fn split_heads<T: Element>(tape: &mut Tape<T>, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, n, d) = (s[0], s[1], s[2]);
    let x = tape.reshape(x, &[b, n, heads, d / heads])?;
    tape.permute(x, &[0, 2, 1, 3])
}

/// MHSA with `A_i = softmax(Q_i K_iᵀ / √d_h)` and residual + norm, then
/// `X* = gelu(X_A W_u) W_o` with residual + norm.
pub fn mhsa_ffn_forward<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    p: &BaselineVars,
    cfg: &BaselineConfig,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Var> {
    cfg.validate()?;
    let shape = tape.shape(x).to_vec();
    if shape.len() < 2 || shape[shape.len() - 1] != cfg.d_h {
        return Err(Error::shape("mhsa_ffn_forward", &shape, &[cfg.d_h]));
    }
    let (n, d) = (shape[shape.len() - 2], cfg.d_h);
    let batch: usize = shape[..shape.len() - 2].iter().product();
    let x3 = tape.reshape(x, &[batch, n, d])?;

    let q = tape.matmul(x3, p.w_q)?;
    let k = tape.matmul(x3, p.w_k)?;
    let v = tape.matmul(x3, p.w_v)?;
    let q = split_heads(tape, q, cfg.heads)?;
    let k = split_heads(tape, k, cfg.heads)?;
    let v = split_heads(tape, v, cfg.heads)?;
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let logits = tape.scale(logits, 1.0 / (d as f64).sqrt())?;
    let a = tape.row_softmax(logits)?;
    let a = tape.dropout(a, cfg.attn_dropout, mode, rng)?;
    let heads = tape.matmul(a, v)?;
    let merged = tape.permute(heads, &[0, 2, 1, 3])?;
    let merged = tape.reshape(merged, &[batch, n, d])?;
    let o = tape.matmul(merged, p.w_out)?;
    let o = tape.dropout(o, cfg.hidden_dropout, mode, rng)?;
    let norm1 = p.norms.map(|n| (n[0], n[1]));
    let xa = residual_norm(tape, x3, o, cfg, norm1)?;

    let h = tape.matmul(xa, p.ffn_w_u)?;
    let h = tape.gelu(h)?;
    let f = tape.matmul(h, p.ffn_w_o)?;
    let f = tape.dropout(f, cfg.hidden_dropout, mode, rng)?;
    let norm2 = p.norms.map(|n| (n[2], n[3]));
    let out = residual_norm(tape, xa, f, cfg, norm2)?;
    tape.reshape(out, &shape)
}
