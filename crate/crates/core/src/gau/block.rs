use crate::autodiff::{Mode, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{apply_rope, attention_scores, var_norm, AttentionKernelSpec, NormConfig, RopeConfig};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

use super::{fan_in_init, ParamSet};

/// Weights of one gated attention unit.
///
/// `gamma_*`/`beta_*` are the per-dimension scales and offsets that turn
/// the shared representation `Z` into queries and keys.
#[derive(Clone, Debug, PartialEq)]
pub struct GauParams<T> {
    pub w_u: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_o: Tensor<T>,
    pub w_z: Tensor<T>,
    pub gamma_q: Tensor<T>,
    pub beta_q: Tensor<T>,
    pub gamma_k: Tensor<T>,
    pub beta_k: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct GauVars {
    pub w_u: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub w_z: Var,
    pub gamma_q: Var,
    pub beta_q: Var,
    pub gamma_k: Var,
    pub beta_k: Var,
}

impl<T: Element> GauParams<T> {
    pub fn init(d_h: usize, d_ff: usize, s: usize, rng: &mut Rng) -> Self {
        Self {
            w_u: fan_in_init(d_h, d_ff, rng),
            w_v: fan_in_init(d_h, d_ff, rng),
            w_o: fan_in_init(d_ff, d_h, rng),
            w_z: fan_in_init(d_h, s, rng),
            gamma_q: Tensor::ones(&[s]),
            beta_q: Tensor::zeros(&[s]),
            gamma_k: Tensor::ones(&[s]),
            beta_k: Tensor::zeros(&[s]),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Result<GauVars> {
        let v = self.bind_all(tape)?;
        Ok(GauVars::from_slice(&v))
    }
}

impl GauVars {
    /// Builds from vars in `GauParams::named()` order.
    pub fn from_slice(v: &[Var]) -> Self {
        Self {
            w_u: v[0],
            w_v: v[1],
            w_o: v[2],
            w_z: v[3],
            gamma_q: v[4],
            beta_q: v[5],
            gamma_k: v[6],
            beta_k: v[7],
        }
    }
}

impl<T: Element> ParamSet<T> for GauParams<T> {
    fn named(&self) -> Vec<(String, &Tensor<T>)> {
        vec![
            ("w_u".into(), &self.w_u),
            ("w_v".into(), &self.w_v),
            ("w_o".into(), &self.w_o),
            ("w_z".into(), &self.w_z),
            ("gamma_q".into(), &self.gamma_q),
            ("beta_q".into(), &self.beta_q),
            ("gamma_k".into(), &self.gamma_k),
            ("beta_k".into(), &self.beta_k),
        ]
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![
            ("w_u".into(), &mut self.w_u),
            ("w_v".into(), &mut self.w_v),
            ("w_o".into(), &mut self.w_o),
            ("w_z".into(), &mut self.w_z),
            ("gamma_q".into(), &mut self.gamma_q),
            ("beta_q".into(), &mut self.beta_q),
            ("gamma_k".into(), &mut self.gamma_k),
            ("beta_k".into(), &mut self.beta_k),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockConfig {
    pub d_h: usize,
    pub d_ff: usize,
    pub s: usize,
    pub kernel: AttentionKernelSpec,
    pub hidden_dropout: f64,
    pub attn_dropout: f64,
    pub rope: RopeConfig,
    pub norm: NormConfig,
    /// Rotate keys as well as queries.
    pub rope_both: bool,
    /// Return `var_norm(x + O)` instead of `O`.
    pub post_norm: bool,
}

impl BlockConfig {
    /// `d_ff = 2·d_h`, softmax_plus attention, RoPE on queries and keys,
    /// post-norm, no dropout.
    pub fn new(d_h: usize, s: usize) -> Self {
        Self {
            d_h,
            d_ff: 2 * d_h,
            s,
            kernel: AttentionKernelSpec::new(crate::kernels::KernelVariant::SoftmaxPlus, s, d_h),
            hidden_dropout: 0.0,
            attn_dropout: 0.0,
            rope: RopeConfig::new(s),
            norm: NormConfig::default(),
            rope_both: true,
            post_norm: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("hidden_dropout", self.hidden_dropout), ("attn_dropout", self.attn_dropout)] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("{name} = {r} outside [0, 1)")));
            }
        }
        if self.d_h == 0 || self.d_ff == 0 || self.s == 0 {
            return Err(Error::Config("block dimensions must be positive".into()));
        }
        if self.s > self.d_ff {
            return Err(Error::Config(format!("s = {} exceeds d_ff = {}", self.s, self.d_ff)));
        }
        if self.kernel.s != self.s || self.kernel.d_h != self.d_h || self.rope.dim != self.s {
            return Err(Error::Config("kernel and rope dimensions must match the block".into()));
        }
        self.kernel.validate()?;
        self.rope.validate()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GauOutput {
    pub out: Var,
    /// Attention matrix after normalization (before dropout).
    pub attn: Var,
    /// Queries and keys after the affine maps and RoPE.
    pub q: Var,
    pub k: Var,
}

/// One gated attention unit over `x: [..., n, d_h]`.
///
/// ```text
/// Z = swish(x W_z)
/// Q = rope(γ_q ⊙ Z + β_q),  K = rope(γ_k ⊙ Z + β_k)
/// A = kernel(Q, K)
/// U = swish(x W_u),  V = swish(x W_v)
/// O = dropout((U ⊙ dropout(A) V) W_o)
/// out = var_norm(x + O)   (or O when post_norm is off)
/// ```
#[allow(clippy::too_many_arguments)]
pub fn gau_forward<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    p: &GauVars,
    cfg: &BlockConfig,
    positions: &[f64],
    key_lens: Option<&[usize]>,
    mode: Mode,
    rng: &mut Rng,
) -> Result<GauOutput> {
    let shape = tape.shape(x).to_vec();
    if shape.len() < 2 || shape[shape.len() - 1] != cfg.d_h {
        return Err(Error::shape("gau_forward", &shape, &[cfg.d_h]));
    }
    let n = shape[shape.len() - 2];
    if positions.len() != n {
        return Err(Error::shape("gau_forward positions", &shape, &[positions.len()]));
    }

    let z = tape.matmul(x, p.w_z)?;
    let z = tape.swish(z)?;
    let q = tape.hadamard(z, p.gamma_q)?;
    let q = tape.add(q, p.beta_q)?;
    let q = apply_rope(tape, q, positions, &cfg.rope)?;
    let k = tape.hadamard(z, p.gamma_k)?;
    let k = tape.add(k, p.beta_k)?;
    let k = if cfg.rope_both {
        apply_rope(tape, k, positions, &cfg.rope)?
    } else {
        k
    };
    let attn = attention_scores(tape, q, k, &cfg.kernel, key_lens)?;
    let a = tape.dropout(attn, cfg.attn_dropout, mode, rng)?;

    let u = tape.matmul(x, p.w_u)?;
    let u = tape.swish(u)?;
    let v = tape.matmul(x, p.w_v)?;
    let v = tape.swish(v)?;
    let av = tape.matmul(a, v)?;
    let h = tape.hadamard(u, av)?;
    let o = tape.matmul(h, p.w_o)?;
    let o = tape.dropout(o, cfg.hidden_dropout, mode, rng)?;

    let out = if cfg.post_norm {
        let r = tape.add(x, o)?;
        var_norm(tape, r, &cfg.norm)?
    } else {
        o
    };
    Ok(GauOutput { out, attn, q, k })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gau::{glu_forward, GluParams};
    use crate::kernels::KernelVariant;

    fn setup(n: usize, d_h: usize, s: usize, seed: u64) -> (Tensor<f64>, GauParams<f64>) {
        let mut rng = crate::rng::seeded(seed);
        let x = Tensor::randn(&[n, d_h], 0.0, 1.0, &mut rng);
        let mut p = GauParams::init(d_h, 2 * d_h, s, &mut rng);
        p.gamma_q = Tensor::randn(&[s], 1.0, 0.3, &mut rng);
        p.beta_k = Tensor::randn(&[s], 0.0, 0.3, &mut rng);
        (x, p)
    }

    #[test]
    fn single_token_softmax_reduces_to_glu() {
        let (x, p) = setup(1, 8, 4, 1);
        let mut cfg = BlockConfig::new(8, 4);
        cfg.kernel.variant = KernelVariant::Softmax;
        cfg.post_norm = false;
        let mut tape = Tape::new();
        let xv = tape.constant(x).unwrap();
        let vars = p.bind(&mut tape).unwrap();
        let mut rng = crate::rng::seeded(0);
        let out = gau_forward(&mut tape, xv, &vars, &cfg, &[0.0], None, Mode::Eval, &mut rng).unwrap();
        assert_eq!(tape.value(out.attn).data(), &[1.0]);

        let glu = GluParams {
            w_u: p.w_u.clone(),
            w_v: p.w_v.clone(),
            w_o: p.w_o.clone(),
        }
        .bind(&mut tape)
        .unwrap();
        let g = glu_forward(&mut tape, xv, &glu).unwrap();
        assert!(tape.value(out.out).max_abs_diff(tape.value(g)) < 1e-12);
    }

    #[test]
    fn zero_output_projection_gives_normalized_input() {
        let (x, mut p) = setup(5, 8, 4, 2);
        p.w_o = Tensor::zeros(&[16, 8]);
        let cfg = BlockConfig::new(8, 4);
        let mut tape = Tape::new();
        let xv = tape.constant(x).unwrap();
        let vars = p.bind(&mut tape).unwrap();
        let mut rng = crate::rng::seeded(0);
        let positions: Vec<f64> = (0..5).map(|i| i as f64).collect();
        let out = gau_forward(&mut tape, xv, &vars, &cfg, &positions, None, Mode::Eval, &mut rng).unwrap();
        let expected = var_norm(&mut tape, xv, &cfg.norm).unwrap();
        assert!(tape.value(out.out).max_abs_diff(tape.value(expected)) < 1e-15);
    }

    #[test]
    fn eval_mode_is_deterministic_and_rows_sum_to_one() {
        let (x, p) = setup(6, 8, 4, 3);
        let mut cfg = BlockConfig::new(8, 4);
        cfg.attn_dropout = 0.1;
        cfg.hidden_dropout = 0.1;
        let run = |seed| {
            let mut tape = Tape::<f32>::new();
            let xv = tape.constant(x.cast()).unwrap();
            let vars = GauParams {
                w_u: p.w_u.cast(),
                w_v: p.w_v.cast(),
                w_o: p.w_o.cast(),
                w_z: p.w_z.cast(),
                gamma_q: p.gamma_q.cast(),
                beta_q: p.beta_q.cast(),
                gamma_k: p.gamma_k.cast(),
                beta_k: p.beta_k.cast(),
            }
            .bind(&mut tape)
            .unwrap();
            let mut rng = crate::rng::seeded(seed);
            let positions: Vec<f64> = (0..6).map(|i| i as f64).collect();
            let o = gau_forward(&mut tape, xv, &vars, &cfg, &positions, None, Mode::Eval, &mut rng).unwrap();
            (tape.value(o.out).clone(), tape.value(o.attn).clone())
        };
        let (a, attn) = run(1);
        let (b, _) = run(2);
        assert_eq!(a, b);
        for row in attn.data().chunks(6) {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let (x, p) = setup(3, 8, 4, 4);
        let cfg = BlockConfig::new(8, 4);
        let mut tape = Tape::new();
        let xv = tape.constant(x).unwrap();
        let vars = p.bind(&mut tape).unwrap();
        let mut rng = crate::rng::seeded(0);
        assert!(gau_forward(&mut tape, xv, &vars, &cfg, &[0.0], None, Mode::Eval, &mut rng).is_err());
        let mut bad = cfg.clone();
        bad.s = 32;
        assert!(bad.validate().is_err());
    }
}
