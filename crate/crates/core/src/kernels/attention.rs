//! Attention score kernels.
//!
//! All kernels take `q, k: [..., n, s]` and return `A: [..., n, n]`. An
//! optional `key_lens` gives the number of valid keys per leading-batch
//! entry; keys past it are masked, and `n` in every scale or denominator
//! counts only valid keys.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Divisor of the ReLU² scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Denominator {
    /// `n²`
    N2,
    /// `n`
    N,
    /// `n·s`
    Ns,
    /// `s²`
    S2,
}

impl Denominator {
    pub const ALL: [Denominator; 4] = [Denominator::N2, Denominator::N, Denominator::Ns, Denominator::S2];

    pub fn value(self, n: usize, s: usize) -> f64 {
        let (n, s) = (n as f64, s as f64);
        match self {
            Denominator::N2 => n * n,
            Denominator::N => n,
            Denominator::Ns => n * s,
            Denominator::S2 => s * s,
        }
    }

    fn suffix(self) -> &'static str {
        match self {
            Denominator::N2 => "n2",
            Denominator::N => "n",
            Denominator::Ns => "ns",
            Denominator::S2 => "s2",
        }
    }
}

/// Which normalization turns `q·k` logits into attention weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum KernelVariant {
    /// `ReLU²(qkᵀ/√d_h) / D`, rows not normalized.
    Relu2Div(Denominator),
    /// `ReLU²(qkᵀ/√d_h) / (c_i · n · s)` with `c_i` the row sum of the ReLU² scores.
    ScaledRelu2,
    /// `softmax(qkᵀ/√d_h)`.
    Softmax,
    /// `softmax(log_base(n) / √d_h · qkᵀ)`.
    SoftmaxPlus,
}

impl KernelVariant {
    pub fn is_softmax_family(self) -> bool {
        matches!(self, KernelVariant::Softmax | KernelVariant::SoftmaxPlus)
    }

    pub fn all() -> Vec<KernelVariant> {
        let mut v: Vec<_> = Denominator::ALL.iter().map(|&d| KernelVariant::Relu2Div(d)).collect();
        v.extend([KernelVariant::ScaledRelu2, KernelVariant::Softmax, KernelVariant::SoftmaxPlus]);
        v
    }
}

impl fmt::Display for KernelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelVariant::Relu2Div(d) => write!(f, "relu2_div_{}", d.suffix()),
            KernelVariant::ScaledRelu2 => f.write_str("scaled_relu2"),
            KernelVariant::Softmax => f.write_str("softmax"),
            KernelVariant::SoftmaxPlus => f.write_str("softmax_plus"),
        }
    }
}

impl FromStr for KernelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "softmax" => KernelVariant::Softmax,
            "softmax_plus" => KernelVariant::SoftmaxPlus,
            "scaled_relu2" => KernelVariant::ScaledRelu2,
            "relu2_div_n2" => KernelVariant::Relu2Div(Denominator::N2),
            "relu2_div_n" => KernelVariant::Relu2Div(Denominator::N),
            "relu2_div_ns" => KernelVariant::Relu2Div(Denominator::Ns),
            "relu2_div_s2" => KernelVariant::Relu2Div(Denominator::S2),
            other => {
                return Err(Error::Config(format!(
                    "unknown kernel `{other}` (expected softmax, softmax_plus, scaled_relu2 or relu2_div_{{n2,n,ns,s2}})"
                )))
            }
        })
    }
}

impl TryFrom<String> for KernelVariant {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<KernelVariant> for String {
    fn from(k: KernelVariant) -> String {
        k.to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionKernelSpec {
    pub variant: KernelVariant,
    /// Query/key width.
    pub s: usize,
    /// Hidden size; logits are divided by `√d_h`.
    pub d_h: usize,
    /// Length at which `softmax_plus` coincides with `softmax`.
    pub base_len: usize,
    /// Guard added to `c_i` in the scaled ReLU² kernel.
    pub eps: f64,
}

impl AttentionKernelSpec {
    pub const DEFAULT_EPS: f64 = 1e-12;
    pub const DEFAULT_BASE_LEN: usize = 512;

    pub fn new(variant: KernelVariant, s: usize, d_h: usize) -> Self {
        Self {
            variant,
            s,
            d_h,
            base_len: Self::DEFAULT_BASE_LEN,
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.s == 0 || self.d_h == 0 {
            return Err(Error::Config(format!(
                "kernel needs s > 0 and d_h > 0, got s = {}, d_h = {}",
                self.s, self.d_h
            )));
        }
        if self.base_len < 2 {
            return Err(Error::Config(format!("kernel base_len must exceed 1, got {}", self.base_len)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("kernel eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }

    /// The `softmax_plus` multiplier `log(n) / log(base_len)`.
    pub fn length_scale(&self, n: usize) -> f64 {
        (n as f64).ln() / (self.base_len as f64).ln()
    }
}

struct Logits {
    logits: Var,
    batch: usize,
    n: usize,
    /// valid key count per batch entry
    lens: Vec<usize>,
}

impl Logits {
    fn keep_mask(&self) -> Option<Vec<bool>> {
        if self.lens.iter().all(|&l| l == self.n) {
            return None;
        }
        let n = self.n;
        let mut keep = Vec::with_capacity(self.batch * n * n);
        for &len in &self.lens {
            for _ in 0..n {
                keep.extend((0..n).map(|j| j < len));
            }
        }
        Some(keep)
    }
}

fn wrong_variant(spec: &AttentionKernelSpec, op: &str) -> Error {
    Error::Config(format!("{op} called with kernel {}", spec.variant))
}

fn expect_variant(spec: &AttentionKernelSpec, ok: bool, op: &str) -> Result<()> {
    if !ok {
        return Err(wrong_variant(spec, op));
    }
    spec.validate()
}

/// `q kᵀ`, unscaled, plus the batch bookkeeping.
fn raw_logits<T: Element>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    key_lens: Option<&[usize]>,
) -> Result<Logits> {
    let (sq, sk) = (tape.shape(q).to_vec(), tape.shape(k).to_vec());
    if sq.len() < 2 || sq != sk {
        return Err(Error::shape("attention", &sq, &sk));
    }
    let n = sq[sq.len() - 2];
    if n == 0 {
        return Err(Error::Input("attention over an empty sequence".into()));
    }
    let batch: usize = sq[..sq.len() - 2].iter().product();
    let lens = match key_lens {
        None => vec![n; batch],
        Some(l) => {
            if l.len() != batch || l.iter().any(|&x| x == 0 || x > n) {
                return Err(Error::Input(format!(
                    "key lengths {l:?} invalid for {batch} sequences of length {n}"
                )));
            }
            l.to_vec()
        }
    };
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    Ok(Logits {
        logits,
        batch,
        n,
        lens,
    })
}

/// Multiplies every entry of batch slice `b` by `factors[b]`.
fn scale_per_batch<T: Element>(tape: &mut Tape<T>, x: Var, factors: &[f64]) -> Result<Var> {
    if factors.windows(2).all(|w| w[0] == w[1]) {
        return tape.scale(x, factors[0]);
    }
    let per = tape.value(x).numel() / factors.len();
    let data: Vec<T> = factors
        .iter()
        .flat_map(|&f| std::iter::repeat_n(T::of(f), per))
        .collect();
    let c = Tensor::new(tape.shape(x), data)?;
    tape.mul_const(x, &c)
}

/// `ReLU²(qkᵀ/√d_h)` with masked keys zeroed.
fn relu2_scores<T: Element>(tape: &mut Tape<T>, lg: &Logits, d_h: usize) -> Result<Var> {
    let scaled = tape.scale(lg.logits, 1.0 / (d_h as f64).sqrt())?;
    let r = tape.relu(scaled)?;
    let r = tape.square(r)?;
    match lg.keep_mask() {
        Some(keep) => tape.masked_fill(r, &keep, 0.0),
        None => Ok(r),
    }
}

/// `A = ReLU²(qkᵀ/√d_h) / D` with `D ∈ {n², n, n·s, s²}`.
pub fn attn_scores_relu2<T: Element>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    spec: &AttentionKernelSpec,
    key_lens: Option<&[usize]>,
) -> Result<Var> {
    let denom = match spec.variant {
        KernelVariant::Relu2Div(d) => d,
        _ => return Err(wrong_variant(spec, "attn_scores_relu2")),
    };
    spec.validate()?;
    let lg = raw_logits(tape, q, k, key_lens)?;
    let r = relu2_scores(tape, &lg, spec.d_h)?;
    let factors: Vec<f64> = lg.lens.iter().map(|&n| 1.0 / denom.value(n, spec.s)).collect();
    scale_per_batch(tape, r, &factors)
}

/// `a_ij = r_ij / (max(c_i, eps) · n · s)` where `r = ReLU²(qkᵀ/√d_h)` and
/// `c_i = Σ_j r_ij`. Rows with `c_i ≥ eps` sum to exactly `1/(n·s)`; rows
/// without a positive logit are zero.
pub fn attn_scores_scaled_relu2<T: Element>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    spec: &AttentionKernelSpec,
    key_lens: Option<&[usize]>,
) -> Result<Var> {
    expect_variant(spec, spec.variant == KernelVariant::ScaledRelu2, "attn_scores_scaled_relu2")?;
    let lg = raw_logits(tape, q, k, key_lens)?;
    let r = relu2_scores(tape, &lg, spec.d_h)?;
    let c = tape.sum_last(r)?;
    // max(c, eps) = relu(c - eps) + eps
    let c = tape.add_scalar(c, -spec.eps)?;
    let c = tape.relu(c)?;
    let c = tape.add_scalar(c, spec.eps)?;
    let inv = tape.pow(c, -1.0)?;
    let factors: Vec<f64> = lg.lens.iter().map(|&n| 1.0 / (n * spec.s) as f64).collect();
    let inv = scale_per_batch(tape, inv, &factors)?;
    tape.mul_per_row(r, inv)
}

fn masked_softmax<T: Element>(tape: &mut Tape<T>, lg: &Logits, scaled: Var) -> Result<Var> {
    let x = match lg.keep_mask() {
        Some(keep) => tape.masked_fill(scaled, &keep, f64::NEG_INFINITY)?,
        None => scaled,
    };
    tape.row_softmax(x)
}

/// `A = softmax(qkᵀ/√d_h)`.
pub fn attn_scores_softmax<T: Element>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    spec: &AttentionKernelSpec,
    key_lens: Option<&[usize]>,
) -> Result<Var> {
    expect_variant(spec, spec.variant == KernelVariant::Softmax, "attn_scores_softmax")?;
    let lg = raw_logits(tape, q, k, key_lens)?;
    let scaled = tape.scale(lg.logits, 1.0 / (spec.d_h as f64).sqrt())?;
    masked_softmax(tape, &lg, scaled)
}

/// `A = softmax(log(n)/log(base_len) / √d_h · qkᵀ)`.
pub fn attn_scores_softmax_plus<T: Element>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    spec: &AttentionKernelSpec,
    key_lens: Option<&[usize]>,
) -> Result<Var> {
    expect_variant(spec, spec.variant == KernelVariant::SoftmaxPlus, "attn_scores_softmax_plus")?;
    let lg = raw_logits(tape, q, k, key_lens)?;
    let root = (spec.d_h as f64).sqrt();
    let factors: Vec<f64> = lg.lens.iter().map(|&n| spec.length_scale(n) / root).collect();
    let scaled = scale_per_batch(tape, lg.logits, &factors)?;
    masked_softmax(tape, &lg, scaled)
}

/// Dispatches on `spec.variant`.
pub fn attention_scores<T: Element>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    spec: &AttentionKernelSpec,
    key_lens: Option<&[usize]>,
) -> Result<Var> {
    match spec.variant {
        KernelVariant::Relu2Div(_) => attn_scores_relu2(tape, q, k, spec, key_lens),
        KernelVariant::ScaledRelu2 => attn_scores_scaled_relu2(tape, q, k, spec, key_lens),
        KernelVariant::Softmax => attn_scores_softmax(tape, q, k, spec, key_lens),
        KernelVariant::SoftmaxPlus => attn_scores_softmax_plus(tape, q, k, spec, key_lens),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // q = rows of logits against k = I, so qkᵀ equals the given logits.
    fn scores(variant: KernelVariant, logits: &[f64], n: usize, s: usize, d_h: usize) -> Vec<f64> {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::from_f64(&[n, n], logits).unwrap()).unwrap();
        let k = tape.constant(Tensor::eye(n)).unwrap();
        let spec = AttentionKernelSpec::new(variant, s, d_h);
        let a = attention_scores(&mut tape, q, k, &spec, None).unwrap();
        tape.value(a).data().to_vec()
    }

    #[test]
    fn names_roundtrip() {
        for k in KernelVariant::all() {
            assert_eq!(k.to_string().parse::<KernelVariant>().unwrap(), k);
        }
        assert!("relu2".parse::<KernelVariant>().is_err());
    }

    #[test]
    fn relu2_ns_example() {
        let logits = [1.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let a = scores(KernelVariant::Relu2Div(Denominator::Ns), &logits, 3, 128, 1);
        assert_eq!(&a[..3], &[1.0 / 384.0, 0.0, 0.0]);
    }

    #[test]
    fn relu2_nonpositive_row_is_zero() {
        let logits = [-1.0, -2.0, 0.0, -0.5];
        let a = scores(KernelVariant::Relu2Div(Denominator::N2), &logits, 2, 4, 1);
        assert!(a.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn scaled_relu2_example() {
        let logits = [1.0, -1.0, -3.0, -4.0];
        let a = scores(KernelVariant::ScaledRelu2, &logits, 2, 128, 1);
        assert!((a[0] - 1.0 / 256.0).abs() < 1e-17);
        assert_eq!(a[1], 0.0);
        assert_eq!(&a[2..], &[0.0, 0.0]);
    }

    #[test]
    fn softmax_plus_degenerate_lengths() {
        let a = scores(KernelVariant::SoftmaxPlus, &[3.7], 1, 4, 1);
        assert_eq!(a, vec![1.0]);
        let spec = AttentionKernelSpec::new(KernelVariant::SoftmaxPlus, 4, 16);
        assert_eq!(spec.length_scale(512), 1.0);
        assert!((spec.length_scale(512 * 512) / 4.0 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn wrong_variant_is_config_error() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::eye(2)).unwrap();
        let spec = AttentionKernelSpec::new(KernelVariant::Softmax, 2, 2);
        assert!(matches!(attn_scores_relu2(&mut tape, q, q, &spec, None), Err(Error::Config(_))));
        assert!(matches!(attn_scores_softmax_plus(&mut tape, q, q, &spec, None), Err(Error::Config(_))));
    }

    #[test]
    fn empty_sequence_rejected() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::zeros(&[0, 2])).unwrap();
        let spec = AttentionKernelSpec::new(KernelVariant::Softmax, 2, 2);
        assert!(attention_scores(&mut tape, q, q, &spec, None).is_err());
    }

    #[test]
    fn key_mask_restricts_support_and_length() {
        let mut rng = crate::rng::seeded(5);
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::randn(&[2, 4, 3], 0.0, 1.0, &mut rng)).unwrap();
        let k = tape.constant(Tensor::randn(&[2, 4, 3], 0.0, 1.0, &mut rng)).unwrap();
        let spec = AttentionKernelSpec::new(KernelVariant::SoftmaxPlus, 3, 3);
        let a = attention_scores(&mut tape, q, k, &spec, Some(&[4, 2])).unwrap();
        let a = tape.value(a).clone();
        for i in 0..4 {
            assert_eq!(a.at(&[1, i, 2]), 0.0);
            assert_eq!(a.at(&[1, i, 3]), 0.0);
            let s: f64 = (0..4).map(|j| a.at(&[1, i, j])).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }

        // masked batch entry equals running the truncated sequence alone
        let mut t2 = Tape::<f64>::new();
        let q2 = t2.constant(sub_block(tape.value(q), 1, 2)).unwrap();
        let k2 = t2.constant(sub_block(tape.value(k), 1, 2)).unwrap();
        let a2 = attention_scores(&mut t2, q2, k2, &spec, None).unwrap();
        let a2 = t2.value(a2);
        for i in 0..2 {
            for j in 0..2 {
                assert!((a.at(&[1, i, j]) - a2.at(&[i, j])).abs() < 1e-15);
            }
        }
    }

    fn sub_block(t: &Tensor<f64>, b: usize, len: usize) -> Tensor<f64> {
        let s = t.shape()[2];
        let mut v = Vec::new();
        for i in 0..len {
            for j in 0..s {
                v.push(t.at(&[b, i, j]));
            }
        }
        Tensor::new(&[len, s], v).unwrap()
    }
}
