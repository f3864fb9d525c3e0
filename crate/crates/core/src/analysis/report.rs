use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, Tape};
use crate::error::{Error, Result};
use crate::gau::gau_forward;
use crate::kernels::{attention_scores, var_norm, AttentionKernelSpec, KernelVariant};
use crate::rng::{self, stream};
use crate::tensor::Tensor;
use crate::train::{Batch, ModelConfig, ModelParams, CLS};

use super::stats::{entropy_rows, numerical_rank, sparsity, DEFAULT_RANK_TOL, DEFAULT_SPARSITY_TOL};

/// Score matrix under study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum AnalysisKernel {
    /// Raw logits `QKᵀ`.
    Qk,
    /// `ReLU²(QKᵀ/√d_h)`; constant denominators do not affect the statistics.
    Relu2,
    Kernel(KernelVariant),
}

impl AnalysisKernel {
    /// The three matrices compared in the rank/sparsity table.
    pub fn table() -> Vec<AnalysisKernel> {
        vec![
            AnalysisKernel::Qk,
            AnalysisKernel::Kernel(KernelVariant::Softmax),
            AnalysisKernel::Relu2,
        ]
    }
}

impl fmt::Display for AnalysisKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnalysisKernel::Qk => f.write_str("qk"),
            AnalysisKernel::Relu2 => f.write_str("relu2"),
            AnalysisKernel::Kernel(k) => k.fmt(f),
        }
    }
}

impl FromStr for AnalysisKernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qk" => Ok(AnalysisKernel::Qk),
            "relu2" => Ok(AnalysisKernel::Relu2),
            other => other.parse().map(AnalysisKernel::Kernel),
        }
    }
}

impl TryFrom<String> for AnalysisKernel {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<AnalysisKernel> for String {
    fn from(k: AnalysisKernel) -> String {
        k.to_string()
    }
}

/// Statistics of one `n × n` score matrix.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttnStats {
    pub kernel: String,
    pub n: usize,
    pub s: usize,
    pub seed: u64,
    pub rank: usize,
    pub rank_ratio: f64,
    pub sparsity: f64,
    /// NaN for `qk`, whose rows are not distributions.
    pub entropy_mean: f64,
    pub entropy_min: f64,
    pub entropy_max: f64,
    pub entropy_uniform_ref: f64,
}

pub const REPORT_HEADER: [&str; 11] = [
    "kernel",
    "n",
    "s",
    "seed",
    "rank",
    "rank_ratio",
    "sparsity",
    "entropy_mean",
    "entropy_min",
    "entropy_max",
    "entropy_uniform_ref",
];

/// Where queries and keys come from.
pub enum QkSource<'a> {
    /// I.i.d. standard normal `Q, K ∈ ℝ^{n×s}`, with `d_h = s`.
    Random { s: usize },
    /// Queries and keys of `layer` in a trained model, on a window of
    /// `tokens` chosen by the seed.
    Trained {
        params: &'a ModelParams<f32>,
        cfg: &'a ModelConfig,
        tokens: &'a [usize],
        layer: usize,
    },
}

impl QkSource<'_> {
    pub fn label(&self) -> String {
        match self {
            QkSource::Random { .. } => "random-init (i.i.d. Gaussian Q, K)".into(),
            QkSource::Trained { layer, .. } => format!("trained model, layer {layer}, held-out text"),
        }
    }

    fn s(&self) -> usize {
        match self {
            QkSource::Random { s } => *s,
            QkSource::Trained { cfg, .. } => cfg.s,
        }
    }

    /// `(q, k, d_h)` as `[n, s]` matrices.
    pub fn sample(&self, n: usize, seed: u64) -> Result<(Tensor<f64>, Tensor<f64>, usize)> {
        let mut r = rng::keyed(seed, &[stream::ANALYSIS, n as u64]);
        match self {
            QkSource::Random { s } => {
                let q = Tensor::randn(&[n, *s], 0.0, 1.0, &mut r);
                let k = Tensor::randn(&[n, *s], 0.0, 1.0, &mut r);
                Ok((q, k, *s))
            }
            QkSource::Trained {
                params,
                cfg,
                tokens,
                layer,
            } => {
                if *layer >= params.layers.len() {
                    return Err(Error::Config(format!(
                        "layer {layer} out of range for a {}-layer model",
                        params.layers.len()
                    )));
                }
                if n > cfg.max_len || n == 0 || tokens.len() + 1 < n {
                    return Err(Error::Input(format!(
                        "cannot take a window of {n} tokens (max_len {}, {} held-out tokens)",
                        cfg.max_len,
                        tokens.len()
                    )));
                }
                use rand::Rng as _;
                let start = r.random_range(0..=tokens.len() + 1 - n);
                let mut ids = vec![CLS];
                ids.extend_from_slice(&tokens[start..start + n - 1]);
                let batch = Batch {
                    batch: 1,
                    len: n,
                    input_ids: ids,
                    targets: vec![None; n],
                    key_lens: vec![n],
                    positions: (0..n).map(|i| i as f64).collect(),
                };
                let mut tape = Tape::<f32>::new();
                let vars = params.bind(&mut tape)?;
                let block = cfg.block();
                let x = tape.embedding(vars.embedding, &batch.input_ids, &[1, n])?;
                let mut h = var_norm(&mut tape, x, &cfg.norm)?;
                for l in &vars.layers[..*layer] {
                    h = gau_forward(&mut tape, h, l, &block, &batch.positions, None, Mode::Eval, &mut r)?.out;
                }
                let out = gau_forward(&mut tape, h, &vars.layers[*layer], &block, &batch.positions, None, Mode::Eval, &mut r)?;
                let q = tape.value(out.q).cast::<f64>().reshape(&[n, cfg.s])?;
                let k = tape.value(out.k).cast::<f64>().reshape(&[n, cfg.s])?;
                Ok((q, k, cfg.d_h))
            }
        }
    }
}

/// The score matrix of `kernel` for the given queries and keys, in `f64`.
pub fn score_matrix(kernel: AnalysisKernel, q: &Tensor<f64>, k: &Tensor<f64>, d_h: usize) -> Result<Tensor<f64>> {
    let s = *q.shape().last().unwrap_or(&0);
    match kernel {
        AnalysisKernel::Qk => q.matmul(&k.t()?),
        AnalysisKernel::Relu2 => {
            let scale = 1.0 / (d_h as f64).sqrt();
            Ok(q.matmul(&k.t()?)?.map(|x| {
                let r = (x * scale).max(0.0);
                r * r
            }))
        }
        AnalysisKernel::Kernel(v) => {
            let spec = AttentionKernelSpec::new(v, s, d_h);
            let mut tape = Tape::<f64>::new();
            let qv = tape.constant(q.clone())?;
            let kv = tape.constant(k.clone())?;
            let a = attention_scores(&mut tape, qv, kv, &spec, None)?;
            Ok(tape.value(a).clone())
        }
    }
}

pub fn attn_stats(kernel: AnalysisKernel, a: &Tensor<f64>, s: usize, seed: u64) -> Result<AttnStats> {
    let n = a.shape()[0];
    let rank = numerical_rank(a, DEFAULT_RANK_TOL)?;
    let (mean, min, max) = if kernel == AnalysisKernel::Qk {
        (f64::NAN, f64::NAN, f64::NAN)
    } else {
        let h = entropy_rows(a)?;
        let mean = h.iter().sum::<f64>() / h.len().max(1) as f64;
        let min = h.iter().copied().fold(f64::INFINITY, f64::min);
        let max = h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (mean, min, max)
    };
    Ok(AttnStats {
        kernel: kernel.to_string(),
        n,
        s,
        seed,
        rank,
        rank_ratio: rank as f64 / n.max(1) as f64,
        sparsity: sparsity(a, DEFAULT_SPARSITY_TOL)?,
        entropy_mean: mean,
        entropy_min: min,
        entropy_max: max,
        entropy_uniform_ref: (n as f64).ln(),
    })
}

/// One row per `(kernel, n, seed)`, ordered kernel-major, then length, then
/// seed. All kernels at a given `(n, seed)` see the same queries and keys.
pub fn attn_report(
    source: &QkSource<'_>,
    kernels: &[AnalysisKernel],
    lengths: &[usize],
    seeds: &[u64],
) -> Result<Vec<AttnStats>> {
    if let Some(&bad) = lengths.iter().find(|&&n| n == 0) {
        return Err(Error::Input(format!("analysis length {bad} must be positive")));
    }
    let mut samples = Vec::new();
    for &n in lengths {
        for &seed in seeds {
            samples.push(((n, seed), source.sample(n, seed)?));
        }
    }
    let mut rows = Vec::new();
    for &kernel in kernels {
        for ((_, seed), (q, k, d_h)) in &samples {
            let a = score_matrix(kernel, q, k, *d_h)?;
            rows.push(attn_stats(kernel, &a, source.s(), *seed)?);
        }
    }
    Ok(rows)
}

/// CSV with `#` comment lines naming the data source and tolerances.
pub fn write_report(path: &Path, source_label: &str, rows: &[AttnStats]) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(file, "# source: {source_label}")
        .and_then(|_| {
            writeln!(
                file,
                "# rank: singular values > {DEFAULT_RANK_TOL:e} * sigma_max; sparsity: |a| <= {DEFAULT_SPARSITY_TOL:e}; entropy in nats"
            )
        })
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    w.write_record(REPORT_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
