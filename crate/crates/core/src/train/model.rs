use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, Tape, Var};
use crate::error::{Error, Result};
use crate::gau::{gau_forward, prefixed, BlockConfig, GauParams, GauVars, ParamSet};
use crate::kernels::{var_norm, AttentionKernelSpec, KernelVariant, NormConfig, RopeConfig};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

use super::batch::Batch;

/// Architecture of the stacked-GAU masked language model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub d_h: usize,
    pub d_ff: usize,
    pub s: usize,
    pub kernel: KernelVariant,
    pub base_len: usize,
    pub kernel_eps: f64,
    pub rope_theta: f64,
    pub rope_both: bool,
    pub hidden_dropout: f64,
    pub attn_dropout: f64,
    pub norm: NormConfig,
    /// Filled from the corpus vocabulary when zero.
    pub vocab_size: usize,
    pub max_len: usize,
    pub tie_embeddings: bool,
    /// Standard deviation of the initial embedding table.
    pub embedding_init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            d_h: 128,
            d_ff: 256,
            s: 32,
            kernel: KernelVariant::SoftmaxPlus,
            base_len: AttentionKernelSpec::DEFAULT_BASE_LEN,
            kernel_eps: AttentionKernelSpec::DEFAULT_EPS,
            rope_theta: 10_000.0,
            rope_both: true,
            hidden_dropout: 0.1,
            attn_dropout: 0.1,
            norm: NormConfig::default(),
            vocab_size: 0,
            max_len: 512,
            tie_embeddings: true,
            embedding_init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn block(&self) -> BlockConfig {
        let mut kernel = AttentionKernelSpec::new(self.kernel, self.s, self.d_h);
        kernel.base_len = self.base_len;
        kernel.eps = self.kernel_eps;
        BlockConfig {
            d_h: self.d_h,
            d_ff: self.d_ff,
            s: self.s,
            kernel,
            hidden_dropout: self.hidden_dropout,
            attn_dropout: self.attn_dropout,
            rope: RopeConfig {
                dim: self.s,
                theta_base: self.rope_theta,
            },
            norm: self.norm,
            rope_both: self.rope_both,
            post_norm: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::Config("num_layers must be positive".into()));
        }
        if self.d_h < 2 {
            return Err(Error::Config(format!("d_h = {} must be at least 2", self.d_h)));
        }
        if self.vocab_size <= super::vocab::NUM_RESERVED {
            return Err(Error::Config(format!("vocab_size = {} leaves no ordinary tokens", self.vocab_size)));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be positive".into()));
        }
        if !(self.embedding_init_std > 0.0) {
            return Err(Error::Config("embedding_init_std must be positive".into()));
        }
        self.block().validate()
    }
}

/// All trainable tensors of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub embedding: Tensor<T>,
    pub layers: Vec<GauParams<T>>,
    /// `[d_h, vocab]`, absent when the output layer reuses the embedding.
    pub output: Option<Tensor<T>>,
}

impl<T: Element> ModelParams<T> {
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let embedding = Tensor::randn(&[cfg.vocab_size, cfg.d_h], 0.0, cfg.embedding_init_std, rng);
        let layers = (0..cfg.num_layers)
            .map(|_| GauParams::init(cfg.d_h, cfg.d_ff, cfg.s, rng))
            .collect();
        let output = (!cfg.tie_embeddings)
            .then(|| Tensor::randn(&[cfg.d_h, cfg.vocab_size], 0.0, cfg.embedding_init_std, rng));
        Ok(Self {
            embedding,
            layers,
            output,
        })
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Result<ModelVars> {
        let all = self.bind_all(tape)?;
        Ok(ModelVars::from_slice(&all, self.layers.len(), self.output.is_some()))
    }
}

impl<T: Element> ParamSet<T> for ModelParams<T> {
    fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = vec![("embedding".to_string(), &self.embedding)];
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("layers.{i}");
            v.extend(l.named().into_iter().map(|(n, t)| (prefixed(&p, &n), t)));
        }
        if let Some(o) = &self.output {
            v.push(("output".into(), o));
        }
        v
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut v = vec![("embedding".to_string(), &mut self.embedding)];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = format!("layers.{i}");
            v.extend(l.named_mut().into_iter().map(|(n, t)| (prefixed(&p, &n), t)));
        }
        if let Some(o) = &mut self.output {
            v.push(("output".into(), o));
        }
        v
    }
}

/// Tape handles of a bound [`ModelParams`].
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub embedding: Var,
    pub layers: Vec<GauVars>,
    pub output: Option<Var>,
    /// Every parameter in `named()` order.
    pub all: Vec<Var>,
}

impl ModelVars {
    /// Builds from vars in `ModelParams::named()` order.
    pub fn from_slice(all: &[Var], num_layers: usize, has_output: bool) -> Self {
        const PER_LAYER: usize = 8;
        let layers = (0..num_layers)
            .map(|i| GauVars::from_slice(&all[1 + i * PER_LAYER..1 + (i + 1) * PER_LAYER]))
            .collect();
        Self {
            embedding: all[0],
            layers,
            output: has_output.then(|| all[all.len() - 1]),
            all: all.to_vec(),
        }
    }
}

#[derive(Debug)]
pub struct ModelOutput {
    /// `[batch, len, vocab]`
    pub logits: Var,
    /// Mean cross-entropy over corrupted positions, if there are any.
    pub loss: Option<Var>,
}

/// Final hidden states `[batch, len, d_h]`.
pub fn encode<T: Element>(
    tape: &mut Tape<T>,
    vars: &ModelVars,
    cfg: &ModelConfig,
    batch: &Batch,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Var> {
    if batch.len > cfg.max_len {
        return Err(Error::Input(format!(
            "sequence length {} exceeds max_len {}",
            batch.len, cfg.max_len
        )));
    }
    let block = cfg.block();
    let x = tape.embedding(vars.embedding, &batch.input_ids, &[batch.batch, batch.len])?;
    let mut h = var_norm(tape, x, &cfg.norm)?;
    for layer in &vars.layers {
        h = gau_forward(tape, h, layer, &block, &batch.positions, batch.padding(), mode, rng)?.out;
    }
    Ok(h)
}

fn project<T: Element>(tape: &mut Tape<T>, vars: &ModelVars, h: Var) -> Result<Var> {
    match vars.output {
        Some(w) => tape.matmul(h, w),
        None => {
            let et = tape.transpose(vars.embedding)?;
            tape.matmul(h, et)
        }
    }
}

/// Logits for every position plus the masked-token loss.
pub fn model_forward<T: Element>(
    tape: &mut Tape<T>,
    vars: &ModelVars,
    cfg: &ModelConfig,
    batch: &Batch,
    mode: Mode,
    rng: &mut Rng,
) -> Result<ModelOutput> {
    let h = encode(tape, vars, cfg, batch, mode, rng)?;
    let logits = project(tape, vars, h)?;
    let loss = if batch.num_masked() > 0 {
        Some(tape.softmax_cross_entropy(logits, &batch.targets)?)
    } else {
        None
    };
    Ok(ModelOutput { logits, loss })
}

#[derive(Debug)]
pub struct MaskedOutput {
    /// `[num_masked, vocab]`
    pub logits: Var,
    pub targets: Vec<usize>,
    pub loss: Var,
}

/// Same loss as [`model_forward`], projecting only the corrupted positions.
pub fn masked_forward<T: Element>(
    tape: &mut Tape<T>,
    vars: &ModelVars,
    cfg: &ModelConfig,
    batch: &Batch,
    mode: Mode,
    rng: &mut Rng,
) -> Result<MaskedOutput> {
    let (rows, targets): (Vec<usize>, Vec<usize>) = batch
        .targets
        .iter()
        .enumerate()
        .filter_map(|(i, t)| t.map(|t| (i, t)))
        .unzip();
    if rows.is_empty() {
        return Err(Error::Input("batch has no masked positions".into()));
    }
    let h = encode(tape, vars, cfg, batch, mode, rng)?;
    let flat = tape.reshape(h, &[batch.batch * batch.len, cfg.d_h])?;
    let picked = tape.embedding(flat, &rows, &[rows.len()])?;
    let logits = project(tape, vars, picked)?;
    let wrapped: Vec<Option<usize>> = targets.iter().map(|&t| Some(t)).collect();
    let loss = tape.softmax_cross_entropy(logits, &wrapped)?;
    Ok(MaskedOutput { logits, targets, loss })
}

/// Number of rows whose arg-max matches the target.
pub fn count_correct<T: Element>(logits: &Tensor<T>, targets: &[usize]) -> usize {
    let v = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(v)
        .zip(targets)
        .filter(|(row, &t)| {
            let mut best = 0;
            for (j, x) in row.iter().enumerate() {
                if *x > row[best] {
                    best = j;
                }
            }
            best == t
        })
        .count()
}
