use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, Tape};
use crate::error::{Error, Result};
use crate::gau::ParamSet;
use crate::rng::{self, stream};
use crate::tensor::{Element, Tensor};

use super::batch::{make_mlm_batch, LengthStrategy, MaskConfig};
use super::checkpoint::save_checkpoint;
use super::corpus::TokenStream;
use super::model::{count_correct, masked_forward, ModelConfig, ModelParams};
use super::optim::{adamw_step, AdamState, AdamWConfig};
use super::schedule::lr_at;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_proportion: f64,
    pub total_steps: u64,
    /// Sequences per micro-batch.
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub adam: AdamWConfig,
    pub mask: MaskConfig,
    pub length: LengthStrategy,
    pub seed: u64,
    /// Evaluate every this many steps; 0 evaluates only after the last step.
    pub eval_every: u64,
    pub eval_batches: usize,
    /// Defaults to the longest training length.
    pub eval_len: Option<usize>,
    /// Stop after this step while keeping the schedule of `total_steps`, so
    /// the run can be resumed later.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stop_after: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 3e-4,
            warmup_proportion: 0.1,
            total_steps: 1000,
            batch_size: 32,
            grad_accum_steps: 1,
            adam: AdamWConfig::default(),
            mask: MaskConfig::default(),
            length: LengthStrategy::Fixed { len: 128 },
            seed: 0,
            eval_every: 0,
            eval_batches: 8,
            eval_len: None,
            stop_after: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if !(self.warmup_proportion > 0.0 && self.warmup_proportion < 1.0) {
            return Err(Error::Config(format!(
                "warmup_proportion {} outside (0, 1)",
                self.warmup_proportion
            )));
        }
        if !(self.peak_lr >= 0.0) || !self.peak_lr.is_finite() {
            return Err(Error::Config(format!("peak_lr {} must be finite and non-negative", self.peak_lr)));
        }
        if self.batch_size == 0 || self.grad_accum_steps == 0 || self.eval_batches == 0 {
            return Err(Error::Config("batch_size, grad_accum_steps and eval_batches must be positive".into()));
        }
        self.adam.validate()?;
        self.mask.validate()?;
        self.length.validate()?;
        let longest = self.length.max_len().max(self.eval_len());
        if longest > model.max_len {
            return Err(Error::Config(format!(
                "sequence length {longest} exceeds model max_len {}",
                model.max_len
            )));
        }
        Ok(())
    }

    /// Last step this run executes.
    pub fn last_step(&self) -> u64 {
        self.stop_after.map_or(self.total_steps, |s| s.min(self.total_steps))
    }

    pub fn eval_len(&self) -> usize {
        self.eval_len.unwrap_or_else(|| self.length.max_len())
    }
}

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub masked_acc: f64,
    pub seq_len: usize,
}

/// One row of `eval.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub step: u64,
    pub eval_len: usize,
    pub masked_acc: f64,
    pub loss: f64,
    pub masked: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    pub loss: f64,
    pub masked: usize,
}

/// Top-1 accuracy on corrupted positions of `eval_batches` deterministic
/// batches of length `eval_len` drawn from `tokens`.
#[allow(clippy::too_many_arguments)]
pub fn eval_mlm_accuracy<T: Element>(
    params: &ModelParams<T>,
    model: &ModelConfig,
    tokens: &[usize],
    eval_len: usize,
    batches: usize,
    batch_size: usize,
    mask: &MaskConfig,
    seed: u64,
) -> Result<EvalResult> {
    if eval_len > model.max_len {
        return Err(Error::Input(format!(
            "evaluation length {eval_len} exceeds max_len {}",
            model.max_len
        )));
    }
    let strategy = LengthStrategy::Fixed { len: eval_len };
    let (mut correct, mut masked, mut loss_sum) = (0usize, 0usize, 0.0f64);
    for i in 0..batches {
        let mut r = rng::keyed(seed, &[stream::EVAL, eval_len as u64, i as u64]);
        let Some(batch) = make_mlm_batch(tokens, batch_size, &strategy, mask, model.vocab_size, &mut r)? else {
            continue;
        };
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape)?;
        let out = masked_forward(&mut tape, &vars, model, &batch, Mode::Eval, &mut r)?;
        correct += count_correct(tape.value(out.logits), &out.targets);
        masked += out.targets.len();
        loss_sum += tape.value(out.loss).item().f64() * out.targets.len() as f64;
    }
    if masked == 0 {
        return Err(Error::Input("evaluation drew no masked positions".into()));
    }
    Ok(EvalResult {
        accuracy: correct as f64 / masked as f64,
        loss: loss_sum / masked as f64,
        masked,
    })
}

/// Result of [`train_loop`].
#[derive(Clone, Debug)]
pub struct TrainRun<T> {
    pub params: ModelParams<T>,
    pub state: AdamState<T>,
    pub step: u64,
    pub metrics: Vec<MetricsRow>,
    pub evals: Vec<EvalRow>,
}

/// Model and optimizer state to continue from.
pub struct Resume<T> {
    pub params: ModelParams<T>,
    pub state: AdamState<T>,
    pub step: u64,
}

/// Loss and gradients of one optimizer step over `grad_accum_steps`
/// micro-batches, each weighted by its share of the masked positions.
pub struct StepResult<T> {
    pub loss: f64,
    pub correct: usize,
    pub masked: usize,
    pub seq_len: usize,
    pub grads: Vec<Tensor<T>>,
}

/// Forward and backward for training step `step` (1-based). Returns `None`
/// when the drawn batch has nothing masked.
pub fn compute_step<T: Element>(
    params: &ModelParams<T>,
    model: &ModelConfig,
    cfg: &TrainConfig,
    tokens: &[usize],
    step: u64,
) -> Result<Option<StepResult<T>>> {
    let mut r = rng::keyed(cfg.seed, &[stream::BATCH, step]);
    let total = cfg.batch_size * cfg.grad_accum_steps;
    let Some(batch) = make_mlm_batch(tokens, total, &cfg.length, &cfg.mask, model.vocab_size, &mut r)? else {
        return Ok(None);
    };
    let all_masked = batch.num_masked();
    let mut grads: Vec<Tensor<T>> = params.named().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
    let (mut loss, mut correct) = (0.0f64, 0usize);
    for j in 0..cfg.grad_accum_steps {
        let micro = batch.slice(j * cfg.batch_size, (j + 1) * cfg.batch_size);
        let m = micro.num_masked();
        if m == 0 {
            continue;
        }
        let weight = m as f64 / all_masked as f64;
        let mut dr = rng::keyed(cfg.seed, &[stream::DROPOUT, step, j as u64]);
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape)?;
        let out = masked_forward(&mut tape, &vars, model, &micro, Mode::Train, &mut dr)?;
        loss += weight * tape.value(out.loss).item().f64();
        correct += count_correct(tape.value(out.logits), &out.targets);
        let scaled = tape.scale(out.loss, weight)?;
        let mut g = tape.backward(scaled)?;
        for (acc, &v) in grads.iter_mut().zip(&vars.all) {
            if let Some(gi) = g.take(v) {
                for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                    *a = *a + *b;
                }
            }
        }
    }
    Ok(Some(StepResult {
        loss,
        correct,
        masked: all_masked,
        seq_len: batch.len,
        grads,
    }))
}

/// Runs steps `start+1 ..= last_step()`, evaluating on the held-out stream
/// every `eval_every` steps and after the last step.
pub fn train_loop<T: Element>(
    model: &ModelConfig,
    cfg: &TrainConfig,
    corpus: &TokenStream,
    resume: Option<Resume<T>>,
    mut on_step: impl FnMut(&MetricsRow),
) -> Result<TrainRun<T>> {
    model.validate()?;
    cfg.validate(model)?;
    let (mut params, mut state, start) = match resume {
        Some(r) => (r.params, r.state, r.step),
        None => {
            let p = ModelParams::init(model, &mut rng::keyed(cfg.seed, &[stream::INIT]))?;
            let s = AdamState::new(&p);
            (p, s, 0)
        }
    };
    if start > cfg.total_steps {
        return Err(Error::Config(format!(
            "resume step {start} is past total_steps {}",
            cfg.total_steps
        )));
    }
    let mut metrics = Vec::new();
    let mut evals = Vec::new();
    let eval = |params: &ModelParams<T>, step: u64| -> Result<EvalRow> {
        let e = eval_mlm_accuracy(
            params,
            model,
            &corpus.eval,
            cfg.eval_len(),
            cfg.eval_batches,
            cfg.batch_size,
            &cfg.mask,
            cfg.seed,
        )?;
        Ok(EvalRow {
            step,
            eval_len: cfg.eval_len(),
            masked_acc: e.accuracy,
            loss: e.loss,
            masked: e.masked,
        })
    };
    let end = cfg.last_step();
    for step in start + 1..=end {
        let lr = lr_at(step, cfg.total_steps, cfg.peak_lr, cfg.warmup_proportion)?;
        let Some(res) = compute_step(&params, model, cfg, &corpus.train, step)? else {
            continue;
        };
        adamw_step(&mut params, &res.grads, &mut state, lr, &cfg.adam)?;
        let row = MetricsRow {
            step,
            loss: res.loss,
            lr,
            masked_acc: res.correct as f64 / res.masked as f64,
            seq_len: res.seq_len,
        };
        on_step(&row);
        metrics.push(row);
        if cfg.eval_every > 0 && step % cfg.eval_every == 0 && step != end {
            evals.push(eval(&params, step)?);
        }
    }
    if end > start {
        evals.push(eval(&params, end)?);
    }
    Ok(TrainRun {
        params,
        state,
        step: end.max(start),
        metrics,
        evals,
    })
}

pub fn write_csv<R: Serialize>(path: &Path, rows: &[R], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub const METRICS_HEADER: [&str; 5] = ["step", "loss", "lr", "masked_acc", "seq_len"];
pub const EVAL_HEADER: [&str; 5] = ["step", "eval_len", "masked_acc", "loss", "masked"];

/// Writes `metrics.csv`, `eval.csv` and `checkpoint.gauc` into `dir`.
pub fn write_run<T: Element>(dir: &Path, run: &TrainRun<T>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_csv(&dir.join("metrics.csv"), &run.metrics, &METRICS_HEADER)?;
    write_csv(&dir.join("eval.csv"), &run.evals, &EVAL_HEADER)?;
    save_checkpoint(&dir.join("checkpoint.gauc"), &run.params, Some(&run.state), run.step)
}
