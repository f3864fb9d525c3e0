use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use gau_core::analysis::{attn_report, write_report, AttnStats, QkSource};
use gau_core::bench::{run_bench, BenchRow, BENCH_HEADER};
use gau_core::gau::{count_params, BlockKind, ParamSet};
use gau_core::rng::{self, stream};
use gau_core::train::{
    eval_mlm_accuracy, load_checkpoint, restore, synthetic_corpus, train_loop, write_csv, write_run, AdamState,
    ModelParams, Resume, TokenStream, TrainRun, Vocab,
};

use crate::config::{self, usage, RunConfig, RESOLVED_CONFIG};

pub const VOCAB_FILE: &str = "vocab.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.gauc";

/// Corpus text named by the config, or the synthetic one.
pub fn corpus_text(cfg: &RunConfig) -> Result<String> {
    match &cfg.paths.corpus {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading corpus {}", p.display())),
        None => Ok(synthetic_corpus(&cfg.data.synthetic)?),
    }
}

pub struct Data {
    pub vocab: Vocab,
    pub stream: TokenStream,
}

/// Tokenizes the corpus with `vocab`, or with a vocabulary built from it.
pub fn prepare_data(cfg: &RunConfig, vocab: Option<Vocab>) -> Result<Data> {
    let text = corpus_text(cfg)?;
    let vocab = match (vocab, &cfg.paths.vocab) {
        (Some(v), _) => v,
        (None, Some(p)) => Vocab::load(p)?,
        (None, None) => Vocab::from_text(&text, cfg.data.max_vocab)?,
    };
    let stream = TokenStream::from_text(&text, &vocab, cfg.data.eval_fraction)?;
    Ok(Data { vocab, stream })
}

fn set_vocab_size(cfg: &mut RunConfig, vocab: &Vocab) -> Result<()> {
    if cfg.model.vocab_size == 0 {
        cfg.model.vocab_size = vocab.len();
    } else if cfg.model.vocab_size < vocab.len() {
        return Err(usage(format!(
            "model.vocab_size = {} is smaller than the vocabulary ({})",
            cfg.model.vocab_size,
            vocab.len()
        )));
    }
    cfg.model.validate().map_err(|e| usage(format!("model: {e}")))
}

/// Trains per `cfg`, writing the resolved config, vocabulary, metrics,
/// evaluations and checkpoint into `paths.out_dir`.
pub fn train(cfg: &mut RunConfig, resume: Option<&Path>, log_every: u64) -> Result<TrainRun<f32>> {
    let data = prepare_data(cfg, None)?;
    set_vocab_size(cfg, &data.vocab)?;
    let out = cfg.paths.out_dir.clone();
    cfg.write_resolved(&out)?;
    data.vocab.save(&out.join(VOCAB_FILE))?;

    let resume = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let mut params = ModelParams::<f32>::init(&cfg.model, &mut rng::keyed(cfg.train.seed, &[stream::INIT]))?;
            let mut state = AdamState::new(&params);
            let step = restore(&ckpt, &mut params, Some(&mut state))
                .with_context(|| format!("restoring {}", path.display()))?;
            Some(Resume { params, state, step })
        }
        None => None,
    };
    let total = cfg.train.total_steps;
    let run = train_loop(&cfg.model, &cfg.train, &data.stream, resume, |row| {
        if log_every > 0 && (row.step % log_every == 0 || row.step == total) {
            eprintln!(
                "step {:>6}/{total}  loss {:.4}  acc {:.4}  lr {:.3e}",
                row.step, row.loss, row.masked_acc, row.lr
            );
        }
    })?;
    write_run(&out, &run)?;
    Ok(run)
}

/// A finished training run read back from its output directory.
pub struct LoadedRun {
    pub config: RunConfig,
    pub data: Data,
    pub params: ModelParams<f32>,
}

/// Loads the checkpoint and the `config.resolved.toml` and `vocab.txt`
/// written next to it.
pub fn load_run(checkpoint: &Path) -> Result<LoadedRun> {
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let config = config::load(Some(&dir.join(RESOLVED_CONFIG)), &[])
        .with_context(|| format!("loading the run config next to {}", checkpoint.display()))?;
    let vocab = Vocab::load(&dir.join(VOCAB_FILE))?;
    let data = prepare_data(&config, Some(vocab))?;
    let ckpt = load_checkpoint(checkpoint)?;
    let mut params = ModelParams::<f32>::init(&config.model, &mut rng::keyed(config.train.seed, &[stream::INIT]))?;
    restore(&ckpt, &mut params, None).with_context(|| format!("restoring {}", checkpoint.display()))?;
    Ok(LoadedRun { config, data, params })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LengthRow {
    pub run: String,
    pub kernel: String,
    pub train_len: usize,
    pub eval_len: usize,
    pub masked_acc: f64,
    pub loss: f64,
    pub masked: usize,
    /// `(acc(eval_len) - acc(train_len)) / acc(train_len)`.
    pub rel_change: f64,
}

pub const LENGTH_HEADER: [&str; 8] = [
    "run",
    "kernel",
    "train_len",
    "eval_len",
    "masked_acc",
    "loss",
    "masked",
    "rel_change",
];

/// Held-out masked accuracy of each checkpoint at each length, with the same
/// batches and seed as the run's own final evaluation.
pub fn eval_lengths(checkpoints: &[PathBuf], lengths: &[usize]) -> Result<Vec<LengthRow>> {
    let mut rows = Vec::new();
    for path in checkpoints {
        let run = load_run(path)?;
        let (m, t) = (&run.config.model, &run.config.train);
        if let Some(&n) = lengths.iter().find(|&&n| n == 0 || n > m.max_len) {
            bail!(usage(format!("eval length {n} outside 1..={} for {}", m.max_len, path.display())));
        }
        let eval = |n: usize| {
            eval_mlm_accuracy(&run.params, m, &run.data.stream.eval, n, t.eval_batches, t.batch_size, &t.mask, t.seed)
        };
        let train_len = t.eval_len();
        let base = eval(train_len)?;
        let name = path
            .parent()
            .and_then(|d| d.file_name())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        for &n in lengths {
            let e = if n == train_len { base.clone() } else { eval(n)? };
            rows.push(LengthRow {
                run: name.clone(),
                kernel: m.kernel.to_string(),
                train_len,
                eval_len: n,
                masked_acc: e.accuracy,
                loss: e.loss,
                masked: e.masked,
                rel_change: (e.accuracy - base.accuracy) / base.accuracy,
            });
        }
    }
    Ok(rows)
}

pub fn write_lengths(dir: &Path, rows: &[LengthRow]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join("eval_lengths.csv");
    write_csv(&path, rows, &LENGTH_HEADER)?;
    Ok(path)
}

/// Attention statistics for the configured source, written to
/// `analysis.csv`.
pub fn analyze(cfg: &RunConfig) -> Result<(Vec<AttnStats>, PathBuf)> {
    let a = &cfg.analyze;
    let (rows, label) = if a.random_init {
        let src = QkSource::Random { s: a.s };
        (attn_report(&src, &a.kernels, &a.lengths, &a.seeds)?, src.label())
    } else {
        let ckpt = cfg
            .paths
            .checkpoint
            .as_deref()
            .ok_or_else(|| usage("analyze needs paths.checkpoint or --random-init"))?;
        let run = load_run(ckpt)?;
        let src = QkSource::Trained {
            params: &run.params,
            cfg: &run.config.model,
            tokens: &run.data.stream.eval,
            layer: a.layer,
        };
        (attn_report(&src, &a.kernels, &a.lengths, &a.seeds)?, src.label())
    };
    std::fs::create_dir_all(&cfg.paths.out_dir)?;
    let path = cfg.paths.out_dir.join("analysis.csv");
    write_report(&path, &label, &rows)?;
    Ok((rows, path))
}

pub fn bench(cfg: &RunConfig) -> Result<(Vec<BenchRow>, PathBuf)> {
    let rows = run_bench(&cfg.bench)?;
    std::fs::create_dir_all(&cfg.paths.out_dir)?;
    let path = cfg.paths.out_dir.join("bench.csv");
    write_csv(&path, &rows, &BENCH_HEADER)?;
    Ok((rows, path))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamRow {
    pub component: String,
    pub d_h: usize,
    pub d_ff: usize,
    pub headline: u64,
    pub exact: u64,
}

pub const PARAM_HEADER: [&str; 5] = ["component", "d_h", "d_ff", "headline", "exact"];

/// Headline and exact counts for one GAU (`model.d_ff`), two GAUs, MHSA,
/// an FFN of width `4·d_h`, MHSA+FFN, and the whole configured model.
pub fn count_params_table(cfg: &RunConfig, heads: usize) -> Result<Vec<ParamRow>> {
    let m = &cfg.model;
    if heads == 0 || !m.d_h.is_multiple_of(heads) {
        return Err(usage(format!("bench.heads = {heads} must divide model.d_h = {}", m.d_h)));
    }
    let g = count_params(BlockKind::Gau, m.d_h, m.d_ff, m.s, 1)?;
    let a = count_params(BlockKind::Mhsa, m.d_h, 0, 0, heads)?;
    let f = count_params(BlockKind::Ffn, m.d_h, 4 * m.d_h, 0, 1)?;
    let row = |c: &str, d_ff: usize, headline: u64, exact: u64| ParamRow {
        component: c.into(),
        d_h: m.d_h,
        d_ff,
        headline,
        exact,
    };
    let mut rows = vec![
        row("gau", m.d_ff, g.headline, g.exact),
        row("gau_x2", m.d_ff, 2 * g.headline, 2 * g.exact),
        row("mhsa", 0, a.headline, a.exact),
        row("ffn", 4 * m.d_h, f.headline, f.exact),
        row("mhsa_ffn", 4 * m.d_h, a.headline + f.headline, a.exact + f.exact),
    ];
    if m.vocab_size > 0 {
        let params = ModelParams::<f32>::init(m, &mut rng::seeded(0))?;
        let total = params.num_params() as u64;
        let layers = m.num_layers as u64;
        rows.push(row("model", m.d_ff, layers * g.headline, total));
    }
    Ok(rows)
}

pub fn make_corpus(cfg: &RunConfig, path: &Path) -> Result<usize> {
    let text = synthetic_corpus(&cfg.data.synthetic)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?;
    Ok(text.len())
}
