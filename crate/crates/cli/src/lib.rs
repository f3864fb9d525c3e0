//! The `gau` command line: training, length sweeps, attention analysis,
//! parameter accounting and block benchmarks driven by one TOML config.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use config::{parse_override, RunConfig, UsageError};

#[derive(Debug, Parser)]
#[command(name = "gau", version, about = "Gated attention unit experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// TOML run config; defaults apply to anything it leaves out.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for initialization, batches, dropout and benchmarks.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (paths.out_dir).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Set a config value, e.g. `model.d_h=256`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a GAU encoder with masked language modelling.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint.
        #[arg(long, value_name = "CHECKPOINT")]
        resume: Option<PathBuf>,
        /// Shorthand for train.total_steps.
        #[arg(long)]
        steps: Option<u64>,
        /// Log every N steps to stderr (0 disables).
        #[arg(long, default_value_t = 100)]
        log_every: u64,
    },
    /// Masked accuracy of trained checkpoints at several sequence lengths.
    EvalLengths {
        #[command(flatten)]
        common: Common,
        /// Checkpoint inside a train output directory. Repeatable.
        #[arg(long = "checkpoint", value_name = "PATH")]
        checkpoints: Vec<PathBuf>,
        /// Comma-separated lengths (eval.lengths).
        #[arg(long)]
        lengths: Option<String>,
    },
    /// Rank, sparsity and entropy of attention matrices.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Use Gaussian queries and keys.
        #[arg(long, conflicts_with = "checkpoint")]
        random_init: bool,
        /// Use queries and keys from a trained checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated: qk, relu2, or any attention kernel name.
        #[arg(long)]
        kernels: Option<String>,
        /// Comma-separated sequence lengths.
        #[arg(long = "n", alias = "lengths")]
        lengths: Option<String>,
        /// Comma-separated seeds.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        layer: Option<usize>,
    },
    /// Time and peak memory of two GAUs against one MHSA+FFN block.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Comma-separated sequence lengths.
        #[arg(long)]
        lengths: Option<String>,
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Headline and exact parameter counts per component.
    CountParams {
        #[command(flatten)]
        common: Common,
        /// Sets model.d_h, and model.d_ff to twice it unless --d-ff is given.
        #[arg(long = "d-h")]
        d_h: Option<usize>,
        #[arg(long = "d-ff")]
        d_ff: Option<usize>,
        #[arg(long)]
        s: Option<usize>,
        /// MHSA heads (bench.heads).
        #[arg(long)]
        heads: Option<usize>,
    },
    /// Write the synthetic training corpus to a file.
    MakeCorpus {
        #[arg(long, value_name = "PATH")]
        config: Option<PathBuf>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Corpus seed (data.synthetic.seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Approximate size in bytes.
        #[arg(long)]
        bytes: Option<usize>,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
}

type Overrides = Vec<(String, toml::Value)>;

fn list_value(raw: &str, quote: bool) -> toml::Value {
    let items = raw.split(',').map(str::trim).filter(|s| !s.is_empty());
    toml::Value::Array(
        items
            .map(|s| if quote { toml::Value::String(s.into()) } else { config::parse_value(s) })
            .collect(),
    )
}

fn path_value(p: &std::path::Path) -> toml::Value {
    toml::Value::String(p.to_string_lossy().into_owned())
}

/// File overrides first, then the dedicated flags, which win.
fn load_config(common: &Common, extra: Overrides) -> Result<RunConfig> {
    let mut ov: Overrides = common.overrides.iter().map(|s| parse_override(s)).collect::<Result<_>>()?;
    if let Some(s) = common.seed {
        ov.push(("seed".into(), toml::Value::Integer(s as i64)));
    }
    if let Some(o) = &common.out {
        ov.push(("paths.out_dir".into(), path_value(o)));
    }
    ov.extend(extra);
    config::load(common.config.as_deref(), &ov)
}

fn int(v: usize) -> toml::Value {
    toml::Value::Integer(v as i64)
}

fn print_csv(path: &std::path::Path) -> Result<()> {
    print!("{}", std::fs::read_to_string(path)?);
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            common,
            resume,
            steps,
            log_every,
        } => {
            let mut extra = Overrides::new();
            if let Some(s) = steps {
                extra.push(("train.total_steps".into(), toml::Value::Integer(s as i64)));
            }
            let mut cfg = load_config(&common, extra)?;
            let run = commands::train(&mut cfg, resume.as_deref(), log_every)?;
            if let Some(e) = run.evals.last() {
                println!(
                    "step {}: held-out masked accuracy {:.4}, loss {:.4} at length {}",
                    e.step, e.masked_acc, e.loss, e.eval_len
                );
            }
            println!("wrote {}", cfg.paths.out_dir.display());
        }
        Command::EvalLengths {
            common,
            checkpoints,
            lengths,
        } => {
            let mut extra = Overrides::new();
            if let Some(l) = lengths {
                extra.push(("eval.lengths".into(), list_value(&l, false)));
            }
            let cfg = load_config(&common, extra)?;
            cfg.write_resolved(&cfg.paths.out_dir)?;
            let rows = commands::eval_lengths(&checkpoints, &cfg.eval.lengths)?;
            let path = commands::write_lengths(&cfg.paths.out_dir, &rows)?;
            print_csv(&path)?;
        }
        Command::Analyze {
            common,
            random_init,
            checkpoint,
            kernels,
            lengths,
            seeds,
            layer,
        } => {
            let mut extra = Overrides::new();
            if random_init {
                extra.push(("analyze.random_init".into(), toml::Value::Boolean(true)));
            }
            if let Some(c) = &checkpoint {
                extra.push(("analyze.random_init".into(), toml::Value::Boolean(false)));
                extra.push(("paths.checkpoint".into(), path_value(c)));
            }
            if let Some(k) = kernels {
                extra.push(("analyze.kernels".into(), list_value(&k, true)));
            }
            if let Some(l) = lengths {
                extra.push(("analyze.lengths".into(), list_value(&l, false)));
            }
            if let Some(s) = seeds {
                extra.push(("analyze.seeds".into(), list_value(&s, false)));
            }
            if let Some(l) = layer {
                extra.push(("analyze.layer".into(), int(l)));
            }
            let cfg = load_config(&common, extra)?;
            cfg.write_resolved(&cfg.paths.out_dir)?;
            let (_, path) = commands::analyze(&cfg)?;
            print_csv(&path)?;
        }
        Command::Bench {
            common,
            lengths,
            repeats,
        } => {
            let mut extra = Overrides::new();
            if let Some(l) = lengths {
                extra.push(("bench.lengths".into(), list_value(&l, false)));
            }
            if let Some(r) = repeats {
                extra.push(("bench.repeats".into(), int(r)));
            }
            let cfg = load_config(&common, extra)?;
            cfg.write_resolved(&cfg.paths.out_dir)?;
            let (_, path) = commands::bench(&cfg)?;
            print_csv(&path)?;
        }
        Command::CountParams {
            common,
            d_h,
            d_ff,
            s,
            heads,
        } => {
            let mut extra = Overrides::new();
            if let Some(d) = d_h {
                extra.push(("model.d_h".into(), int(d)));
                extra.push(("model.d_ff".into(), int(d_ff.unwrap_or(2 * d))));
            } else if let Some(f) = d_ff {
                extra.push(("model.d_ff".into(), int(f)));
            }
            if let Some(s) = s {
                extra.push(("model.s".into(), int(s)));
            }
            if let Some(h) = heads {
                extra.push(("bench.heads".into(), int(h)));
            }
            let cfg = load_config(&common, extra)?;
            cfg.write_resolved(&cfg.paths.out_dir)?;
            let rows = commands::count_params_table(&cfg, cfg.bench.heads)?;
            let path = cfg.paths.out_dir.join("params.csv");
            gau_core::train::write_csv(&path, &rows, &commands::PARAM_HEADER)?;
            println!("{:<10} {:>6} {:>6} {:>14} {:>14}", "component", "d_h", "d_ff", "headline", "exact");
            for r in &rows {
                println!(
                    "{:<10} {:>6} {:>6} {:>14} {:>14}",
                    r.component, r.d_h, r.d_ff, r.headline, r.exact
                );
            }
        }
        Command::MakeCorpus {
            config,
            overrides,
            seed,
            bytes,
            out,
        } => {
            let mut ov: Overrides = overrides.iter().map(|s| parse_override(s)).collect::<Result<_>>()?;
            if let Some(s) = seed {
                ov.push(("data.synthetic.seed".into(), toml::Value::Integer(s as i64)));
            }
            if let Some(b) = bytes {
                ov.push(("data.synthetic.target_bytes".into(), int(b)));
            }
            let cfg = config::load(config.as_deref(), &ov)?;
            let n = commands::make_corpus(&cfg, &out)?;
            println!("wrote {n} bytes to {}", out.display());
        }
    }
    Ok(())
}

/// Exit code for an error: 1 for usage and configuration mistakes, 2 for
/// failures while running.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    let usage_like = err.chain().any(|e| {
        e.downcast_ref::<UsageError>().is_some()
            || matches!(e.downcast_ref::<gau_core::Error>(), Some(gau_core::Error::Config(_)))
    });
    if usage_like {
        1
    } else {
        2
    }
}

pub fn main_with_args<I, A>(args: I) -> ExitCode
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
