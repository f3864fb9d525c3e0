//! Forward+backward time and tracked peak memory of two GAU layers against
//! one MHSA+FFN block with the same headline parameter count.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, Tape};
use crate::error::{Error, Result};
use crate::gau::{
    count_params, gau_forward, mhsa_ffn_forward, BaselineConfig, BaselineParams, BlockConfig, BlockKind, GauParams,
};
use crate::kernels::KernelVariant;
use crate::rng::{self, stream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub d_h: usize,
    pub heads: usize,
    pub s: usize,
    pub batch: usize,
    pub kernel: KernelVariant,
    pub lengths: Vec<usize>,
    pub repeats: usize,
    /// Discarded runs before timing.
    pub warmup: usize,
    /// Tape byte budget; exceeding it yields an `OOM` status.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub memory_limit: Option<usize>,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            d_h: 768,
            heads: 12,
            s: 128,
            batch: 1,
            kernel: KernelVariant::SoftmaxPlus,
            lengths: vec![256, 512, 1024],
            repeats: 3,
            warmup: 3,
            memory_limit: None,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 || self.batch == 0 {
            return Err(Error::Config("bench repeats and batch must be positive".into()));
        }
        if self.lengths.contains(&0) {
            return Err(Error::Config("bench lengths must be positive".into()));
        }
        BaselineConfig::new(self.d_h, self.heads).validate()?;
        self.gau_block().validate()
    }

    fn gau_block(&self) -> BlockConfig {
        let mut b = BlockConfig::new(self.d_h, self.s);
        b.kernel.variant = self.kernel;
        b
    }
}

/// One benchmark row. Times are medians in milliseconds; `NaN` when the run
/// ran out of memory.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub n: usize,
    pub batch: usize,
    pub d_h: usize,
    pub gau_ms: f64,
    pub baseline_ms: f64,
    pub gau_peak_bytes: usize,
    pub baseline_peak_bytes: usize,
    /// Baseline peak over GAU peak.
    pub baseline_memory_ratio: f64,
    pub gau_headline_params: u64,
    pub baseline_headline_params: u64,
    pub params_match: bool,
    pub gau_status: String,
    pub baseline_status: String,
}

pub const BENCH_HEADER: [&str; 13] = [
    "n",
    "batch",
    "d_h",
    "gau_ms",
    "baseline_ms",
    "gau_peak_bytes",
    "baseline_peak_bytes",
    "baseline_memory_ratio",
    "gau_headline_params",
    "baseline_headline_params",
    "params_match",
    "gau_status",
    "baseline_status",
];

struct Measured {
    ms: f64,
    peak: usize,
    status: String,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

/// Times `run` after `warmup` discarded calls. `run` returns the tape's peak
/// bytes; out-of-memory is reported as a status, other errors propagate.
fn measure(cfg: &BenchConfig, mut run: impl FnMut() -> Result<usize>) -> Result<Measured> {
    let mut times = Vec::with_capacity(cfg.repeats);
    let mut peak = 0;
    for i in 0..cfg.warmup + cfg.repeats {
        let t = Instant::now();
        match run() {
            Ok(p) => peak = p,
            Err(Error::OutOfMemory { live, requested, .. }) => {
                return Ok(Measured {
                    ms: f64::NAN,
                    peak: live + requested,
                    status: "OOM".into(),
                })
            }
            Err(e) => return Err(e),
        }
        if i >= cfg.warmup {
            times.push(t.elapsed().as_secs_f64() * 1e3);
        }
    }
    Ok(Measured {
        ms: median(times),
        peak,
        status: "ok".into(),
    })
}

fn new_tape(cfg: &BenchConfig) -> Tape<f32> {
    match cfg.memory_limit {
        Some(l) => Tape::with_memory_limit(l),
        None => Tape::new(),
    }
}

pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    let mut r = rng::keyed(cfg.seed, &[stream::BENCH]);
    let block = cfg.gau_block();
    let gau: Vec<GauParams<f32>> = (0..2)
        .map(|_| GauParams::init(cfg.d_h, block.d_ff, cfg.s, &mut r))
        .collect();
    let base_cfg = BaselineConfig::new(cfg.d_h, cfg.heads);
    let base = BaselineParams::<f32>::init(&base_cfg, &mut r);

    let gau_params = count_params(BlockKind::Gau, cfg.d_h, block.d_ff, cfg.s, 1)?;
    let mhsa = count_params(BlockKind::Mhsa, cfg.d_h, 0, 0, cfg.heads)?;
    let ffn = count_params(BlockKind::Ffn, cfg.d_h, base_cfg.d_ff, 0, 1)?;
    let gau_headline = 2 * gau_params.headline;
    let base_headline = mhsa.headline + ffn.headline;

    let mut rows = Vec::new();
    for &n in &cfg.lengths {
        let x = Tensor::<f32>::randn(&[cfg.batch, n, cfg.d_h], 0.0, 1.0, &mut r);
        let positions: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let g = measure(cfg, || {
            let mut tape = new_tape(cfg);
            let mut h = tape.param(x.clone())?;
            for p in &gau {
                let vars = p.bind(&mut tape)?;
                h = gau_forward(&mut tape, h, &vars, &block, &positions, None, Mode::Eval, &mut r)?.out;
            }
            let loss = tape.sum(h)?;
            tape.backward(loss)?;
            Ok(tape.peak_bytes())
        })?;
        let b = measure(cfg, || {
            let mut tape = new_tape(cfg);
            let h = tape.param(x.clone())?;
            let vars = base.bind(&mut tape)?;
            let out = mhsa_ffn_forward(&mut tape, h, &vars, &base_cfg, Mode::Eval, &mut r)?;
            let loss = tape.sum(out)?;
            tape.backward(loss)?;
            Ok(tape.peak_bytes())
        })?;
        rows.push(BenchRow {
            n,
            batch: cfg.batch,
            d_h: cfg.d_h,
            gau_ms: g.ms,
            baseline_ms: b.ms,
            gau_peak_bytes: g.peak,
            baseline_peak_bytes: b.peak,
            baseline_memory_ratio: b.peak as f64 / g.peak as f64,
            gau_headline_params: gau_headline,
            baseline_headline_params: base_headline,
            params_match: gau_headline == base_headline,
            gau_status: g.status,
            baseline_status: b.status,
        });
    }
    Ok(rows)
}
