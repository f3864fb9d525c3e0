use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

use super::vocab::{Vocab, CLS, MASK, NUM_RESERVED};

/// How the sequence length of each batch is chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LengthStrategy {
    Fixed { len: usize },
    /// One length per batch, drawn from `lens` with the given weights.
    /// Empty weights mean uniform.
    Diff {
        lens: Vec<usize>,
        #[serde(default)]
        weights: Vec<f64>,
    },
}

impl LengthStrategy {
    /// `{L/8, L/4, L/2, L}`, uniform.
    pub fn diff_default(max_len: usize) -> Self {
        let mut lens: Vec<usize> = [8, 4, 2, 1].iter().map(|d| (max_len / d).max(2)).collect();
        lens.dedup();
        LengthStrategy::Diff {
            lens,
            weights: Vec::new(),
        }
    }

    pub fn max_len(&self) -> usize {
        match self {
            LengthStrategy::Fixed { len } => *len,
            LengthStrategy::Diff { lens, .. } => lens.iter().copied().max().unwrap_or(0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LengthStrategy::Fixed { len } if *len < 2 => {
                Err(Error::Config(format!("sequence length {len} is below 2")))
            }
            LengthStrategy::Diff { lens, weights } => {
                if lens.is_empty() || lens.iter().any(|&l| l < 2) {
                    return Err(Error::Config("diff lengths must be non-empty and at least 2".into()));
                }
                if !weights.is_empty() {
                    if weights.len() != lens.len() {
                        return Err(Error::Config("diff weights must match lens".into()));
                    }
                    if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) || weights.iter().sum::<f64>() <= 0.0 {
                        return Err(Error::Config("diff weights must be non-negative with a positive sum".into()));
                    }
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> usize {
        match self {
            LengthStrategy::Fixed { len } => *len,
            LengthStrategy::Diff { lens, weights } => {
                if weights.is_empty() {
                    return lens[rng.random_range(0..lens.len())];
                }
                let total: f64 = weights.iter().sum();
                let mut u = rng.random::<f64>() * total;
                for (l, w) in lens.iter().zip(weights) {
                    if u < *w {
                        return *l;
                    }
                    u -= w;
                }
                *lens.last().expect("validated non-empty")
            }
        }
    }
}

/// Masked-language-model corruption policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    pub mask_prob: f64,
    /// Of the selected positions: fraction replaced by `[MASK]`, fraction
    /// replaced by a random token; the rest stay unchanged.
    pub mask_token_frac: f64,
    pub random_token_frac: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            mask_prob: 0.15,
            mask_token_frac: 0.8,
            random_token_frac: 0.1,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        let p = [self.mask_prob, self.mask_token_frac, self.random_token_frac];
        if p.iter().any(|x| !(0.0..=1.0).contains(x)) || self.mask_token_frac + self.random_token_frac > 1.0 + 1e-12 {
            return Err(Error::Config(format!("invalid masking probabilities {p:?}")));
        }
        Ok(())
    }
}

/// `batch × len` token grid with MLM targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub batch: usize,
    pub len: usize,
    pub input_ids: Vec<usize>,
    /// Original token at corrupted positions, `None` elsewhere.
    pub targets: Vec<Option<usize>>,
    /// Number of real (non-padding) tokens in each sequence.
    pub key_lens: Vec<usize>,
    pub positions: Vec<f64>,
}

impl Batch {
    pub fn num_masked(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }

    /// `Some` only when some sequence is padded.
    pub fn padding(&self) -> Option<&[usize]> {
        self.key_lens.iter().any(|&l| l < self.len).then_some(&self.key_lens[..])
    }

    /// Rows `[from, to)` as a smaller batch.
    pub fn slice(&self, from: usize, to: usize) -> Batch {
        let (a, b) = (from * self.len, to * self.len);
        Batch {
            batch: to - from,
            len: self.len,
            input_ids: self.input_ids[a..b].to_vec(),
            targets: self.targets[a..b].to_vec(),
            key_lens: self.key_lens[from..to].to_vec(),
            positions: self.positions.clone(),
        }
    }
}

/// Applies the MLM corruption to `tokens` in place. Reserved ids are never
/// selected.
pub fn mask_tokens(tokens: &mut [usize], vocab_size: usize, cfg: &MaskConfig, rng: &mut Rng) -> Vec<Option<usize>> {
    tokens
        .iter_mut()
        .map(|t| {
            if Vocab::is_special(*t) || !rng.random_bool(cfg.mask_prob) {
                return None;
            }
            let orig = *t;
            let u = rng.random::<f64>();
            if u < cfg.mask_token_frac {
                *t = MASK;
            } else if u < cfg.mask_token_frac + cfg.random_token_frac {
                *t = rng.random_range(NUM_RESERVED..vocab_size);
            }
            Some(orig)
        })
        .collect()
}

/// Draws `batch` windows of a common length from `stream`, each starting with
/// `[CLS]`, and corrupts them. Returns `None` when nothing got masked.
pub fn make_mlm_batch(
    stream: &[usize],
    batch: usize,
    strategy: &LengthStrategy,
    mask: &MaskConfig,
    vocab_size: usize,
    rng: &mut Rng,
) -> Result<Option<Batch>> {
    strategy.validate()?;
    mask.validate()?;
    if vocab_size <= NUM_RESERVED {
        return Err(Error::Config("vocabulary has no ordinary tokens".into()));
    }
    let len = strategy.sample(rng);
    let body = len - 1;
    if stream.len() < body {
        return Err(Error::Input(format!(
            "token stream of {} tokens is too short for sequences of length {len}",
            stream.len()
        )));
    }
    let mut input_ids = Vec::with_capacity(batch * len);
    for _ in 0..batch {
        let start = rng.random_range(0..=stream.len() - body);
        input_ids.push(CLS);
        input_ids.extend_from_slice(&stream[start..start + body]);
    }
    let targets = mask_tokens(&mut input_ids, vocab_size, mask, rng);
    let b = Batch {
        batch,
        len,
        input_ids,
        targets,
        key_lens: vec![len; batch],
        positions: (0..len).map(|i| i as f64).collect(),
    };
    Ok((b.num_masked() > 0).then_some(b))
}
