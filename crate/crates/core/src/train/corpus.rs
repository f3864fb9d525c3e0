use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

use super::vocab::{Vocab, SEP};

/// Encoded corpus: documents joined by `SEP`, split by document into a
/// training part and a held-out tail.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenStream {
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
}

impl TokenStream {
    /// The last `eval_fraction` of documents (at least one, when there are
    /// two or more) go to the held-out part. A single-document corpus is
    /// used for both parts.
    pub fn from_text(text: &str, vocab: &Vocab, eval_fraction: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&eval_fraction) {
            return Err(Error::Config(format!("eval fraction {eval_fraction} outside [0, 1)")));
        }
        let docs: Vec<Vec<usize>> = text
            .lines()
            .map(|l| vocab.encode(l))
            .filter(|d| !d.is_empty())
            .collect();
        if docs.is_empty() {
            return Err(Error::Input("corpus contains no documents".into()));
        }
        let join = |ds: &[Vec<usize>]| {
            let mut out = Vec::new();
            for (i, d) in ds.iter().enumerate() {
                if i > 0 {
                    out.push(SEP);
                }
                out.extend_from_slice(d);
            }
            out
        };
        if docs.len() == 1 {
            let all = join(&docs);
            return Ok(Self {
                train: all.clone(),
                eval: all,
            });
        }
        let n_eval = ((docs.len() as f64 * eval_fraction).round() as usize).clamp(1, docs.len() - 1);
        let split = docs.len() - n_eval;
        Ok(Self {
            train: join(&docs[..split]),
            eval: join(&docs[split..]),
        })
    }

    pub fn from_file(path: &Path, vocab: &Vocab, eval_fraction: f64) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, vocab, eval_fraction)
    }
}

/// Shape of the generated corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticCorpusConfig {
    pub target_bytes: usize,
    pub charset_size: usize,
    pub lexicon_size: usize,
    /// Successor candidates per word; sentences follow them half the time.
    pub successors: usize,
    pub seed: u64,
}

impl Default for SyntheticCorpusConfig {
    fn default() -> Self {
        Self {
            target_bytes: 1 << 20,
            charset_size: 600,
            lexicon_size: 3000,
            successors: 6,
            seed: 0,
        }
    }
}

/// Deterministic Chinese-like text: multi-character words drawn from a
/// Zipfian lexicon with a sparse word-bigram structure, sentences ending in
/// `。`, one document per line.
pub fn synthetic_corpus(cfg: &SyntheticCorpusConfig) -> Result<String> {
    if cfg.charset_size < 2 || cfg.lexicon_size < 2 || cfg.successors == 0 {
        return Err(Error::Config("synthetic corpus needs at least two characters and words".into()));
    }
    let mut r = rng::seeded(cfg.seed);
    let chars: Vec<char> = (0..cfg.charset_size)
        .map(|i| char::from_u32(0x4E00 + (i as u32) * 7).expect("valid ideograph"))
        .collect();
    let char_zipf = Zipf::new(cfg.charset_size as f64, 1.0).expect("valid zipf");
    let word_zipf = Zipf::new(cfg.lexicon_size as f64, 1.05).expect("valid zipf");

    let mut lexicon: Vec<String> = Vec::with_capacity(cfg.lexicon_size);
    let mut seen = std::collections::HashSet::new();
    while lexicon.len() < cfg.lexicon_size {
        let len = match r.random::<f64>() {
            p if p < 0.15 => 1,
            p if p < 0.65 => 2,
            p if p < 0.9 => 3,
            _ => 4,
        };
        let w: String = (0..len)
            .map(|_| chars[char_zipf.sample(&mut r) as usize - 1])
            .collect();
        if seen.insert(w.clone()) {
            lexicon.push(w);
        }
    }
    let next: Vec<Vec<usize>> = (0..cfg.lexicon_size)
        .map(|_| {
            (0..cfg.successors)
                .map(|_| word_zipf.sample(&mut r) as usize - 1)
                .collect()
        })
        .collect();

    let mut out = String::with_capacity(cfg.target_bytes + 1024);
    while out.len() < cfg.target_bytes {
        let sentences = r.random_range(3..=8);
        for _ in 0..sentences {
            let words = r.random_range(5..=14);
            let mut w = word_zipf.sample(&mut r) as usize - 1;
            for _ in 0..words {
                out.push_str(&lexicon[w]);
                w = if r.random_bool(0.5) {
                    next[w][r.random_range(0..cfg.successors)]
                } else {
                    word_zipf.sample(&mut r) as usize - 1
                };
            }
            out.push('。');
        }
        out.push('\n');
    }
    Ok(out)
}
