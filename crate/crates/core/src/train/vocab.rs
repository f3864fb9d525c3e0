use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const MASK: usize = 2;
pub const CLS: usize = 3;
pub const SEP: usize = 4;
/// Number of reserved ids; ordinary tokens start here.
pub const NUM_RESERVED: usize = 5;

const RESERVED: [&str; NUM_RESERVED] = ["[PAD]", "[UNK]", "[MASK]", "[CLS]", "[SEP]"];

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3000..=0x303F      // CJK symbols and punctuation
        | 0x3400..=0x4DBF    // extension A
        | 0x4E00..=0x9FFF    // unified ideographs
        | 0xF900..=0xFAFF    // compatibility ideographs
        | 0xFF00..=0xFFEF    // half- and fullwidth forms
        | 0x20000..=0x2FA1F) // extensions B onward
}

/// Splits on whitespace, then emits every CJK codepoint as its own token and
/// each maximal run of other characters as one token.
pub fn tokenize(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut run_start: Option<usize> = None;
        for (i, c) in word.char_indices() {
            if is_cjk(c) {
                if let Some(s) = run_start.take() {
                    out.push(&word[s..i]);
                }
                out.push(&word[i..i + c.len_utf8()]);
            } else if run_start.is_none() {
                run_start = Some(i);
            }
        }
        if let Some(s) = run_start {
            out.push(&word[s..]);
        }
    }
    out
}

/// Token-to-id map with the five reserved ids in front.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Most frequent tokens first, ties broken lexicographically, truncated
    /// so the vocabulary (reserved ids included) has at most `max_size` entries.
    pub fn from_text(text: &str, max_size: usize) -> Result<Self> {
        if max_size <= NUM_RESERVED {
            return Err(Error::Config(format!(
                "vocabulary size {max_size} leaves no room beyond the {NUM_RESERVED} reserved ids"
            )));
        }
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for t in tokenize(text) {
            *counts.entry(t).or_default() += 1;
        }
        if counts.is_empty() {
            return Err(Error::Input("corpus contains no tokens".into()));
        }
        let mut ranked: Vec<(&str, u64)> = counts
            .into_iter()
            .filter(|(t, _)| !RESERVED.contains(t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_size - NUM_RESERVED);
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t.to_string()))
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).into_iter().map(|t| self.id(t)).collect()
    }

    pub fn is_special(id: usize) -> bool {
        id < NUM_RESERVED
    }

    /// One token per line, in id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < NUM_RESERVED || tokens[..NUM_RESERVED] != RESERVED {
            return Err(Error::Input(format!("{} is not a vocabulary file", path.display())));
        }
        Self::from_tokens(tokens)
    }
}

/// Reads a UTF-8 corpus and builds its vocabulary.
pub fn build_vocab(corpus_path: &Path, max_size: usize) -> Result<Vocab> {
    let text = std::fs::read_to_string(corpus_path).map_err(|e| Error::io(corpus_path, e))?;
    Vocab::from_text(&text, max_size)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_order_after_reserved() {
        let v = Vocab::from_text("a b a", 100).unwrap();
        assert_eq!(v.len(), NUM_RESERVED + 2);
        assert_eq!(v.id("a"), NUM_RESERVED);
        assert_eq!(v.id("b"), NUM_RESERVED + 1);
        assert_eq!(v.id("zzz"), UNK);
    }

    #[test]
    fn cjk_is_split_per_character() {
        assert_eq!(tokenize("我们 go走了abc。x"), vec!["我", "们", "go", "走", "了", "abc", "。", "x"]);
    }

    #[test]
    fn cap_sends_rare_tokens_to_unk() {
        let v = Vocab::from_text("a a a b b c", NUM_RESERVED + 2).unwrap();
        assert_eq!(v.encode("a b c"), vec![NUM_RESERVED, NUM_RESERVED + 1, UNK]);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(Vocab::from_text(" \n ", 10).is_err());
    }
}
