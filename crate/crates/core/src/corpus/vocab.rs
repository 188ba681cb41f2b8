use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use super::{DiscourseType, Essay};
use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const MASK: &str = "[MASK]";

const VOCAB_HEADER: &str = "# discourse-vocab v1";

/// Splits text into lowercase word tokens and single punctuation tokens.
/// Bracketed marker tokens such as `[CLAIM_START]` pass through unchanged.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        if is_marker(chunk) {
            out.push(chunk.to_string());
            continue;
        }
        let mut word = String::new();
        for ch in chunk.chars() {
            if ch.is_alphanumeric() {
                word.extend(ch.to_lowercase());
            } else {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(ch.to_string());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

fn is_marker(s: &str) -> bool {
    s.starts_with('[')
        && s.ends_with(']')
        && (s.ends_with("_START]") || s.ends_with("_END]"))
        && DiscourseType::all_markers().iter().any(|m| m == s)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    has_mask: bool,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let has_mask = tokens.get(2).is_some_and(|t| t == MASK);
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::config(format!("duplicate vocabulary token `{t}`")));
            }
        }
        let v = Vocab {
            tokens,
            index,
            has_mask,
        };
        for (i, expected) in v.reserved_tokens().iter().enumerate() {
            if v.tokens.get(i) != Some(expected) {
                return Err(Error::config(format!(
                    "vocabulary id {i} must be reserved token `{expected}`"
                )));
            }
        }
        Ok(v)
    }

    fn reserved_tokens(&self) -> Vec<String> {
        reserved(self.has_mask)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn num_reserved(&self) -> usize {
        if self.has_mask {
            17
        } else {
            16
        }
    }

    pub fn pad_id(&self) -> usize {
        0
    }

    pub fn unk_id(&self) -> usize {
        1
    }

    pub fn mask_id(&self) -> Option<usize> {
        self.has_mask.then_some(2)
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(1)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn start_id(&self, t: DiscourseType) -> usize {
        self.marker_base() + 2 * t.index()
    }

    pub fn end_id(&self, t: DiscourseType) -> usize {
        self.start_id(t) + 1
    }

    fn marker_base(&self) -> usize {
        if self.has_mask {
            3
        } else {
            2
        }
    }

    pub fn is_marker(&self, id: usize) -> bool {
        (self.marker_base()..self.num_reserved()).contains(&id)
    }

    pub fn is_reserved(&self, id: usize) -> bool {
        id < self.num_reserved()
    }

    pub fn encode_text(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    pub fn to_file_string(&self) -> String {
        let mut s = String::from(VOCAB_HEADER);
        s.push('\n');
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_file_string())?;
        Ok(())
    }

    /// Reads a vocabulary file: a header line, then one token per line (id = line index).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == VOCAB_HEADER => {}
            other => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: 1,
                    message: format!("expected `{VOCAB_HEADER}`, found {other:?}"),
                })
            }
        }
        Self::from_tokens(lines.map(str::to_string).collect())
    }
}

fn reserved(with_mask: bool) -> Vec<String> {
    let mut r = vec![PAD.to_string(), UNK.to_string()];
    if with_mask {
        r.push(MASK.to_string());
    }
    r.extend(DiscourseType::all_markers());
    r
}

/// Builds a vocabulary of at most `max_size` entries: reserved tokens first,
/// then corpus words by descending frequency with lexicographic tie-breaks.
pub fn build_vocab(corpus: &[Essay], max_size: usize, with_mask: bool) -> Result<Vocab> {
    let mut tokens = reserved(with_mask);
    if max_size <= tokens.len() {
        return Err(Error::contract(format!(
            "max_size {max_size} leaves no room beyond {} reserved tokens",
            tokens.len()
        )));
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for essay in corpus {
        for t in tokenize(&essay.text) {
            if !is_marker(&t) {
                *counts.entry(t).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let room = max_size - tokens.len();
    tokens.extend(ranked.into_iter().take(room).map(|(t, _)| t));
    Vocab::from_tokens(tokens)
}
