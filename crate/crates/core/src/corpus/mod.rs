//! Annotated essays, marker insertion, vocabulary and token-level encoding.

mod encode;
mod synthetic;
mod vocab;

pub use encode::{encode, encode_corpus, EncodeOptions, EncodedEssay};
pub use synthetic::{synthetic_corpus, SynthConfig};
pub use vocab::{build_vocab, tokenize, Vocab, MASK, PAD, UNK};

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CORPUS_HEADER: &str = "# discourse-corpus v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DiscourseType {
    Lead,
    Position,
    Claim,
    Counterclaim,
    Rebuttal,
    Evidence,
    ConcludingStatement,
}

impl DiscourseType {
    pub const ALL: [DiscourseType; 7] = [
        DiscourseType::Lead,
        DiscourseType::Position,
        DiscourseType::Claim,
        DiscourseType::Counterclaim,
        DiscourseType::Rebuttal,
        DiscourseType::Evidence,
        DiscourseType::ConcludingStatement,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            DiscourseType::Lead => "Lead",
            DiscourseType::Position => "Position",
            DiscourseType::Claim => "Claim",
            DiscourseType::Counterclaim => "Counterclaim",
            DiscourseType::Rebuttal => "Rebuttal",
            DiscourseType::Evidence => "Evidence",
            DiscourseType::ConcludingStatement => "Concluding Statement",
        }
    }

    fn marker_stem(self) -> &'static str {
        match self {
            DiscourseType::Lead => "LEAD",
            DiscourseType::Position => "POSITION",
            DiscourseType::Claim => "CLAIM",
            DiscourseType::Counterclaim => "COUNTERCLAIM",
            DiscourseType::Rebuttal => "REBUTTAL",
            DiscourseType::Evidence => "EVIDENCE",
            DiscourseType::ConcludingStatement => "CONCLUDING_STATEMENT",
        }
    }

    pub fn start_marker(self) -> String {
        format!("[{}_START]", self.marker_stem())
    }

    pub fn end_marker(self) -> String {
        format!("[{}_END]", self.marker_stem())
    }

    /// All fourteen marker tokens, START before END, in type order.
    pub fn all_markers() -> Vec<String> {
        Self::ALL
            .iter()
            .flat_map(|t| [t.start_marker(), t.end_marker()])
            .collect()
    }
}

impl fmt::Display for DiscourseType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DiscourseType {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let key: String = s
            .chars()
            .filter(|c| c.is_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|t| t.marker_stem().replace('_', "").to_ascii_lowercase() == key)
            .ok_or_else(|| format!("unknown discourse type `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Rating {
    Ineffective = 0,
    Adequate = 1,
    Effective = 2,
}

impl Rating {
    pub const ALL: [Rating; 3] = [Rating::Ineffective, Rating::Adequate, Rating::Effective];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Rating> {
        Self::ALL.get(i).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiscourseElement {
    pub element_id: String,
    pub dtype: DiscourseType,
    /// Character (not byte) offsets into the essay text, end exclusive.
    pub span: (usize, usize),
    pub rating: Option<Rating>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Essay {
    pub essay_id: String,
    pub text: String,
    pub elements: Vec<DiscourseElement>,
}

impl Essay {
    pub fn element_text(&self, i: usize) -> &str {
        let (s, e) = self.elements[i].span;
        char_slice(&self.text, s, e)
    }

    fn invalid(&self, reason: impl Into<String>) -> Error {
        Error::Validation {
            essay_id: self.essay_id.clone(),
            reason: reason.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.elements.is_empty() {
            return Err(self.invalid("essay has no discourse elements"));
        }
        let len = self.text.chars().count();
        let mut prev_end = 0;
        for (i, el) in self.elements.iter().enumerate() {
            let (s, e) = el.span;
            if s >= e || e > len {
                return Err(self.invalid(format!(
                    "element {} has span {s}..{e} outside text of length {len}",
                    el.element_id
                )));
            }
            if i > 0 && s < prev_end {
                return Err(self.invalid(format!(
                    "element {} overlaps or precedes the previous element",
                    el.element_id
                )));
            }
            prev_end = e;
        }
        Ok(())
    }
}

pub(crate) fn char_slice(text: &str, start: usize, end: usize) -> &str {
    let mut idx = text.char_indices().map(|(b, _)| b).chain([text.len()]);
    let b0 = idx.nth(start).unwrap_or(text.len());
    let b1 = if end > start {
        idx.nth(end - start - 1).unwrap_or(text.len())
    } else {
        b0
    };
    &text[b0..b1]
}

#[derive(Serialize, Deserialize)]
struct ElementRecord {
    element_id: String,
    #[serde(rename = "type")]
    dtype: String,
    start: usize,
    end: usize,
    rating: Option<i64>,
}

#[derive(Serialize, Deserialize)]
struct EssayRecord {
    essay_id: String,
    text: String,
    elements: Vec<ElementRecord>,
}

impl EssayRecord {
    fn into_essay(self) -> Result<Essay> {
        let essay_id = self.essay_id;
        let invalid = |reason: String| Error::Validation {
            essay_id: essay_id.clone(),
            reason,
        };
        let mut elements = Vec::with_capacity(self.elements.len());
        for el in self.elements {
            let dtype = el
                .dtype
                .parse()
                .map_err(|e| invalid(format!("element {}: {e}", el.element_id)))?;
            let rating = match el.rating {
                None => None,
                Some(r) => Some(
                    usize::try_from(r)
                        .ok()
                        .and_then(Rating::from_index)
                        .ok_or_else(|| invalid(format!("element {}: rating {r} not in 0..=2", el.element_id)))?,
                ),
            };
            elements.push(DiscourseElement {
                element_id: el.element_id,
                dtype,
                span: (el.start, el.end),
                rating,
            });
        }
        let essay = Essay {
            essay_id: essay_id.clone(),
            text: self.text,
            elements,
        };
        essay.validate()?;
        Ok(essay)
    }

    fn from_essay(e: &Essay) -> Self {
        EssayRecord {
            essay_id: e.essay_id.clone(),
            text: e.text.clone(),
            elements: e
                .elements
                .iter()
                .map(|el| ElementRecord {
                    element_id: el.element_id.clone(),
                    dtype: el.dtype.name().to_string(),
                    start: el.span.0,
                    end: el.span.1,
                    rating: el.rating.map(|r| r.index() as i64),
                })
                .collect(),
        }
    }
}

/// Reads a JSONL corpus. Lines starting with `#` are comments; the first
/// one, if present, must be the version header.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Essay>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut essays = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if trimmed.starts_with('#') {
            if i == 0 && trimmed.starts_with("# discourse-corpus") && trimmed != CORPUS_HEADER {
                return Err(parse_err(1, format!("unsupported corpus version `{trimmed}`")));
            }
            continue;
        }
        let record: EssayRecord =
            serde_json::from_str(trimmed).map_err(|e| parse_err(i + 1, e.to_string()))?;
        essays.push(record.into_essay()?);
    }
    Ok(essays)
}

pub fn write_corpus(path: impl AsRef<Path>, essays: &[Essay]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{CORPUS_HEADER}")?;
    for e in essays {
        let line = serde_json::to_string(&EssayRecord::from_essay(e)).expect("records serialize");
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MarkerOptions {
    /// Keep non-element text between elements instead of dropping it.
    pub keep_gap_text: bool,
    pub separator: String,
}

impl Default for MarkerOptions {
    fn default() -> Self {
        MarkerOptions {
            keep_gap_text: false,
            separator: " ".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MarkedEssay {
    pub text: String,
    /// Character span of each element's text inside `text`.
    pub spans: Vec<(usize, usize)>,
}

/// Wraps every element as `[T_START] text [T_END]` and concatenates them in order.
pub fn insert_discourse_markers(essay: &Essay, opts: &MarkerOptions) -> MarkedEssay {
    let mut parts: Vec<String> = Vec::new();
    let mut spans = Vec::with_capacity(essay.elements.len());
    let mut cursor_chars = 0usize;
    let mut prev_end = 0usize;
    let sep_len = opts.separator.chars().count();
    let push = |parts: &mut Vec<String>, s: String, cursor: &mut usize| {
        if !parts.is_empty() {
            *cursor += sep_len;
        }
        *cursor += s.chars().count();
        parts.push(s);
    };
    let text_len = essay.text.chars().count();
    for (i, el) in essay.elements.iter().enumerate() {
        if opts.keep_gap_text {
            let gap = char_slice(&essay.text, prev_end, el.span.0).trim();
            if !gap.is_empty() {
                push(&mut parts, gap.to_string(), &mut cursor_chars);
            }
        }
        push(&mut parts, el.dtype.start_marker(), &mut cursor_chars);
        let body = essay.element_text(i).to_string();
        let start = cursor_chars + sep_len;
        push(&mut parts, body, &mut cursor_chars);
        spans.push((start, cursor_chars));
        push(&mut parts, el.dtype.end_marker(), &mut cursor_chars);
        prev_end = el.span.1;
    }
    if opts.keep_gap_text {
        let tail = char_slice(&essay.text, prev_end, text_len).trim();
        if !tail.is_empty() {
            push(&mut parts, tail.to_string(), &mut cursor_chars);
        }
    }
    MarkedEssay {
        text: parts.join(&opts.separator),
        spans,
    }
}
