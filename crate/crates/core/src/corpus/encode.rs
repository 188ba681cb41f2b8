use serde::{Deserialize, Serialize};

use super::vocab::tokenize;
use super::{char_slice, Essay, MarkerOptions, Rating, Vocab};
use crate::error::{Error, Result};
use crate::exec::Exec;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodeOptions {
    pub max_len: usize,
    pub markers: MarkerOptions,
    /// Wrap elements in START/END marker tokens. Off only for ablations.
    pub insert_markers: bool,
    pub exclude_markers_from_labels: bool,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        EncodeOptions {
            max_len: 512,
            markers: MarkerOptions::default(),
            insert_markers: true,
            exclude_markers_from_labels: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedEssay {
    pub essay_id: String,
    /// Exactly `max_len` ids; positions from `length` on are PAD.
    pub token_ids: Vec<usize>,
    /// Class per token, `None` for IGNORE.
    pub token_labels: Vec<Option<usize>>,
    pub token_element_index: Vec<Option<usize>>,
    pub truncated: bool,
    pub length: usize,
    pub element_ids: Vec<String>,
    pub element_ratings: Vec<Option<usize>>,
}

impl EncodedEssay {
    /// Non-PAD prefix.
    pub fn tokens(&self) -> &[usize] {
        &self.token_ids[..self.length]
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.token_labels[..self.length]
    }

    pub fn num_elements(&self) -> usize {
        self.element_ids.len()
    }

    /// Positions of the tokens that belong to element `i`.
    pub fn element_positions(&self, i: usize) -> Vec<usize> {
        self.token_element_index[..self.length]
            .iter()
            .enumerate()
            .filter(|(_, e)| **e == Some(i))
            .map(|(t, _)| t)
            .collect()
    }

    pub fn labelled_tokens(&self) -> usize {
        self.labels().iter().filter(|l| l.is_some()).count()
    }
}

/// Marker insertion, tokenization, prefix truncation and padding.
pub fn encode(essay: &Essay, vocab: &Vocab, opts: &EncodeOptions) -> Result<EncodedEssay> {
    if opts.max_len < 8 {
        return Err(Error::contract(format!("max_len {} is below 8", opts.max_len)));
    }
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut owners = Vec::new();
    let push_gap = |ids: &mut Vec<usize>, labels: &mut Vec<Option<usize>>, owners: &mut Vec<Option<usize>>, text: &str| {
        for t in tokenize(text) {
            ids.push(vocab.id(&t));
            labels.push(None);
            owners.push(None);
        }
    };
    let mut prev_end = 0;
    for (i, el) in essay.elements.iter().enumerate() {
        if opts.markers.keep_gap_text {
            push_gap(&mut ids, &mut labels, &mut owners, char_slice(&essay.text, prev_end, el.span.0));
        }
        let label = el.rating.map(Rating::index);
        let marker_label = if opts.exclude_markers_from_labels { None } else { label };
        if opts.insert_markers {
            ids.push(vocab.start_id(el.dtype));
            labels.push(marker_label);
            owners.push(Some(i));
        }
        for t in tokenize(essay.element_text(i)) {
            ids.push(vocab.id(&t));
            labels.push(label);
            owners.push(Some(i));
        }
        if opts.insert_markers {
            ids.push(vocab.end_id(el.dtype));
            labels.push(marker_label);
            owners.push(Some(i));
        }
        prev_end = el.span.1;
    }
    if opts.markers.keep_gap_text {
        let len = essay.text.chars().count();
        push_gap(&mut ids, &mut labels, &mut owners, char_slice(&essay.text, prev_end, len));
    }

    let truncated = ids.len() > opts.max_len;
    let length = ids.len().min(opts.max_len);
    ids.truncate(length);
    labels.truncate(length);
    owners.truncate(length);
    ids.resize(opts.max_len, vocab.pad_id());
    labels.resize(opts.max_len, None);
    owners.resize(opts.max_len, None);

    Ok(EncodedEssay {
        essay_id: essay.essay_id.clone(),
        token_ids: ids,
        token_labels: labels,
        token_element_index: owners,
        truncated,
        length,
        element_ids: essay.elements.iter().map(|e| e.element_id.clone()).collect(),
        element_ratings: essay.elements.iter().map(|e| e.rating.map(Rating::index)).collect(),
    })
}

pub fn encode_corpus(essays: &[Essay], vocab: &Vocab, opts: &EncodeOptions, exec: Exec) -> Result<Vec<EncodedEssay>> {
    exec.map(essays, |e| encode(e, vocab, opts)).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::super::{build_vocab, DiscourseElement, DiscourseType};
    use super::*;

    fn sample() -> Essay {
        let text = "Alpha beta gamma. Then delta epsilon, zeta eta theta iota.";
        Essay {
            essay_id: "s".into(),
            text: text.into(),
            elements: vec![
                DiscourseElement {
                    element_id: "e0".into(),
                    dtype: DiscourseType::Lead,
                    span: (0, 17),
                    rating: Some(Rating::Adequate),
                },
                DiscourseElement {
                    element_id: "e1".into(),
                    dtype: DiscourseType::Claim,
                    span: (23, 58),
                    rating: None,
                },
            ],
        }
    }

    #[test]
    fn labels_follow_elements() {
        let essay = sample();
        let vocab = build_vocab(std::slice::from_ref(&essay), 100, false).unwrap();
        let enc = encode(&essay, &vocab, &EncodeOptions { max_len: 32, ..Default::default() }).unwrap();
        // [LEAD_START] alpha beta gamma . [LEAD_END] [CLAIM_START] delta epsilon , zeta eta theta iota . [CLAIM_END]
        assert_eq!(enc.length, 16);
        assert!(!enc.truncated);
        assert!(enc.labels()[..6].iter().all(|l| *l == Some(1)));
        assert!(enc.labels()[6..].iter().all(|l| l.is_none()));
        assert!(enc.token_element_index[6..16].iter().all(|o| *o == Some(1)));
        assert_eq!(enc.token_ids[16], vocab.pad_id());
        assert_eq!(enc.token_labels[20], None);
        assert_eq!(enc.token_ids[0], vocab.start_id(DiscourseType::Lead));
    }

    #[test]
    fn truncation_keeps_prefix_and_partial_element() {
        let essay = sample();
        let vocab = build_vocab(std::slice::from_ref(&essay), 100, false).unwrap();
        let enc = encode(&essay, &vocab, &EncodeOptions { max_len: 9, ..Default::default() }).unwrap();
        assert!(enc.truncated);
        assert_eq!(enc.length, 9);
        assert_eq!(enc.element_positions(1), vec![6, 7, 8]);
    }

    #[test]
    fn marker_label_exclusion_and_marker_free_mode() {
        let essay = sample();
        let vocab = build_vocab(std::slice::from_ref(&essay), 100, false).unwrap();
        let opts = EncodeOptions {
            max_len: 32,
            exclude_markers_from_labels: true,
            ..Default::default()
        };
        let enc = encode(&essay, &vocab, &opts).unwrap();
        assert_eq!(enc.token_labels[0], None);
        assert_eq!(enc.token_labels[1], Some(1));
        let bare = encode(&essay, &vocab, &EncodeOptions { max_len: 32, insert_markers: false, ..Default::default() }).unwrap();
        assert_eq!(bare.length, 12);
        assert!(bare.tokens().iter().all(|&t| !vocab.is_marker(t)));
    }

    #[test]
    fn short_max_len_rejected() {
        let essay = sample();
        let vocab = build_vocab(std::slice::from_ref(&essay), 100, false).unwrap();
        assert!(encode(&essay, &vocab, &EncodeOptions { max_len: 7, ..Default::default() }).is_err());
    }
}
