use std::collections::BTreeMap;

use crate::corpus::{tokenize, EncodedEssay, Vocab};

/// Sorted `(feature id, value)` pairs.
pub type SparseVec = Vec<(usize, f64)>;

/// L1-normalized counts of non-reserved token ids. Markers and PAD/UNK/MASK
/// are skipped; an empty input gives the empty vector.
pub fn bow_counts(ids: impl IntoIterator<Item = usize>, vocab: &Vocab) -> SparseVec {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for id in ids {
        if !vocab.is_reserved(id) {
            *counts.entry(id).or_default() += 1;
        }
    }
    let total: usize = counts.values().sum();
    counts
        .into_iter()
        .map(|(k, c)| (k, c as f64 / total as f64))
        .collect()
}

/// Features for raw text. Out-of-vocabulary words map to UNK and are dropped.
pub fn bow_text_features(text: &str, vocab: &Vocab) -> SparseVec {
    bow_counts(tokenize(text).iter().map(|t| vocab.id(t)), vocab)
}

/// One feature vector per discourse element of an encoded essay.
pub fn bow_features(encoded: &EncodedEssay, vocab: &Vocab) -> Vec<SparseVec> {
    (0..encoded.num_elements())
        .map(|e| bow_counts(encoded.element_positions(e).into_iter().map(|t| encoded.token_ids[t]), vocab))
        .collect()
}
