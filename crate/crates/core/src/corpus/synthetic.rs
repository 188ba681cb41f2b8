//! Seeded toy corpus with a learnable labelling rule.
//!
//! Filler words follow a sparse bigram chain. Each element carries one cue
//! word whose class, combined with the element's discourse type, fixes the
//! rating: `(type_index + cue_class) mod 3`. The type is only visible through
//! the marker tokens, so a model that never sees markers cannot recover it.
//! Twin essays reuse an earlier essay's element texts under different types,
//! which makes their token sequences identical once markers are removed.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DiscourseElement, DiscourseType, Essay, Rating};

const FILLERS: [&str; 40] = [
    "the", "student", "school", "people", "think", "that", "many", "should", "would", "because", "time",
    "help", "more", "when", "they", "class", "work", "better", "make", "some", "good", "idea", "online",
    "learn", "choice", "advice", "world", "being", "could", "about", "will", "friends", "reason", "also",
    "other", "first", "every", "life", "example", "years",
];

const CUES: [[&str; 2]; 3] = [["weak", "unclear"], ["fine", "okay"], ["strong", "convincing"]];

const CONNECTORS: [&str; 4] = ["so", "and", "then", "but"];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_essays: usize,
    pub min_elements: usize,
    pub max_elements: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// Trailing essays generated as twins of earlier ones.
    pub twins: usize,
    /// Probability that an element's rating is moved to one of the other two
    /// classes. Drawn from a separate stream, so 0 leaves the corpus unchanged.
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_essays: 20,
            min_elements: 3,
            max_elements: 4,
            min_words: 3,
            max_words: 6,
            twins: 0,
            label_noise: 0.0,
            seed: 0,
        }
    }
}

struct Chain {
    next: Vec<Vec<usize>>,
}

impl Chain {
    fn new(rng: &mut impl Rng) -> Self {
        let next = (0..FILLERS.len())
            .map(|_| (0..4).map(|_| rng.random_range(0..FILLERS.len())).collect())
            .collect();
        Chain { next }
    }

    fn words(&self, n: usize, rng: &mut impl Rng) -> Vec<&'static str> {
        let mut cur = rng.random_range(0..FILLERS.len());
        let mut out = vec![FILLERS[cur]];
        while out.len() < n {
            cur = *self.next[cur].choose(rng).expect("non-empty successors");
            out.push(FILLERS[cur]);
        }
        out
    }
}

struct Draft {
    dtype: DiscourseType,
    body: String,
    cue_class: usize,
}

fn assemble(essay_id: String, drafts: &[Draft], rng: &mut impl Rng) -> Essay {
    let mut text = String::new();
    let mut elements = Vec::with_capacity(drafts.len());
    for (i, d) in drafts.iter().enumerate() {
        if i > 0 {
            text.push(' ');
            text.push_str(CONNECTORS.choose(rng).expect("non-empty"));
            text.push(' ');
        }
        let start = text.chars().count();
        text.push_str(&d.body);
        let end = text.chars().count();
        let rating = Rating::from_index((d.dtype.index() + d.cue_class) % 3);
        elements.push(DiscourseElement {
            element_id: format!("{essay_id}_{i}"),
            dtype: d.dtype,
            span: (start, end),
            rating,
        });
    }
    text.push('.');
    Essay {
        essay_id,
        text,
        elements,
    }
}

pub fn synthetic_corpus(cfg: &SynthConfig) -> Vec<Essay> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let chain = Chain::new(&mut rng);
    let originals = cfg.num_essays - cfg.twins.min(cfg.num_essays / 2);
    let mut drafts: Vec<Vec<Draft>> = Vec::with_capacity(cfg.num_essays);
    for _ in 0..originals {
        let n = rng.random_range(cfg.min_elements..=cfg.max_elements);
        let essay = (0..n)
            .map(|_| {
                let dtype = *DiscourseType::ALL.choose(&mut rng).expect("non-empty");
                let words = rng.random_range(cfg.min_words..=cfg.max_words);
                let mut body = chain.words(words, &mut rng);
                let cue_class = rng.random_range(0..3);
                let cue = *CUES[cue_class].choose(&mut rng).expect("non-empty");
                let at = rng.random_range(0..=body.len());
                body.insert(at, cue);
                Draft {
                    dtype,
                    body: body.join(" "),
                    cue_class,
                }
            })
            .collect();
        drafts.push(essay);
    }
    for t in 0..cfg.num_essays - originals {
        let twin = drafts[t]
            .iter()
            .map(|d| {
                // Shift the type by 1 or 2 (mod 3 classes) so every rating changes.
                let shift = rng.random_range(1..=2);
                let candidates: Vec<DiscourseType> = DiscourseType::ALL
                    .into_iter()
                    .filter(|o| (o.index() + 3 - d.dtype.index() % 3) % 3 == shift)
                    .collect();
                Draft {
                    dtype: *candidates.choose(&mut rng).expect("every residue class is populated"),
                    body: d.body.clone(),
                    cue_class: d.cue_class,
                }
            })
            .collect();
        drafts.push(twin);
    }
    let mut essays: Vec<Essay> = drafts
        .iter()
        .enumerate()
        .map(|(i, d)| assemble(format!("essay{i:03}"), d, &mut rng))
        .collect();
    if cfg.label_noise > 0.0 {
        let mut noise = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x006e_6f69_7365);
        for el in essays.iter_mut().flat_map(|e| e.elements.iter_mut()) {
            if noise.random::<f64>() < cfg.label_noise {
                let shift = noise.random_range(1..=2);
                el.rating = el.rating.and_then(|r| Rating::from_index((r.index() + shift) % 3));
            }
        }
    }
    essays
}

#[cfg(test)]
mod tests {
    use super::super::{build_vocab, encode, EncodeOptions};
    use super::*;

    #[test]
    fn deterministic_and_valid() {
        let cfg = SynthConfig {
            seed: 4,
            twins: 4,
            ..SynthConfig::default()
        };
        let a = synthetic_corpus(&cfg);
        assert_eq!(a, synthetic_corpus(&cfg));
        assert_eq!(a.len(), 20);
        for e in &a {
            e.validate().unwrap();
            for el in &e.elements {
                assert!(el.rating.is_some());
            }
        }
    }

    #[test]
    fn twins_differ_only_through_markers() {
        let cfg = SynthConfig {
            seed: 1,
            num_essays: 6,
            twins: 2,
            ..SynthConfig::default()
        };
        let corpus = synthetic_corpus(&cfg);
        let vocab = build_vocab(&corpus, 300, false).unwrap();
        let bare = EncodeOptions {
            max_len: 64,
            insert_markers: false,
            ..Default::default()
        };
        for t in 0..2 {
            let (orig, twin) = (&corpus[t], &corpus[4 + t]);
            let a = encode(orig, &vocab, &bare).unwrap();
            let b = encode(twin, &vocab, &bare).unwrap();
            assert_eq!(a.tokens(), b.tokens());
            for (x, y) in orig.elements.iter().zip(&twin.elements) {
                assert_ne!(x.rating, y.rating);
            }
        }
    }

    #[test]
    fn label_noise_only_touches_ratings() {
        let clean = synthetic_corpus(&SynthConfig {
            num_essays: 200,
            ..SynthConfig::default()
        });
        let noisy = synthetic_corpus(&SynthConfig {
            num_essays: 200,
            label_noise: 0.2,
            ..SynthConfig::default()
        });
        let (mut total, mut flipped) = (0, 0);
        for (a, b) in clean.iter().zip(&noisy) {
            assert_eq!(a.text, b.text);
            for (x, y) in a.elements.iter().zip(&b.elements) {
                total += 1;
                flipped += usize::from(x.rating != y.rating);
            }
        }
        let rate = flipped as f64 / total as f64;
        assert!((rate - 0.2).abs() < 0.05, "{rate}");
    }

    #[test]
    fn vocabulary_stays_small() {
        let corpus = synthetic_corpus(&SynthConfig::default());
        let vocab = build_vocab(&corpus, 1000, true).unwrap();
        assert!(vocab.len() <= 300);
    }
}
