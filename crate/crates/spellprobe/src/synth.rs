//! Synthetic word-like vocabularies and corpora.
//!
//! Used for the random-vector control (`--random V,D` needs token strings,
//! not just vectors), for demos, and for desk-scale experiments. Tokens mix
//! weighted English-ish syllables with cased variants and all-digit entries
//! so character statistics resemble a real subword vocabulary — the control
//! probe's chrF and Levenshtein floors come from exactly those statistics.

use std::collections::HashSet;

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;

use crate::seeding;
use crate::store::{Vocabulary, CANONICAL_MARKER};

const ONSETS: &[(&str, u32)] = &[
    ("", 16),
    ("s", 8),
    ("t", 7),
    ("c", 6),
    ("b", 6),
    ("m", 6),
    ("r", 5),
    ("d", 5),
    ("p", 5),
    ("l", 4),
    ("n", 4),
    ("f", 4),
    ("h", 4),
    ("g", 3),
    ("w", 3),
    ("v", 2),
    ("k", 2),
    ("j", 1),
    ("z", 1),
    ("qu", 1),
    ("th", 3),
    ("st", 3),
    ("ch", 2),
    ("sh", 2),
    ("br", 2),
    ("tr", 2),
    ("cr", 1),
    ("dr", 1),
    ("fr", 1),
    ("pr", 1),
    ("fl", 1),
    ("pl", 1),
    ("gr", 1),
    ("sl", 1),
    ("sp", 1),
    ("sk", 1),
    ("sn", 1),
    ("sw", 1),
];

const NUCLEI: &[(&str, u32)] = &[
    ("e", 8),
    ("a", 8),
    ("i", 7),
    ("o", 7),
    ("u", 5),
    ("y", 3),
    ("ea", 2),
    ("ou", 2),
    ("ai", 2),
    ("ee", 2),
    ("oa", 2),
    ("oo", 2),
    ("ie", 2),
    ("au", 1),
    ("oi", 1),
    ("ue", 1),
];

const CODAS: &[(&str, u32)] = &[
    ("", 14),
    ("n", 6),
    ("r", 6),
    ("s", 5),
    ("t", 5),
    ("l", 4),
    ("d", 3),
    ("m", 3),
    ("k", 2),
    ("p", 2),
    ("g", 2),
    ("b", 1),
    ("x", 1),
    ("ng", 2),
    ("st", 2),
    ("ck", 2),
    ("nt", 2),
    ("nd", 2),
    ("rt", 1),
    ("mp", 1),
    ("sk", 1),
    ("ft", 1),
    ("rn", 1),
    ("ls", 1),
    ("ct", 1),
];

const SUFFIXES: &[(&str, u32)] = &[
    ("", 22),
    ("s", 4),
    ("ed", 2),
    ("ing", 2),
    ("er", 2),
    ("y", 2),
    ("ly", 1),
    ("est", 1),
];

/// Share of tokens that carry the word-start marker, roughly matching BPE
/// vocabularies where most entries begin a word.
const MARKER_PROB: f64 = 0.85;
/// Share of tokens whose first letter is capitalized, mirroring the cased
/// variants real subword vocabularies carry.
const CAPITAL_PROB: f64 = 0.22;
/// Share of all-digit tokens (years, counts, zip fragments — BPE
/// vocabularies are full of them).
const DIGIT_PROB: f64 = 0.05;

fn pick<'a, R: Rng>(rng: &mut R, table: &'a [(&'a str, u32)], dist: &WeightedIndex<u32>) -> &'a str {
    table[dist.sample(rng)].0
}

/// Generate `v` unique word-like tokens, deterministic in `seed`.
/// Lengths land in 2..=12 characters plus an optional leading marker.
pub fn synthetic_vocabulary(v: usize, seed: u64) -> Vocabulary {
    let mut rng = seeding::stream(seed, "synth-vocab", &[v as u64]);
    let onset_dist = WeightedIndex::new(ONSETS.iter().map(|e| e.1)).unwrap();
    let nucleus_dist = WeightedIndex::new(NUCLEI.iter().map(|e| e.1)).unwrap();
    let coda_dist = WeightedIndex::new(CODAS.iter().map(|e| e.1)).unwrap();
    let suffix_dist = WeightedIndex::new(SUFFIXES.iter().map(|e| e.1)).unwrap();

    let mut seen = HashSet::with_capacity(v);
    let mut tokens = Vec::with_capacity(v);
    while tokens.len() < v {
        let mut word = if rng.random_bool(DIGIT_PROB) {
            let len = *[2, 2, 3, 3, 4, 4].choose(&mut rng).unwrap();
            (0..len)
                .map(|_| char::from(b'0' + rng.random_range(0..10u8)))
                .collect()
        } else {
            let syllables = *[1, 1, 2, 2, 3, 3, 4].choose(&mut rng).unwrap();
            let mut word = String::new();
            for _ in 0..syllables {
                word.push_str(pick(&mut rng, ONSETS, &onset_dist));
                word.push_str(pick(&mut rng, NUCLEI, &nucleus_dist));
                word.push_str(pick(&mut rng, CODAS, &coda_dist));
            }
            word.push_str(pick(&mut rng, SUFFIXES, &suffix_dist));
            if rng.random_bool(CAPITAL_PROB) {
                let head = word.remove(0).to_ascii_uppercase();
                word.insert(0, head);
            }
            word
        };
        if word.len() < 2 || word.len() > 12 {
            continue;
        }
        if rng.random_bool(MARKER_PROB) {
            word.insert(0, CANONICAL_MARKER);
        }
        if seen.insert(word.clone()) {
            tokens.push(word);
        }
    }
    Vocabulary::new(tokens, CANONICAL_MARKER).expect("generated tokens are unique and non-empty")
}

/// Sample `n_words` whitespace-separated words from the vocabulary under a
/// Zipf-like distribution over token ids. Marked tokens start words (marker
/// stripped in the emitted text); unmarked tokens may extend a word, so the
/// text round-trips plausibly through greedy longest-match tokenization.
pub fn synthetic_corpus(vocab: &Vocabulary, n_words: usize, seed: u64) -> String {
    let mut rng = seeding::stream(seed, "synth-corpus", &[n_words as u64]);
    let marker = vocab.marker;
    let marked: Vec<u32> = (0..vocab.len() as u32)
        .filter(|&i| vocab.token(i).starts_with(marker))
        .collect();
    let unmarked: Vec<u32> = (0..vocab.len() as u32)
        .filter(|&i| !vocab.token(i).starts_with(marker))
        .collect();

    // Zipf over pool positions: weight 1/(pos+1), sampled by inverse CDF
    // on a precomputed prefix sum.
    let build_cdf = |len: usize| -> Vec<f64> {
        let mut cdf = Vec::with_capacity(len);
        let mut acc = 0.0;
        for i in 0..len {
            acc += 1.0 / (i + 1) as f64;
            cdf.push(acc);
        }
        cdf
    };
    let marked_cdf = build_cdf(marked.len());
    let unmarked_cdf = build_cdf(unmarked.len());
    let sample_from = |cdf: &[f64], pool: &[u32], rng: &mut rand_chacha::ChaCha8Rng| -> u32 {
        let total = *cdf.last().unwrap();
        let x = rng.random_range(0.0..total);
        let pos = cdf.partition_point(|&c| c < x).min(pool.len() - 1);
        pool[pos]
    };

    let mut out = String::new();
    for w in 0..n_words {
        if w > 0 {
            out.push(' ');
        }
        let start = if marked.is_empty() {
            sample_from(&unmarked_cdf, &unmarked, &mut rng)
        } else {
            sample_from(&marked_cdf, &marked, &mut rng)
        };
        out.push_str(vocab.token(start).strip_prefix(marker).unwrap_or(vocab.token(start)));
        if !unmarked.is_empty() {
            for _ in 0..rng.random_range(0..=2) {
                if rng.random_bool(0.35) {
                    let cont = sample_from(&unmarked_cdf, &unmarked, &mut rng);
                    out.push_str(vocab.token(cont));
                }
            }
        }
    }
    out
}
