//! Train/test vocabulary splits under the none / similarity / lemma filters.
//!
//! Protocol: sample `test_size` token types uniformly; drop filtered
//! neighbors of the test set from the remaining pool; sample `train_size`
//! tokens from what's left. Everything is a pure function of
//! (vocab, embeddings, spec, replica), so splits are regenerable from their
//! manifests.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::collections::HashSet;
use std::path::Path;

use ndarray::Array2;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding;
use crate::store::{EmbeddingMatrix, LemmaMap, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Filter {
    None,
    Similarity,
    Lemma,
}

impl std::fmt::Display for Filter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Filter::None => write!(f, "none"),
            Filter::Similarity => write!(f, "similarity"),
            Filter::Lemma => write!(f, "lemma"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub test_size: usize,
    pub train_size: usize,
    pub filter: Filter,
    /// Number of nearest cosine neighbors excluded per test token.
    pub k_sim: usize,
    pub seed: u64,
    pub replicas: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            test_size: 1000,
            train_size: 32000,
            filter: Filter::None,
            k_sim: 20,
            seed: 0,
            replicas: 10,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.test_size < 1 || self.train_size < 1 || self.replicas < 1 {
            return Err(Error::Config(
                "test_size, train_size and replicas must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Split {
    /// Sorted ascending.
    pub test_ids: Vec<u32>,
    /// Sorted ascending; may be shorter than spec.train_size after filtering.
    pub train_ids: Vec<u32>,
    /// Filtered out: in neither train nor test. Sorted ascending.
    pub excluded_ids: Vec<u32>,
    pub spec: SplitSpec,
    pub replica: u32,
    /// True when fewer tokens remained than spec.train_size requested.
    pub train_truncated: bool,
}

/// Uniform test sample without replacement, deterministic in (seed, replica).
pub fn sample_test(vocab_size: usize, spec: &SplitSpec, replica: u32) -> Result<Vec<u32>> {
    if vocab_size <= spec.test_size {
        return Err(Error::Capacity(format!(
            "vocabulary of {vocab_size} cannot supply a test set of {}",
            spec.test_size
        )));
    }
    let mut rng = seeding::stream(spec.seed, "split-test", &[replica as u64]);
    let mut ids: Vec<u32> = index::sample(&mut rng, vocab_size, spec.test_size)
        .into_iter()
        .map(|i| i as u32)
        .collect();
    ids.sort_unstable();
    Ok(ids)
}

/// Candidate ordering for top-k selection: higher cosine wins, ties go to
/// the lower token id. The heap keeps the current *worst* of the best k on
/// top so it can be evicted cheaply.
#[derive(PartialEq)]
struct Cand {
    sim: f64,
    id: u32,
}

impl Eq for Cand {}

impl Ord for Cand {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reverse of "better": a candidate is greater (= worse) when its
        // similarity is lower, or equal with a higher id.
        other
            .sim
            .partial_cmp(&self.sim)
            .expect("similarities are never NaN")
            .then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Union over test tokens of the k highest-cosine non-test neighbors.
/// Zero-norm rows never enter the result (their cosine is treated as −∞).
pub fn similarity_exclusions(emb: &EmbeddingMatrix, test_ids: &[u32], k: usize) -> Vec<u32> {
    if k == 0 || test_ids.is_empty() {
        return vec![];
    }
    let v = emb.v();
    let mut is_test = vec![false; v];
    for &t in test_ids {
        is_test[t as usize] = true;
    }

    let norms: Vec<f64> = (0..v)
        .map(|i| {
            let row = emb.values.row(i);
            row.dot(&row).sqrt()
        })
        .collect();
    if norms.iter().any(|&n| n == 0.0) {
        log::warn!("zero-norm embedding rows present; they are never selected as neighbors");
    }

    // One gemm per chunk of test tokens: dots[c, j] = e_c · e_t_j.
    const CHUNK: usize = 128;
    let mut excluded: HashSet<u32> = HashSet::new();
    for chunk in test_ids.chunks(CHUNK) {
        let mut queries = Array2::zeros((emb.dim(), chunk.len()));
        for (j, &t) in chunk.iter().enumerate() {
            queries.column_mut(j).assign(&emb.values.row(t as usize));
        }
        let dots = emb.values.dot(&queries); // v × chunk

        for (j, &t) in chunk.iter().enumerate() {
            let t_norm = norms[t as usize];
            if t_norm == 0.0 {
                continue;
            }
            let mut heap: BinaryHeap<Cand> = BinaryHeap::with_capacity(k + 1);
            for c in 0..v {
                if is_test[c] || norms[c] == 0.0 {
                    continue;
                }
                let sim = dots[[c, j]] / (norms[c] * t_norm);
                let cand = Cand { sim, id: c as u32 };
                if heap.len() < k {
                    heap.push(cand);
                } else if cand < *heap.peek().unwrap() {
                    heap.pop();
                    heap.push(cand);
                }
            }
            excluded.extend(heap.into_iter().map(|c| c.id));
        }
    }
    let mut out: Vec<u32> = excluded.into_iter().collect();
    out.sort_unstable();
    out
}

/// Every non-test token sharing a lemma with a test token, over normalized
/// (marker-stripped, case-folded) strings.
pub fn lemma_exclusions(lemma_map: &LemmaMap, vocab: &Vocabulary, test_ids: &[u32]) -> Vec<u32> {
    let test_set: HashSet<u32> = test_ids.iter().copied().collect();
    let test_lemmas: HashSet<String> = test_ids
        .iter()
        .map(|&t| lemma_map.lemma_of(&vocab.normalized(t)))
        .collect();
    let mut out: Vec<u32> = (0..vocab.len() as u32)
        .filter(|id| !test_set.contains(id))
        .filter(|&id| test_lemmas.contains(&lemma_map.lemma_of(&vocab.normalized(id))))
        .collect();
    out.sort_unstable();
    out
}

/// Full protocol for one replica. The lemma filter applies the similarity
/// filter first and unions both exclusion sets.
pub fn make_split(
    vocab: &Vocabulary,
    emb: &EmbeddingMatrix,
    spec: &SplitSpec,
    replica: u32,
    lemma_map: &LemmaMap,
) -> Result<Split> {
    spec.validate()?;
    assert_eq!(vocab.len(), emb.v(), "vocabulary/matrix size mismatch");
    let test_ids = sample_test(vocab.len(), spec, replica)?;

    let mut excluded: Vec<u32> = match spec.filter {
        Filter::None => vec![],
        Filter::Similarity => similarity_exclusions(emb, &test_ids, spec.k_sim),
        Filter::Lemma => {
            let mut set: HashSet<u32> = similarity_exclusions(emb, &test_ids, spec.k_sim)
                .into_iter()
                .collect();
            set.extend(lemma_exclusions(lemma_map, vocab, &test_ids));
            let mut v: Vec<u32> = set.into_iter().collect();
            v.sort_unstable();
            v
        }
    };
    excluded.retain(|id| test_ids.binary_search(id).is_err());

    let test_set: HashSet<u32> = test_ids.iter().copied().collect();
    let excluded_set: HashSet<u32> = excluded.iter().copied().collect();
    let remaining: Vec<u32> = (0..vocab.len() as u32)
        .filter(|id| !test_set.contains(id) && !excluded_set.contains(id))
        .collect();

    let take = spec.train_size.min(remaining.len());
    let train_truncated = take < spec.train_size;
    if train_truncated {
        log::warn!(
            "replica {replica}: only {} tokens remain after filtering; train set truncated from {}",
            remaining.len(),
            spec.train_size
        );
    }
    let mut rng = seeding::stream(spec.seed, "split-train", &[replica as u64]);
    let mut train_ids: Vec<u32> = index::sample(&mut rng, remaining.len(), take)
        .into_iter()
        .map(|i| remaining[i])
        .collect();
    train_ids.sort_unstable();

    Ok(Split {
        test_ids,
        train_ids,
        excluded_ids: excluded,
        spec: *spec,
        replica,
        train_truncated,
    })
}

impl Split {
    pub fn write_manifest(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path.as_ref())?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn read_manifest(path: impl AsRef<Path>) -> Result<Split> {
        let f = std::fs::File::open(path.as_ref())?;
        Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
    }
}
