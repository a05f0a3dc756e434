//! The spelling probe pipeline: character inventory, example encoding,
//! batch packing, probe training, greedy decoding, evaluation, and the
//! reversed mode that trains embeddings against the spelling objective.
//!
//! A probe is a causal transformer whose position-0 input is a learned
//! projection of the token's embedding vector; teacher forcing trains it
//! to emit the token's characters followed by EOS, and greedy decoding at
//! evaluation reads the spelling back out of the vector alone.

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{aggregate_report, score_pair, Aggregates, MetricReport, TokenScore};
use crate::nn::{
    checkpoint, AdamState, PackedBatch, ProbeConfig, Stack, StackConfig, NO_TARGET, PREFIX_INPUT,
};
use crate::seeding::stream;
use crate::splits::Split;
use crate::store::{EmbeddingMatrix, Vocabulary};

pub const PAD: u32 = 0;
pub const EOS: u32 = 1;
pub const UNK: u32 = 2;
const N_RESERVED: usize = 3;
/// Decoded rendering of UNK. It never equals a real reference character,
/// so a degenerate model emitting UNK scores as a miss rather than a crash.
const UNK_CHAR: char = '\u{FFFD}';

/// Sequences decoded simultaneously; bounds transient activation memory
/// during evaluation.
const DECODE_CHUNK: usize = 128;

// ---------------------------------------------------------------------------
// character inventory
// ---------------------------------------------------------------------------

/// Character inventory built from training-set token strings. Ids are
/// dense: reserved PAD/EOS/UNK first, then the distinct characters in
/// sorted order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<char>", into = "Vec<char>")]
pub struct CharVocab {
    chars: Vec<char>,
    index: HashMap<char, u32>,
}

impl From<Vec<char>> for CharVocab {
    fn from(chars: Vec<char>) -> Self {
        let index = chars
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, (i + N_RESERVED) as u32))
            .collect();
        CharVocab { chars, index }
    }
}

impl From<CharVocab> for Vec<char> {
    fn from(cv: CharVocab) -> Self {
        cv.chars
    }
}

impl CharVocab {
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a str>) -> CharVocab {
        let set: BTreeSet<char> = tokens.into_iter().flat_map(|t| t.chars()).collect();
        CharVocab::from(set.into_iter().collect::<Vec<char>>())
    }

    /// Total symbol count including the three reserved ids.
    pub fn n_symbols(&self) -> usize {
        self.chars.len() + N_RESERVED
    }

    pub fn id_of(&self, c: char) -> u32 {
        self.index.get(&c).copied().unwrap_or(UNK)
    }

    /// None for reserved ids.
    pub fn char_of(&self, id: u32) -> Option<char> {
        self.chars.get((id as usize).checked_sub(N_RESERVED)?).copied()
    }
}

// ---------------------------------------------------------------------------
// examples and batches
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct SpellingExample {
    pub token_id: u32,
    /// Character ids followed by EOS.
    pub target: Vec<u32>,
}

/// None when the token has more than `max_decode_len` characters.
pub fn encode_example(
    token_id: u32,
    token: &str,
    cv: &CharVocab,
    max_decode_len: usize,
) -> Option<SpellingExample> {
    let n = token.chars().count();
    if n > max_decode_len {
        return None;
    }
    let mut target = Vec::with_capacity(n + 1);
    target.extend(token.chars().map(|c| cv.id_of(c)));
    target.push(EOS);
    Some(SpellingExample { token_id, target })
}

/// Encode a set of token ids; over-length tokens are skipped and reported.
pub fn encode_set(
    vocab: &Vocabulary,
    ids: &[u32],
    cv: &CharVocab,
    max_decode_len: usize,
) -> (Vec<SpellingExample>, Vec<u32>) {
    let mut examples = Vec::with_capacity(ids.len());
    let mut skipped = Vec::new();
    for &id in ids {
        match encode_example(id, vocab.token(id), cv, max_decode_len) {
            Some(ex) => examples.push(ex),
            None => skipped.push(id),
        }
    }
    if !skipped.is_empty() {
        log::warn!(
            "skipped {} over-length token(s) (> {max_decode_len} chars), e.g. {:?}",
            skipped.len(),
            vocab.token(skipped[0])
        );
    }
    (examples, skipped)
}

/// Budget slots an example occupies: prefix + characters + EOS, i.e. the
/// example's row count in a conventionally padded layout. The packed
/// layout stores one row fewer (EOS is only a target), but the batch cap
/// follows the padded accounting.
fn padded_cost(ex: &SpellingExample) -> usize {
    ex.target.len() + 1
}

/// Deterministic epoch shuffle + greedy fill. Every example lands in
/// exactly one batch; a batch closes when admitting the next example
/// would push `count × max_padded_cost` past `max_tokens`.
pub fn pack_batches(
    examples: &[SpellingExample],
    max_tokens: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<usize>>> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut stream(seed, "shuffle", &[epoch]));

    let mut batches = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let mut cur_max = 0usize;
    for idx in order {
        let cost = padded_cost(&examples[idx]);
        if cost > max_tokens {
            return Err(Error::Capacity(format!(
                "example for token {} needs {cost} slots, batch cap is {max_tokens}",
                examples[idx].token_id
            )));
        }
        let new_max = cur_max.max(cost);
        if !cur.is_empty() && new_max * (cur.len() + 1) > max_tokens {
            batches.push(std::mem::take(&mut cur));
            cur_max = cost;
        } else {
            cur_max = new_max;
        }
        cur.push(idx);
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    Ok(batches)
}

enum PrefixSource<'a> {
    Frozen(&'a EmbeddingMatrix),
    /// Rows live in the model's own trainable table; the batch carries
    /// token ids only.
    Tunable,
}

fn materialize_batch(
    examples: &[SpellingExample],
    idxs: &[usize],
    source: &PrefixSource,
) -> PackedBatch {
    let mut offsets = Vec::with_capacity(idxs.len() + 1);
    offsets.push(0usize);
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    let mut token_ids = Vec::with_capacity(idxs.len());
    for &i in idxs {
        let ex = &examples[i];
        inputs.push(PREFIX_INPUT);
        inputs.extend_from_slice(&ex.target[..ex.target.len() - 1]);
        targets.extend_from_slice(&ex.target);
        offsets.push(inputs.len());
        token_ids.push(ex.token_id);
    }
    let prefix = match source {
        PrefixSource::Frozen(emb) => {
            let mut rows = Array2::zeros((token_ids.len(), emb.dim()));
            for (r, &id) in token_ids.iter().enumerate() {
                rows.row_mut(r).assign(&emb.row(id));
            }
            rows
        }
        PrefixSource::Tunable => Array2::zeros((0, 0)),
    };
    PackedBatch {
        offsets,
        inputs,
        targets,
        prefix,
        prefix_token_ids: token_ids,
    }
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainedProbe {
    pub config: ProbeConfig,
    pub char_vocab: CharVocab,
    pub d_emb: usize,
    pub stack: Stack,
}

pub struct TrainOutcome {
    pub probe: TrainedProbe,
    /// Mean cross-entropy after each of the `steps` updates.
    pub curve: Vec<f64>,
    /// Token ids excluded for exceeding max_decode_len.
    pub skipped: Vec<u32>,
    /// Gradient updates each token's prefix participated in, indexed by
    /// token id. Test ids must stay at zero — this is the instrumented
    /// proof that no test embedding leaks into training.
    pub prefix_update_counts: Vec<u64>,
}

fn probe_stack_config(
    cfg: &ProbeConfig,
    d_emb: usize,
    n_symbols: usize,
    tunable_vocab: Option<usize>,
) -> StackConfig {
    StackConfig {
        layers: cfg.layers,
        d_model: cfg.d_model,
        heads: cfg.heads,
        ffn_dim: cfg.ffn_dim,
        vocab_in: n_symbols,
        vocab_out: n_symbols,
        max_positions: cfg.max_decode_len + 1,
        causal: true,
        dropout: cfg.dropout,
        prefix_dim: Some(d_emb),
        tunable_prefix: tunable_vocab,
    }
}

fn run_steps(
    stack: &mut Stack,
    examples: &[SpellingExample],
    source: &PrefixSource,
    cfg: &ProbeConfig,
    n_tokens: usize,
) -> Result<(Vec<f64>, Vec<u64>)> {
    if examples.is_empty() {
        return Err(Error::Config("no trainable examples after encoding".into()));
    }
    let mut adam = AdamState::new(
        stack.store.n_params(),
        cfg.lr,
        cfg.adam_beta1,
        cfg.adam_beta2,
        cfg.adam_eps,
    );
    let mut dropout_rng = stream(cfg.seed, "dropout", &[]);
    let mut curve = Vec::with_capacity(cfg.steps);
    let mut counts = vec![0u64; n_tokens];
    'steps: for epoch in 0u64.. {
        for idxs in pack_batches(examples, cfg.max_batch_tokens, cfg.seed, epoch)? {
            if curve.len() == cfg.steps {
                break 'steps;
            }
            let batch = materialize_batch(examples, &idxs, source);
            stack.store.zero_grad();
            let loss = stack.loss_and_grads(&batch, Some(&mut dropout_rng));
            adam.step(&mut stack.store.data, &stack.store.grad);
            for &i in &idxs {
                counts[examples[i].token_id as usize] += 1;
            }
            curve.push(loss);
        }
        if curve.len() == cfg.steps {
            break;
        }
    }
    Ok((curve, counts))
}

/// Train a probe on the split's train tokens with the embedding matrix
/// held frozen (it is never even visible to the optimizer; prefix rows are
/// copied into batches).
pub fn train_probe(
    vocab: &Vocabulary,
    emb: &EmbeddingMatrix,
    split: &Split,
    config: &ProbeConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if emb.v() != vocab.len() {
        return Err(Error::Config(format!(
            "embedding rows {} != vocabulary size {}",
            emb.v(),
            vocab.len()
        )));
    }
    let cv = CharVocab::build(split.train_ids.iter().map(|&id| vocab.token(id)));
    let (examples, skipped) = encode_set(vocab, &split.train_ids, &cv, config.max_decode_len);
    let mut stack = Stack::build(
        probe_stack_config(config, emb.dim(), cv.n_symbols(), None),
        config.seed,
    );
    let (curve, prefix_update_counts) = run_steps(
        &mut stack,
        &examples,
        &PrefixSource::Frozen(emb),
        config,
        vocab.len(),
    )?;
    Ok(TrainOutcome {
        probe: TrainedProbe {
            config: *config,
            char_vocab: cv,
            d_emb: emb.dim(),
            stack,
        },
        curve,
        skipped,
        prefix_update_counts,
    })
}

pub struct PretrainOutcome {
    /// The learned embedding table, extracted after joint training.
    pub embeddings: EmbeddingMatrix,
    /// The jointly trained decoder (tunable-prefix mode; decodes its own
    /// table by token id).
    pub probe: TrainedProbe,
    pub curve: Vec<f64>,
    pub skipped: Vec<u32>,
}

/// Reverse direction: train embeddings and decoder jointly so the
/// embeddings come to encode spelling. Covers every vocabulary item.
pub fn pretrain_embeddings(
    vocab: &Vocabulary,
    d_emb: usize,
    config: &ProbeConfig,
) -> Result<PretrainOutcome> {
    config.validate()?;
    if d_emb == 0 {
        return Err(Error::Config("d_emb must be positive".into()));
    }
    let cv = CharVocab::build(vocab.tokens().iter().map(|t| t.as_str()));
    let all_ids: Vec<u32> = (0..vocab.len() as u32).collect();
    let (examples, skipped) = encode_set(vocab, &all_ids, &cv, config.max_decode_len);
    let mut stack = Stack::build(
        probe_stack_config(config, d_emb, cv.n_symbols(), Some(vocab.len())),
        config.seed,
    );
    let (curve, _) = run_steps(
        &mut stack,
        &examples,
        &PrefixSource::Tunable,
        config,
        vocab.len(),
    )?;
    let table = stack
        .prefix_table_id()
        .expect("tunable stack has a prefix table");
    let values = stack.store.view2(table).to_owned();
    let embeddings = EmbeddingMatrix::new(values)?;
    Ok(PretrainOutcome {
        embeddings,
        probe: TrainedProbe {
            config: *config,
            char_vocab: cv,
            d_emb,
            stack,
        },
        curve,
        skipped,
    })
}

// ---------------------------------------------------------------------------
// decoding and evaluation
// ---------------------------------------------------------------------------

/// Greedy decode a chunk of sequences. `rows` must contain one embedding
/// row per id for frozen-mode probes and must be 0×0 for tunable-mode
/// probes (whose prefix lives in the model).
pub fn greedy_decode_batch(
    probe: &TrainedProbe,
    rows: &Array2<f64>,
    token_ids: &[u32],
) -> Vec<String> {
    let tunable = probe.stack.cfg.tunable_prefix.is_some();
    assert!(
        if tunable { rows.nrows() == 0 } else { rows.nrows() == token_ids.len() },
        "prefix rows inconsistent with probe mode"
    );
    let max_len = probe.config.max_decode_len;
    let n = token_ids.len();
    let mut decoded: Vec<Vec<u32>> = vec![Vec::new(); n];
    let mut done = vec![false; n];

    for _ in 0..max_len {
        let active: Vec<usize> = (0..n).filter(|&i| !done[i]).collect();
        if active.is_empty() {
            break;
        }
        let mut offsets = Vec::with_capacity(active.len() + 1);
        offsets.push(0usize);
        let mut inputs = Vec::new();
        for &i in &active {
            inputs.push(PREFIX_INPUT);
            inputs.extend_from_slice(&decoded[i]);
            offsets.push(inputs.len());
        }
        let targets = vec![NO_TARGET; inputs.len()];
        let prefix = if tunable {
            Array2::zeros((0, 0))
        } else {
            let mut p = Array2::zeros((active.len(), rows.ncols()));
            for (r, &i) in active.iter().enumerate() {
                p.row_mut(r).assign(&rows.row(i));
            }
            p
        };
        let batch = PackedBatch {
            offsets: offsets.clone(),
            inputs,
            targets,
            prefix,
            prefix_token_ids: active.iter().map(|&i| token_ids[i]).collect(),
        };
        let logits = probe.stack.infer_logits(&batch);
        for (k, &i) in active.iter().enumerate() {
            let last = offsets[k + 1] - 1;
            let row = logits.row(last);
            // argmax over non-PAD symbols; ties resolve to the lowest id
            let mut best = EOS;
            let mut best_v = f64::NEG_INFINITY;
            for id in 1..row.len() as u32 {
                let v = row[id as usize];
                if v > best_v {
                    best_v = v;
                    best = id;
                }
            }
            if best == EOS {
                done[i] = true;
            } else {
                decoded[i].push(best);
            }
        }
    }

    decoded
        .into_iter()
        .map(|ids| {
            ids.into_iter()
                .map(|id| probe.char_vocab.char_of(id).unwrap_or(UNK_CHAR))
                .collect()
        })
        .collect()
}

/// Single-sequence greedy decode from one embedding row (frozen mode).
pub fn greedy_decode(probe: &TrainedProbe, e_w: ndarray::ArrayView1<'_, f64>) -> String {
    let mut rows = Array2::zeros((1, e_w.len()));
    rows.row_mut(0).assign(&e_w);
    greedy_decode_batch(probe, &rows, &[0]).pop().unwrap()
}

/// Decode a list of token ids in memory-bounded chunks.
pub fn decode_ids(probe: &TrainedProbe, ids: &[u32], emb: Option<&EmbeddingMatrix>) -> Vec<String> {
    let tunable = probe.stack.cfg.tunable_prefix.is_some();
    let mut out = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(DECODE_CHUNK) {
        let rows = if tunable {
            Array2::zeros((0, 0))
        } else {
            let emb = emb.expect("frozen-mode decode needs the embedding matrix");
            let mut rows = Array2::zeros((chunk.len(), emb.dim()));
            for (r, &id) in chunk.iter().enumerate() {
                rows.row_mut(r).assign(&emb.row(id));
            }
            rows
        };
        out.extend(greedy_decode_batch(probe, &rows, chunk));
    }
    out
}

/// Decode and score every test token of the split.
pub fn evaluate_probe(
    probe: &TrainedProbe,
    split: &Split,
    vocab: &Vocabulary,
    emb: &EmbeddingMatrix,
) -> Result<MetricReport> {
    let hyps = decode_ids(probe, &split.test_ids, Some(emb));
    let scores: Vec<TokenScore> = split
        .test_ids
        .iter()
        .zip(&hyps)
        .map(|(&id, hyp)| score_pair(id, vocab.token(id), hyp))
        .collect();
    aggregate_report(scores, format!("{}-r{}", split.spec.filter, split.replica))
}

/// Score a tunable-mode probe on its own vocabulary (decoding each token
/// from the jointly learned table).
pub fn evaluate_joint(probe: &TrainedProbe, vocab: &Vocabulary, ids: &[u32]) -> Result<MetricReport> {
    let hyps = decode_ids(probe, ids, None);
    let scores: Vec<TokenScore> = ids
        .iter()
        .zip(&hyps)
        .map(|(&id, hyp)| score_pair(id, vocab.token(id), hyp))
        .collect();
    aggregate_report(scores, "joint")
}

// ---------------------------------------------------------------------------
// training-size sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub train_size: usize,
    pub em: f64,
    pub chrf: f64,
    pub lev_ratio: f64,
}

/// Train one probe per size on nested subsamples of the split's train set
/// (size k uses a prefix of the same shuffled order as size k+1), always
/// evaluating on the split's fixed test set.
pub fn training_size_sweep(
    vocab: &Vocabulary,
    emb: &EmbeddingMatrix,
    split: &Split,
    sizes: &[usize],
    config: &ProbeConfig,
) -> Result<Vec<SweepPoint>> {
    let mut order = split.train_ids.clone();
    order.shuffle(&mut stream(
        config.seed,
        "sweep-subsample",
        &[split.replica as u64],
    ));
    let mut points = Vec::with_capacity(sizes.len());
    for &size in sizes {
        if size == 0 || size > order.len() {
            return Err(Error::Capacity(format!(
                "sweep size {size} outside available train set ({})",
                order.len()
            )));
        }
        let mut sub = split.clone();
        sub.train_ids = order[..size].to_vec();
        sub.train_ids.sort_unstable();
        let outcome = train_probe(vocab, emb, &sub, config)?;
        let report = evaluate_probe(&outcome.probe, &sub, vocab, emb)?;
        let Aggregates { em, chrf, lev_ratio } = report.aggregates;
        points.push(SweepPoint { train_size: size, em, chrf, lev_ratio });
    }
    Ok(points)
}

// ---------------------------------------------------------------------------
// curve / sweep CSV
// ---------------------------------------------------------------------------

pub fn write_loss_curve(path: impl AsRef<Path>, curve: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["step", "loss"])?;
    for (i, loss) in curve.iter().enumerate() {
        w.write_record([(i + 1).to_string(), loss.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_sweep_csv(path: impl AsRef<Path>, points: &[SweepPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["train_size", "em", "chrf"])?;
    for p in points {
        w.write_record([p.train_size.to_string(), p.em.to_string(), p.chrf.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// checkpointing
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct ProbeSidecar {
    config: ProbeConfig,
    d_emb: usize,
    char_vocab: CharVocab,
    tunable_vocab: Option<usize>,
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Write `<path>` (binary tensors) and `<path with .json>` (config sidecar).
pub fn save_probe(probe: &TrainedProbe, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    checkpoint::save(&probe.stack.store, path)?;
    let sidecar = ProbeSidecar {
        config: probe.config,
        d_emb: probe.d_emb,
        char_vocab: probe.char_vocab.clone(),
        tunable_vocab: probe.stack.cfg.tunable_prefix,
    };
    let f = std::fs::File::create(sidecar_path(path))?;
    serde_json::to_writer_pretty(f, &sidecar)?;
    Ok(())
}

pub fn load_probe(path: impl AsRef<Path>) -> Result<TrainedProbe> {
    let path = path.as_ref();
    let f = std::fs::File::open(sidecar_path(path))?;
    let sidecar: ProbeSidecar = serde_json::from_reader(f)?;
    sidecar.config.validate()?;
    let mut stack = Stack::build(
        probe_stack_config(
            &sidecar.config,
            sidecar.d_emb,
            sidecar.char_vocab.n_symbols(),
            sidecar.tunable_vocab,
        ),
        sidecar.config.seed,
    );
    checkpoint::load(&mut stack.store, path)?;
    Ok(TrainedProbe {
        config: sidecar.config,
        char_vocab: sidecar.char_vocab,
        d_emb: sidecar.d_emb,
        stack,
    })
}
