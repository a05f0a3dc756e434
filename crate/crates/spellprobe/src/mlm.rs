//! Toy masked-LM comparison harness: train the same bidirectional model
//! twice — once with spelling-pretrained input embeddings, once with random
//! ones — under bit-identical masking randomness, and compare validation
//! loss curves.
//!
//! The model vocabulary is the tokenizer vocabulary plus two extra ids:
//! UNK (unmatched characters) and MASK.

use std::path::Path;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AdamState, PackedBatch, Stack, StackConfig, NO_TARGET};
use crate::seeding::stream;
use crate::store::{EmbeddingMatrix, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MlmConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub mask_rate: f64,
    pub steps: usize,
    /// Sequences per training batch.
    pub batch_seqs: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Validation loss is recorded every this many steps (and at the last).
    pub val_every: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for MlmConfig {
    fn default() -> Self {
        MlmConfig {
            layers: 4,
            d_model: 256,
            heads: 4,
            ffn_dim: 1024,
            mask_rate: 0.15,
            steps: 2000,
            batch_seqs: 8,
            seq_len: 128,
            lr: 5e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            val_every: 100,
            dropout: 0.1,
            seed: 0,
        }
    }
}

impl MlmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(Error::Config(format!(
                "mask_rate {} not in (0,1)",
                self.mask_rate
            )));
        }
        if self.layers == 0
            || self.steps == 0
            || self.batch_seqs == 0
            || self.seq_len == 0
            || self.val_every == 0
        {
            return Err(Error::Config("all counts must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0,1)", self.dropout)));
        }
        Ok(())
    }

    /// Masked targets per sequence: ⌈mask_rate · seq_len⌉.
    pub fn masks_per_seq(&self) -> usize {
        (self.mask_rate * self.seq_len as f64).ceil() as usize
    }
}

#[derive(Debug, Clone)]
pub enum EmbeddingInit {
    Random,
    Pretrained(EmbeddingMatrix),
}

// ---------------------------------------------------------------------------
// corpus
// ---------------------------------------------------------------------------

/// Greedy longest-match tokenization. Word-initial positions (except the
/// very first word of the text) prefer marker-prefixed vocabulary entries;
/// characters with no match at all become UNK and advance one position.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Vec<u32> {
    let unk = vocab.len() as u32;
    let max_len = vocab
        .tokens()
        .iter()
        .map(|t| t.chars().count())
        .max()
        .unwrap_or(1);
    let mut out = Vec::new();
    let mut first_word = true;
    for word in text.split_whitespace() {
        let chars: Vec<char> = word.chars().collect();
        let mut p = 0;
        let mut marked = !first_word;
        first_word = false;
        while p < chars.len() {
            let remaining = chars.len() - p;
            let mut matched = None;
            if marked {
                let cap = remaining.min(max_len.saturating_sub(1));
                for l in (1..=cap).rev() {
                    let mut cand = String::with_capacity(l + 1);
                    cand.push(vocab.marker);
                    cand.extend(&chars[p..p + l]);
                    if let Some(id) = vocab.id_of(&cand) {
                        matched = Some((id, l));
                        break;
                    }
                }
            }
            if matched.is_none() {
                for l in (1..=remaining.min(max_len)).rev() {
                    let cand: String = chars[p..p + l].iter().collect();
                    if let Some(id) = vocab.id_of(&cand) {
                        matched = Some((id, l));
                        break;
                    }
                }
            }
            match matched {
                Some((id, l)) => {
                    out.push(id);
                    p += l;
                }
                None => {
                    out.push(unk);
                    p += 1;
                }
            }
            marked = false;
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct MlmCorpus {
    pub train: Vec<Vec<u32>>,
    pub val: Vec<Vec<u32>>,
    pub seq_len: usize,
    /// Tokenizer vocabulary size; corpus ids run 0..=vocab_size with
    /// vocab_size itself being UNK.
    pub vocab_size: usize,
}

/// Chop the tokenized text into fixed-length sequences and split 95/5,
/// deterministic in the seed.
pub fn build_mlm_corpus(
    text: &str,
    vocab: &Vocabulary,
    seq_len: usize,
    seed: u64,
) -> Result<MlmCorpus> {
    let ids = tokenize(text, vocab);
    let n_seqs = ids.len() / seq_len;
    if n_seqs < 2 {
        return Err(Error::Config(format!(
            "corpus yields {n_seqs} sequence(s) of length {seq_len}; need at least 2 \
             for a train/validation split"
        )));
    }
    let mut seqs: Vec<Vec<u32>> = ids
        .chunks_exact(seq_len)
        .map(|c| c.to_vec())
        .collect();
    let mut order: Vec<usize> = (0..n_seqs).collect();
    order.shuffle(&mut stream(seed, "corpus-split", &[]));
    let n_val = (n_seqs / 20).max(1);
    let val_set: std::collections::HashSet<usize> = order[..n_val].iter().copied().collect();
    let mut train = Vec::with_capacity(n_seqs - n_val);
    let mut val = Vec::with_capacity(n_val);
    for (i, seq) in seqs.drain(..).enumerate() {
        if val_set.contains(&i) {
            val.push(seq);
        } else {
            train.push(seq);
        }
    }
    Ok(MlmCorpus { train, val, seq_len, vocab_size: vocab.len() })
}

// ---------------------------------------------------------------------------
// masking
// ---------------------------------------------------------------------------

const OP_MASK: u8 = 0;
const OP_RANDOM: u8 = 1;
const OP_KEEP: u8 = 2;

/// One sequence's masking decision: positions are sorted; ops follow the
/// 80/10/10 recipe; `replacements` holds the sampled id for OP_RANDOM
/// entries (slot unused otherwise).
struct MaskDraw {
    positions: Vec<usize>,
    ops: Vec<u8>,
    replacements: Vec<u32>,
}

fn draw_masks<R: Rng>(seq_len: usize, n_mask: usize, n_real: usize, rng: &mut R) -> MaskDraw {
    let mut positions = sample(rng, seq_len, n_mask).into_vec();
    positions.sort_unstable();
    let mut ops = Vec::with_capacity(n_mask);
    let mut replacements = Vec::with_capacity(n_mask);
    for _ in 0..n_mask {
        let roll = rng.random_range(0..10u32);
        let op = match roll {
            0..=7 => OP_MASK,
            8 => OP_RANDOM,
            _ => OP_KEEP,
        };
        // draw the replacement unconditionally so the RNG stream is the
        // same regardless of the roll (simplifies cross-arm reasoning)
        let repl = rng.random_range(0..n_real as u32);
        ops.push(op);
        replacements.push(repl);
    }
    MaskDraw { positions, ops, replacements }
}

fn apply_mask(seq: &[u32], draw: &MaskDraw, mask_id: u32) -> (Vec<u32>, Vec<u32>) {
    let mut inputs = seq.to_vec();
    let mut targets = vec![NO_TARGET; seq.len()];
    for (k, &p) in draw.positions.iter().enumerate() {
        targets[p] = seq[p];
        inputs[p] = match draw.ops[k] {
            OP_MASK => mask_id,
            OP_RANDOM => draw.replacements[k],
            _ => seq[p],
        };
    }
    (inputs, targets)
}

fn fingerprint_fold(h: u64, v: u64) -> u64 {
    (h ^ v).wrapping_mul(0x100000001b3).rotate_left(23)
}

fn fingerprint_batch(seq_idxs: &[usize], draws: &[MaskDraw]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for (&s, d) in seq_idxs.iter().zip(draws) {
        h = fingerprint_fold(h, s as u64);
        for (k, &p) in d.positions.iter().enumerate() {
            h = fingerprint_fold(h, p as u64);
            h = fingerprint_fold(h, d.ops[k] as u64);
            if d.ops[k] == OP_RANDOM {
                h = fingerprint_fold(h, d.replacements[k] as u64);
            }
        }
    }
    h
}

fn batch_from(seqs: &[(&[u32], &MaskDraw)], mask_id: u32) -> PackedBatch {
    let mut offsets = vec![0usize];
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for (seq, draw) in seqs {
        let (i, t) = apply_mask(seq, draw, mask_id);
        inputs.extend(i);
        targets.extend(t);
        offsets.push(inputs.len());
    }
    PackedBatch {
        offsets,
        inputs,
        targets,
        prefix: Array2::zeros((0, 0)),
        prefix_token_ids: vec![],
    }
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurve {
    /// (step, mean train loss) for every step 1..=steps.
    pub train: Vec<(u64, f64)>,
    /// (step, mean validation loss) every val_every steps and at the end.
    pub val: Vec<(u64, f64)>,
}

impl TrainingCurve {
    pub fn validate(&self) -> Result<()> {
        for series in [&self.train, &self.val] {
            if series.windows(2).any(|w| w[0].0 >= w[1].0) {
                return Err(Error::Config("curve steps not strictly increasing".into()));
            }
            if series.iter().any(|(_, l)| !l.is_finite()) {
                return Err(Error::Config("curve contains a non-finite loss".into()));
            }
        }
        Ok(())
    }
}

/// Trailing moving average of the train losses over `window` steps.
pub fn smoothed_train(curve: &TrainingCurve, window: usize) -> Vec<(u64, f64)> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(curve.train.len());
    let mut acc = 0.0;
    for (i, &(step, loss)) in curve.train.iter().enumerate() {
        acc += loss;
        if i >= w {
            acc -= curve.train[i - w].1;
        }
        let n = (i + 1).min(w);
        out.push((step, acc / n as f64));
    }
    out
}

pub struct MlmOutcome {
    pub curve: TrainingCurve,
    /// One fingerprint per step covering batch choice, mask positions,
    /// replacement ops, and random substitutions — identical across arms
    /// that share a seed.
    pub mask_fingerprints: Vec<u64>,
    pub stack: Stack,
}

fn mlm_stack_config(cfg: &MlmConfig, model_vocab: usize) -> StackConfig {
    StackConfig {
        layers: cfg.layers,
        d_model: cfg.d_model,
        heads: cfg.heads,
        ffn_dim: cfg.ffn_dim,
        vocab_in: model_vocab,
        vocab_out: model_vocab,
        max_positions: cfg.seq_len,
        causal: false,
        dropout: cfg.dropout,
        prefix_dim: None,
        tunable_prefix: None,
    }
}

fn validation_loss(
    stack: &Stack,
    corpus: &MlmCorpus,
    cfg: &MlmConfig,
    n_real: usize,
    mask_id: u32,
) -> f64 {
    let n_mask = cfg.masks_per_seq();
    let mut total = 0.0;
    let mut total_targets = 0usize;
    for (chunk_start, chunk) in corpus
        .val
        .chunks(cfg.batch_seqs)
        .enumerate()
        .map(|(i, c)| (i * cfg.batch_seqs, c))
    {
        // fixed per-sequence masks keep validation comparable across
        // steps and across arms
        let draws: Vec<MaskDraw> = (0..chunk.len())
            .map(|k| {
                let mut rng = stream(cfg.seed, "val-mask", &[(chunk_start + k) as u64]);
                draw_masks(cfg.seq_len, n_mask, n_real, &mut rng)
            })
            .collect();
        let pairs: Vec<(&[u32], &MaskDraw)> = chunk
            .iter()
            .zip(&draws)
            .map(|(s, d)| (s.as_slice(), d))
            .collect();
        let batch = batch_from(&pairs, mask_id);
        let n_t = batch.n_targets();
        let logits = stack.infer_logits(&batch);
        total += stack.loss_from_logits(&batch, &logits) * n_t as f64;
        total_targets += n_t;
    }
    total / total_targets as f64
}

/// Train one arm. Same config seed ⇒ same decoder initialization, same
/// batch order, and same masking randomness; only the embedding table rows
/// differ between EmbeddingInit variants.
pub fn train_mlm(corpus: &MlmCorpus, config: &MlmConfig, init: &EmbeddingInit) -> Result<MlmOutcome> {
    config.validate()?;
    if corpus.seq_len != config.seq_len {
        return Err(Error::Config(format!(
            "corpus sequence length {} != config {}",
            corpus.seq_len, config.seq_len
        )));
    }
    if corpus.train.is_empty() || corpus.val.is_empty() {
        return Err(Error::Config("corpus has an empty train or validation side".into()));
    }
    // model vocabulary: tokenizer ids 0..V-1, then UNK (= V), then MASK
    let n_real = corpus.vocab_size;
    let mask_id = (n_real + 1) as u32;
    let model_vocab = n_real + 2;
    let mut stack = Stack::build(mlm_stack_config(config, model_vocab), config.seed);
    if let EmbeddingInit::Pretrained(emb) = init {
        if emb.dim() != config.d_model {
            return Err(Error::Config(format!(
                "pretrained embedding dim {} != d_model {}",
                emb.dim(),
                config.d_model
            )));
        }
        if emb.v() != n_real {
            return Err(Error::Config(format!(
                "pretrained table has {} rows, tokenizer vocabulary has {n_real}",
                emb.v()
            )));
        }
        // overwrite only the real-token rows; UNK/MASK rows keep the
        // seeded initialization shared with the random arm
        let id = stack.store.id_by_name("embed").unwrap();
        let mut table = stack.store.view2_mut(id);
        for r in 0..emb.v() {
            table.row_mut(r).assign(&emb.row(r as u32));
        }
    }

    let n_mask = config.masks_per_seq();
    let mut adam = AdamState::new(
        stack.store.n_params(),
        config.lr,
        config.adam_beta1,
        config.adam_beta2,
        config.adam_eps,
    );
    let mut dropout_rng = stream(config.seed, "dropout", &[]);
    let mut train_curve = Vec::with_capacity(config.steps);
    let mut val_curve = Vec::new();
    let mut fingerprints = Vec::with_capacity(config.steps);

    for step in 1..=config.steps as u64 {
        let mut mask_rng = stream(config.seed, "mask", &[step]);
        let take = config.batch_seqs.min(corpus.train.len());
        let seq_idxs = sample(&mut mask_rng, corpus.train.len(), take).into_vec();
        let draws: Vec<MaskDraw> = seq_idxs
            .iter()
            .map(|_| draw_masks(config.seq_len, n_mask, n_real, &mut mask_rng))
            .collect();
        fingerprints.push(fingerprint_batch(&seq_idxs, &draws));

        let pairs: Vec<(&[u32], &MaskDraw)> = seq_idxs
            .iter()
            .zip(&draws)
            .map(|(&i, d)| (corpus.train[i].as_slice(), d))
            .collect();
        let batch = batch_from(&pairs, mask_id);
        stack.store.zero_grad();
        let loss = stack.loss_and_grads(&batch, Some(&mut dropout_rng));
        adam.step(&mut stack.store.data, &stack.store.grad);
        train_curve.push((step, loss));

        if step % config.val_every as u64 == 0 || step == config.steps as u64 {
            let vl = validation_loss(&stack, corpus, config, n_real, mask_id);
            val_curve.push((step, vl));
        }
    }

    let curve = TrainingCurve { train: train_curve, val: val_curve };
    curve.validate()?;
    Ok(MlmOutcome { curve, mask_fingerprints: fingerprints, stack })
}

// ---------------------------------------------------------------------------
// curve comparison
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurveComparison {
    /// (step, a_val − b_val) at every shared validation checkpoint.
    pub deltas: Vec<(u64, f64)>,
    pub burn_in: u64,
    pub max_abs_after_burn_in: f64,
    pub mean_abs_after_burn_in: f64,
}

/// Compare validation curves sampled on identical step grids.
pub fn compare_curves(a: &TrainingCurve, b: &TrainingCurve, burn_in: u64) -> Result<CurveComparison> {
    let grid_a: Vec<u64> = a.val.iter().map(|&(s, _)| s).collect();
    let grid_b: Vec<u64> = b.val.iter().map(|&(s, _)| s).collect();
    if grid_a != grid_b {
        return Err(Error::Config(
            "validation curves sampled at different steps; cannot compare".into(),
        ));
    }
    let deltas: Vec<(u64, f64)> = a
        .val
        .iter()
        .zip(&b.val)
        .map(|(&(s, la), &(_, lb))| (s, la - lb))
        .collect();
    let post: Vec<f64> = deltas
        .iter()
        .filter(|&&(s, _)| s >= burn_in)
        .map(|&(_, d)| d.abs())
        .collect();
    if post.is_empty() {
        return Err(Error::Config(format!(
            "burn-in {burn_in} leaves no validation checkpoints to compare"
        )));
    }
    let max = post.iter().copied().fold(0.0, f64::max);
    let mean = post.iter().sum::<f64>() / post.len() as f64;
    Ok(CurveComparison {
        deltas,
        burn_in,
        max_abs_after_burn_in: max,
        mean_abs_after_burn_in: mean,
    })
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

/// `step,train_loss,val_loss`; the val column is empty except at
/// checkpoints.
pub fn write_curve_csv(path: impl AsRef<Path>, curve: &TrainingCurve) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["step", "train_loss", "val_loss"])?;
    let val: std::collections::HashMap<u64, f64> = curve.val.iter().copied().collect();
    for &(step, loss) in &curve.train {
        let v = val.get(&step).map(|l| l.to_string()).unwrap_or_default();
        w.write_record([step.to_string(), loss.to_string(), v])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_comparison_csv(path: impl AsRef<Path>, cmp: &CurveComparison) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["step", "delta"])?;
    for &(step, d) in &cmp.deltas {
        w.write_record([step.to_string(), d.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
