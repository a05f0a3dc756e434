//! Temporary calibration bench — deleted before finalization.

use std::time::Instant;

use spellprobe::nn::ProbeConfig;
use spellprobe::probe::{decode_ids, train_probe, TrainedProbe};
use spellprobe::splits::{Filter, Split, SplitSpec};
use spellprobe::store::{random_embeddings, EmbeddingMatrix, Vocabulary};
use spellprobe::synth::synthetic_vocabulary;

fn split_all(n: u32, n_test: usize) -> Split {
    Split {
        test_ids: (0..n_test as u32).collect(),
        train_ids: (n_test as u32..n).collect(),
        excluded_ids: vec![],
        spec: SplitSpec {
            test_size: n_test,
            train_size: (n as usize) - n_test,
            filter: Filter::None,
            k_sim: 1,
            seed: 0,
            replicas: 1,
        },
        replica: 0,
        train_truncated: false,
    }
}

#[test]
#[ignore]
fn bench_default_probe_step_and_decode() {
    let vocab = synthetic_vocabulary(400, 0);
    let emb = random_embeddings(400, 1024, 0);
    let split = split_all(400, 64);
    let config = ProbeConfig { steps: 3, dropout: 0.1, ..Default::default() };

    let t0 = Instant::now();
    let outcome = train_probe(&vocab, &emb, &split, &config).unwrap();
    let train_s = t0.elapsed().as_secs_f64();
    println!("default-dims: 3 steps in {train_s:.2}s => {:.2}s/step", train_s / 3.0);

    let probe: &TrainedProbe = &outcome.probe;
    let t1 = Instant::now();
    let hyps = decode_ids(probe, &split.test_ids, Some(&emb));
    let dec_s = t1.elapsed().as_secs_f64();
    let total_chars: usize = hyps.iter().map(|h| h.chars().count().max(1)).sum();
    println!(
        "default-dims decode: 64 tokens in {dec_s:.2}s => {:.3}s/token ({} chars total)",
        dec_s / 64.0,
        total_chars
    );
}

#[test]
#[ignore]
fn bench_small_probe_step() {
    // candidate config for the pretrain/memorization criteria
    let vocab = synthetic_vocabulary(2000, 0);
    let emb = random_embeddings(2000, 64, 0);
    let split = split_all(2000, 200);
    let config = ProbeConfig {
        layers: 3,
        d_model: 128,
        heads: 4,
        ffn_dim: 512,
        dropout: 0.0,
        steps: 10,
        max_batch_tokens: 2048,
        ..Default::default()
    };
    let t0 = Instant::now();
    train_probe(&vocab, &emb, &split, &config).unwrap();
    let s = t0.elapsed().as_secs_f64();
    println!("3L/d128 cap2048: 10 steps in {s:.2}s => {:.2}s/step", s / 10.0);

    let config2 = ProbeConfig { d_model: 192, ffn_dim: 768, heads: 4, ..config };
    let t0 = Instant::now();
    train_probe(&vocab, &emb, &split, &config2).unwrap();
    let s = t0.elapsed().as_secs_f64();
    println!("3L/d192 cap2048: 10 steps in {s:.2}s => {:.2}s/step", s / 10.0);
}

#[test]
#[ignore]
fn bench_small_decode() {
    let vocab = synthetic_vocabulary(2000, 0);
    let emb = random_embeddings(2000, 64, 0);
    let split = split_all(2000, 200);
    let config = ProbeConfig {
        layers: 3,
        d_model: 128,
        heads: 4,
        ffn_dim: 512,
        dropout: 0.0,
        steps: 2,
        max_batch_tokens: 2048,
        ..Default::default()
    };
    let outcome = train_probe(&vocab, &emb, &split, &config).unwrap();
    let ids: Vec<u32> = (0..2000).collect();
    let t0 = Instant::now();
    let _ = decode_ids(&outcome.probe, &ids, Some(&emb));
    let s = t0.elapsed().as_secs_f64();
    println!("3L/d128 decode: 2000 tokens in {s:.2}s => {:.4}s/token", s / 2000.0);
}

#[test]
#[ignore]
fn calibrate_pretrain_quality() {
    use spellprobe::probe::{evaluate_joint, pretrain_embeddings};
    use spellprobe::store::write_embeddings_text;

    let vocab = synthetic_vocabulary(2000, 42);
    let ids: Vec<u32> = (0..2000).collect();
    let pre_cfg = ProbeConfig {
        layers: 2, d_model: 128, heads: 4, ffn_dim: 512,
        dropout: 0.1, lr: 1e-3, steps: 5000, max_batch_tokens: 2048,
        seed: 7, ..Default::default()
    };
    let t0 = Instant::now();
    let pre = pretrain_embeddings(&vocab, 64, &pre_cfg).unwrap();
    let joint = evaluate_joint(&pre.probe, &vocab, &ids).unwrap();
    println!(
        "pretrain 2L/d128 drop0.1 5000: {:.0}s loss {:.4} | joint EM {:.1} chrF {:.1}",
        t0.elapsed().as_secs_f64(),
        pre.curve.last().unwrap(),
        joint.aggregates.em,
        joint.aggregates.chrf,
    );
    write_embeddings_text("/tmp/pretrained_emb_5000.txt", &vocab, &pre.embeddings).unwrap();
    fresh_variant(&vocab, &pre.embeddings, "F1 2L/d128 drop0.1 4000", &ProbeConfig {
        layers: 2, d_model: 128, heads: 4, ffn_dim: 512,
        dropout: 0.1, lr: 1e-3, steps: 4000, max_batch_tokens: 2048,
        seed: 99, ..Default::default()
    });
}

fn fresh_variant(vocab: &Vocabulary, emb: &EmbeddingMatrix, name: &str, cfg: &ProbeConfig) {
    use spellprobe::probe::{evaluate_probe, train_probe};

    let split = split_all(2000, 200);
    let t1 = Instant::now();
    let fresh = train_probe(vocab, emb, &split, cfg).unwrap();
    let heldout = evaluate_probe(&fresh.probe, &split, vocab, emb).unwrap();
    let train_sub = Split {
        test_ids: split.train_ids[..300].to_vec(),
        ..split.clone()
    };
    let train_rep = evaluate_probe(&fresh.probe, &train_sub, vocab, emb).unwrap();
    let mut class: std::collections::BTreeMap<&str, (u32, u32)> = Default::default();
    for s in &heldout.scores {
        let stripped = s.reference.trim_start_matches('_');
        let key = if stripped.chars().next().is_some_and(|c| c.is_ascii_digit()) {
            "digit"
        } else if stripped.chars().next().is_some_and(|c| c.is_ascii_uppercase()) {
            "upper"
        } else {
            "lower"
        };
        let e = class.entry(key).or_insert((0, 0));
        e.0 += 1;
        e.1 += s.em as u32;
    }
    println!(
        "{name}: heldout EM {:.1} chrF {:.1} | train-300 EM {:.1} | class (n, em): {:?} ({:.0}s)",
        heldout.aggregates.em,
        heldout.aggregates.chrf,
        train_rep.aggregates.em,
        class,
        t1.elapsed().as_secs_f64()
    );
}

#[test]
#[ignore]
fn calibrate_fresh_follow_up() {
    use spellprobe::store::{load_embeddings_text, MarkerTable};

    let (vocab, emb) =
        load_embeddings_text("/tmp/pretrained_emb_5000.txt", None, &MarkerTable::empty()).unwrap();
    fresh_variant(&vocab, &emb, "F2 3L/d128 drop0.1 3500", &ProbeConfig {
        layers: 3, d_model: 128, heads: 4, ffn_dim: 512,
        dropout: 0.1, lr: 1e-3, steps: 3500, max_batch_tokens: 2048,
        seed: 99, ..Default::default()
    });
}

fn plain_vocabulary(n: usize, seed: u64) -> Vocabulary {
    use rand::Rng;
    const ONSETS: [&str; 12] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t"];
    const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
    const CODAS: [&str; 8] = ["", "", "n", "r", "s", "t", "l", "m"];
    let mut rng = spellprobe::seeding::stream(seed, "plain-vocab", &[]);
    let mut seen = std::collections::HashSet::new();
    let mut tokens = Vec::with_capacity(n);
    while tokens.len() < n {
        let mut word = String::new();
        for _ in 0..rng.random_range(1..=3usize) {
            word.push_str(ONSETS[rng.random_range(0..ONSETS.len())]);
            word.push_str(VOWELS[rng.random_range(0..VOWELS.len())]);
            word.push_str(CODAS[rng.random_range(0..CODAS.len())]);
        }
        if word.len() < 2 || word.len() > 12 {
            continue;
        }
        if rng.random_bool(0.85) {
            word.insert(0, '_');
        }
        if seen.insert(word.clone()) {
            tokens.push(word);
        }
    }
    Vocabulary::new(tokens, '_').unwrap()
}

#[test]
#[ignore]
fn calibrate_plain_vocab_pretrain() {
    use spellprobe::probe::{evaluate_joint, pretrain_embeddings};

    let vocab = plain_vocabulary(2000, 42);
    let ids: Vec<u32> = (0..2000).collect();
    let pre_cfg = ProbeConfig {
        layers: 2, d_model: 128, heads: 4, ffn_dim: 512,
        dropout: 0.1, lr: 1e-3, steps: 5000, max_batch_tokens: 2048,
        seed: 7, ..Default::default()
    };
    let t0 = Instant::now();
    let pre = pretrain_embeddings(&vocab, 64, &pre_cfg).unwrap();
    let joint = evaluate_joint(&pre.probe, &vocab, &ids).unwrap();
    println!(
        "plain-vocab pretrain 5000: {:.0}s loss {:.4} | joint EM {:.1}",
        t0.elapsed().as_secs_f64(),
        pre.curve.last().unwrap(),
        joint.aggregates.em,
    );
    fresh_variant(&vocab, &pre.embeddings, "plain F1 2L/d128 drop0.1 4000", &ProbeConfig {
        layers: 2, d_model: 128, heads: 4, ffn_dim: 512,
        dropout: 0.1, lr: 1e-3, steps: 4000, max_batch_tokens: 2048,
        seed: 99, ..Default::default()
    });
}

#[test]
#[ignore]
fn calibrate_memorization() {
    use spellprobe::probe::evaluate_probe;

    let vocab = synthetic_vocabulary(50, 5);
    let emb = random_embeddings(50, 32, 5);
    let ids: Vec<u32> = (0..50).collect();
    let split = Split {
        test_ids: ids.clone(),
        train_ids: ids,
        excluded_ids: vec![],
        spec: SplitSpec {
            test_size: 50,
            train_size: 50,
            filter: Filter::None,
            k_sim: 1,
            seed: 0,
            replicas: 1,
        },
        replica: 0,
        train_truncated: false,
    };
    let cfg = ProbeConfig {
        layers: 2,
        d_model: 64,
        heads: 4,
        ffn_dim: 256,
        dropout: 0.0,
        lr: 1e-3,
        steps: 2000,
        seed: 3,
        ..Default::default()
    };
    let t0 = Instant::now();
    let outcome = train_probe(&vocab, &emb, &split, &cfg).unwrap();
    let report = evaluate_probe(&outcome.probe, &split, &vocab, &emb).unwrap();
    println!(
        "memorization: EM {:.1} in {:.1}s",
        report.aggregates.em,
        t0.elapsed().as_secs_f64()
    );
}

#[test]
#[ignore]
fn bench_mlm_step() {
    use spellprobe::mlm::{build_mlm_corpus, train_mlm, EmbeddingInit, MlmConfig};
    use spellprobe::synth::synthetic_corpus;

    let vocab = synthetic_vocabulary(500, 0);
    let text = synthetic_corpus(&vocab, 30_000, 1);
    println!("corpus bytes: {}", text.len());
    let corpus = build_mlm_corpus(&text, &vocab, 128, 0).unwrap();
    println!("sequences: {} train, {} val", corpus.train.len(), corpus.val.len());

    let config = MlmConfig {
        layers: 2,
        d_model: 64,
        heads: 4,
        ffn_dim: 256,
        steps: 5,
        val_every: 1000,
        seed: 0,
        ..Default::default()
    };
    let t0 = Instant::now();
    train_mlm(&corpus, &config, &EmbeddingInit::Random).unwrap();
    let s = t0.elapsed().as_secs_f64();
    println!("mlm 2L/d64 seq128 b8: 5 steps in {s:.2}s => {:.2}s/step", s / 5.0);
}

#[test]
#[ignore]
fn calibrate_mini_control() {
    use spellprobe::probe::evaluate_probe;
    use spellprobe::splits::{make_split, SplitSpec};
    use spellprobe::store::LemmaMap;

    // Small-scale stand-in for the full control run: random embeddings on a
    // synthetic vocab, probing the blind chrF floor. chrF here should be
    // close to the full-scale value since it reflects character statistics,
    // not vocabulary size.
    let vocab = synthetic_vocabulary(5000, 7);
    let emb = random_embeddings(5000, 256, 7);
    let spec = SplitSpec {
        test_size: 500,
        train_size: 4000,
        seed: 7,
        replicas: 1,
        ..SplitSpec::default()
    };
    let split = make_split(&vocab, &emb, &spec, 0, &LemmaMap::identity()).unwrap();
    let cfg = ProbeConfig {
        layers: 3,
        d_model: 128,
        heads: 4,
        ffn_dim: 512,
        steps: 800,
        max_batch_tokens: 2048,
        seed: 0,
        ..Default::default()
    };
    let t0 = Instant::now();
    let outcome = train_probe(&vocab, &emb, &split, &cfg).unwrap();
    let report = evaluate_probe(&outcome.probe, &split, &vocab, &emb).unwrap();
    println!(
        "mini control: EM {:.2} chrF {:.2} lev {:.2} ({:.0}s)",
        report.aggregates.em,
        report.aggregates.chrf,
        report.aggregates.lev_ratio,
        t0.elapsed().as_secs_f64()
    );
}

#[test]
#[ignore]
fn show_vocab_sample() {
    let vocab = synthetic_vocabulary(5000, 7);
    let sample: Vec<&str> = (0..60).map(|i| vocab.token(i * 83)).collect();
    println!("{}", sample.join(" "));
    let caps = vocab.tokens().iter().filter(|t| t.trim_start_matches('_').starts_with(|c: char| c.is_ascii_uppercase())).count();
    let digits = vocab.tokens().iter().filter(|t| t.trim_start_matches('_').starts_with(|c: char| c.is_ascii_digit())).count();
    let marked = vocab.tokens().iter().filter(|t| t.starts_with('_')).count();
    let mean_len: f64 = vocab.tokens().iter().map(|t| t.trim_start_matches('_').len()).sum::<usize>() as f64 / 5000.0;
    println!("caps {caps} digits {digits} marked {marked} mean_len {mean_len:.2}");
}
