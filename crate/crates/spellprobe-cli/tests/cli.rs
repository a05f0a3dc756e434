//! End-to-end tests driving the compiled binary. Settings are tiny — these
//! exercise plumbing and exit codes, not model quality. Small model dims go
//! through a config file; everything else through flags (which take
//! precedence).

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn spellprobe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spellprobe"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Config file with a small probe; `steps` is deliberately large so tests
/// that pass `--steps` prove flags win.
fn small_probe_config(dir: &Path) -> PathBuf {
    let p = dir.join("small-probe.json");
    let json = serde_json::json!({
        "probe": {
            "layers": 1, "d_model": 16, "heads": 2, "ffn_dim": 32,
            "dropout": 0.0, "lr": 5e-4, "adam_beta1": 0.9, "adam_beta2": 0.999,
            "adam_eps": 1e-8, "steps": 500, "max_batch_tokens": 1024,
            "max_decode_len": 32, "seed": 0
        }
    });
    std::fs::write(&p, json.to_string()).unwrap();
    p
}

fn probe_args<'a>(config: &'a str, out_dir: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut args = vec![
        "probe",
        "--config",
        config,
        "--random",
        "50,12",
        "--filter",
        "none",
        "--replicas",
        "1",
        "--test-size",
        "6",
        "--train-size",
        "30",
        "--k-sim",
        "3",
        "--steps",
        "4",
        "--seed",
        "11",
        "--out",
        out_dir,
    ];
    args.extend_from_slice(extra);
    args
}

#[test]
fn probe_run_writes_artifacts_and_exits_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let config = small_probe_config(tmp.path());
    let out_dir = tmp.path().join("run");
    let out_str = out_dir.to_str().unwrap();

    let out = spellprobe(&probe_args(config.to_str().unwrap(), out_str, &[]));
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("1 cells completed"), "stdout: {}", stdout(&out));

    for f in ["split.json", "report.csv", "curve.csv", "probe.ckpt", "manifest.json"] {
        assert!(out_dir.join("none/r0").join(f).exists(), "missing {f}");
    }
    let agg = std::fs::read_to_string(out_dir.join("aggregate.csv")).unwrap();
    assert!(agg.starts_with("arm,replicas,em,chrf,lev_ratio\n"));
    assert!(agg.contains("none,1,"));

    // --steps 4 beat the config file's 500
    let curve = std::fs::read_to_string(out_dir.join("none/r0/curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 5, "header + 4 steps:\n{curve}");

    // resume: nothing to redo, table unchanged
    let again = spellprobe(&probe_args(config.to_str().unwrap(), out_str, &["--resume"]));
    assert!(again.status.success(), "stderr: {}", stderr(&again));
    assert!(stdout(&again).contains("1 resumed"), "stdout: {}", stdout(&again));
    assert_eq!(agg, std::fs::read_to_string(out_dir.join("aggregate.csv")).unwrap());
}

#[test]
fn partial_failure_exits_nonzero_and_keeps_completed_cells() {
    let tmp = tempfile::tempdir().unwrap();
    let config = small_probe_config(tmp.path());
    let out_dir = tmp.path().join("run");
    // 12 tokens, k_sim 10: the similarity filter empties the train pool
    let out = spellprobe(&[
        "probe",
        "--config",
        config.to_str().unwrap(),
        "--random",
        "12,8",
        "--filter",
        "none",
        "--filter",
        "similarity",
        "--replicas",
        "1",
        "--test-size",
        "4",
        "--train-size",
        "8",
        "--k-sim",
        "10",
        "--steps",
        "3",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("similarity/r0"), "stderr: {}", stderr(&out));
    assert!(out_dir.join("failures.json").exists());
    assert!(out_dir.join("none/r0/report.csv").exists());
}

#[test]
fn report_subcommand_reprints_the_aggregate_table() {
    let tmp = tempfile::tempdir().unwrap();
    let config = small_probe_config(tmp.path());
    let out_dir = tmp.path().join("run");
    let out_str = out_dir.to_str().unwrap();
    let run = spellprobe(&probe_args(config.to_str().unwrap(), out_str, &[]));
    assert!(run.status.success(), "stderr: {}", stderr(&run));

    let report = spellprobe(&["report", "--out", out_str]);
    assert!(report.status.success(), "stderr: {}", stderr(&report));
    let text = stdout(&report);
    assert!(text.contains("none"), "stdout: {text}");
    // the re-rendered table matches what the probe run wrote
    assert_eq!(
        std::fs::read_to_string(out_dir.join("aggregate.txt")).unwrap(),
        text
    );
}

#[test]
fn report_on_empty_directory_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let out = spellprobe(&["report", "--out", tmp.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("no completed cells"));
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("run");
    let config_path = tmp.path().join("config.json");
    std::fs::write(
        &config_path,
        serde_json::json!({
            "embeddings": { "random": { "v": 50, "d": 12 } },
            "arms": ["none"],
            "split": {
                "test_size": 6, "train_size": 30, "filter": "none",
                "k_sim": 3, "seed": 11, "replicas": 1
            },
            "probe": {
                "layers": 1, "d_model": 16, "heads": 2, "ffn_dim": 32,
                "dropout": 0.0, "lr": 5e-4, "adam_beta1": 0.9, "adam_beta2": 0.999,
                "adam_eps": 1e-8, "steps": 500, "max_batch_tokens": 1024,
                "max_decode_len": 32, "seed": 11
            },
            "out_dir": out_dir
        })
        .to_string(),
    )
    .unwrap();

    // --steps 4 must beat the config file's 500
    let out = spellprobe(&[
        "probe",
        "--config",
        config_path.to_str().unwrap(),
        "--steps",
        "4",
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let manifest: serde_json::Value = serde_json::from_reader(
        std::fs::File::open(out_dir.join("none/r0/manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["probe_config"]["steps"], 4);
}

#[test]
fn partial_config_file_fills_in_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let config_path = tmp.path().join("partial.json");
    std::fs::write(
        &config_path,
        r#"{ "embeddings": { "random": { "v": 40, "d": 8 } }, "arms": ["none"] }"#,
    )
    .unwrap();
    // split subcommand validates and samples without training; the default
    // test size (1000, from a 40-token vocabulary) must fail loudly
    let out = spellprobe(&[
        "split",
        "--config",
        config_path.to_str().unwrap(),
        "--out",
        tmp.path().join("s").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("test set"), "stderr: {}", stderr(&out));
}

#[test]
fn split_subcommand_writes_manifests_only() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("s");
    let out = spellprobe(&[
        "split",
        "--random",
        "40,8",
        "--filter",
        "none",
        "--replicas",
        "2",
        "--test-size",
        "5",
        "--train-size",
        "20",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    assert!(out_dir.join("none/r0/split.json").exists());
    assert!(out_dir.join("none/r1/split.json").exists());
    assert!(!out_dir.join("none/r0/report.csv").exists());
    assert!(stdout(&out).contains("none/r0: test 5  train 20"));
}

#[test]
fn pretrain_then_mlm_chain_works() {
    let tmp = tempfile::tempdir().unwrap();
    let config = small_probe_config(tmp.path());
    let pre_dir = tmp.path().join("pre");
    let out = spellprobe(&[
        "pretrain-embed",
        "--config",
        config.to_str().unwrap(),
        "--random",
        "40,8",
        "--steps",
        "10",
        "--seed",
        "3",
        "--out",
        pre_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("joint decode over 40 tokens"));
    let emb_path = pre_dir.join("embeddings.txt");
    assert!(emb_path.exists());

    let mlm_dir = tmp.path().join("mlm");
    let out = spellprobe(&[
        "mlm",
        "--embeddings",
        emb_path.to_str().unwrap(),
        "--corpus-words",
        "2000",
        "--layers",
        "1",
        "--seq-len",
        "16",
        "--steps",
        "8",
        "--val-every",
        "4",
        "--burn-in",
        "4",
        "--out",
        mlm_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    for f in ["random.csv", "pretrained.csv", "comparison.csv"] {
        assert!(mlm_dir.join("mlm").join(f).exists(), "missing {f}");
    }
    assert!(stdout(&out).contains("max |Δ|"), "stdout: {}", stdout(&out));
}

#[test]
fn analyze_emits_bucket_and_error_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let config = small_probe_config(tmp.path());
    let run_dir = tmp.path().join("run");
    let run_str = run_dir.to_str().unwrap();
    let run = spellprobe(&probe_args(config.to_str().unwrap(), run_str, &[]));
    assert!(run.status.success(), "stderr: {}", stderr(&run));

    let an_dir = tmp.path().join("an");
    let report = run_dir.join("none/r0/report.csv");
    let out = spellprobe(&[
        "analyze",
        "--random",
        "50,12",
        "--seed",
        "11",
        "--report",
        report.to_str().unwrap(),
        "--errors",
        "3",
        "--out",
        an_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    for f in ["rank_buckets.csv", "length_buckets.csv", "errors.csv"] {
        assert!(an_dir.join(f).exists(), "missing {f}");
    }
    let text = stdout(&out);
    assert!(text.contains("by frequency-rank quintile"));
    assert!(text.contains("q1"));
    assert!(text.contains("11+"));
}

#[test]
fn malformed_random_flag_is_rejected() {
    let out = spellprobe(&["probe", "--random", "fifty,12", "--out", "/tmp/unused"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("--random"), "stderr: {}", stderr(&out));
}

#[test]
fn missing_embedding_file_is_a_clean_error() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.txt");
    let out = spellprobe(&[
        "probe",
        "--embeddings",
        missing.to_str().unwrap(),
        "--out",
        tmp.path().join("o").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("does not exist"), "stderr: {}", stderr(&out));
    assert!(!tmp.path().join("o").exists());
}
