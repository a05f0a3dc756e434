//! Command-line front end. Every experiment maps to one subcommand; all
//! parameters are settable by flag or by a JSON config file (flags win).

use std::fs::File;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use spellprobe::analysis::{
    bucket_by_length, bucket_by_rank_quintile, error_table, render_error_table, write_bucket_csv,
    write_error_csv, BucketReport,
};
use spellprobe::experiment::{
    aggregate_table, cell_dir, cell_probe_config, discover_cells, load_source, prepare_sources,
    render_aggregate_table, run_experiment, write_aggregate_csv, write_split_manifests, Arm,
    CellId, EmbeddingSource, ExperimentConfig,
};
use spellprobe::metrics::{aggregate_report, TokenScore};
use spellprobe::mlm::{
    build_mlm_corpus, compare_curves, smoothed_train, train_mlm, write_comparison_csv,
    write_curve_csv, EmbeddingInit, MlmConfig, TrainingCurve,
};
use spellprobe::probe::{
    evaluate_joint, pretrain_embeddings, save_probe, training_size_sweep, write_loss_curve,
    write_sweep_csv, SweepPoint,
};
use spellprobe::splits::{make_split, SplitSpec};
use spellprobe::store::{read_report, write_embeddings_text, MarkerTable};

#[derive(Parser)]
#[command(
    name = "spellprobe",
    version,
    about = "Measure how much spelling information token embeddings carry"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write split manifests for every (filter, replica) cell, no training
    Split(CommonArgs),
    /// Train and evaluate the probe over the full (filter × replica) matrix
    Probe(CommonArgs),
    /// Probe quality as a function of training-set size
    Sweep(SweepArgs),
    /// Learn embeddings from scratch through the spelling decoder
    PretrainEmbed(PretrainArgs),
    /// Compare MLM training with pretrained vs random embedding init
    Mlm(MlmArgs),
    /// Bucket and error analysis of an existing per-token report
    Analyze(AnalyzeArgs),
    /// Recompute the aggregate table from completed cells on disk
    Report(ReportArgs),
}

#[derive(Args, Debug, Default)]
struct CommonArgs {
    /// JSON config file mirroring the experiment config; flags override it
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Embedding text file, one `token v1 .. vD` line per row
    #[arg(long, value_name = "PATH", conflicts_with = "random")]
    embeddings: Option<PathBuf>,
    /// Random embeddings over a synthetic vocabulary, e.g. --random 50000,1024
    #[arg(long, value_name = "V,D")]
    random: Option<String>,
    /// Training-pool filter (none|similarity|lemma|control); repeatable
    #[arg(long = "filter", value_name = "ARM")]
    filters: Vec<String>,
    #[arg(long, value_name = "N")]
    replicas: Option<usize>,
    #[arg(long, value_name = "N")]
    train_size: Option<usize>,
    #[arg(long, value_name = "N")]
    test_size: Option<usize>,
    /// Cosine neighbors excluded per test token by the similarity filter
    #[arg(long, value_name = "N")]
    k_sim: Option<usize>,
    /// Optimizer steps
    #[arg(long, value_name = "N")]
    steps: Option<usize>,
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Skip cells whose artifacts already exist
    #[arg(long)]
    resume: bool,
    /// token<TAB>count file for frequency ranks
    #[arg(long, value_name = "PATH")]
    freq_file: Option<PathBuf>,
    /// token<TAB>lemma file for the lemma filter
    #[arg(long, value_name = "PATH")]
    lemma_file: Option<PathBuf>,
    /// Keep only the first N embedding rows
    #[arg(long, value_name = "N")]
    max_rows: Option<usize>,
    /// Cell worker pool size (default: available cores)
    #[arg(long, value_name = "N")]
    workers: Option<usize>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated training-set sizes
    #[arg(long, value_name = "N,N,..", default_value = "1000,2000,4000,8000,16000,32000")]
    sizes: String,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Dimension of the learned embeddings (default: source dimension)
    #[arg(long, value_name = "N")]
    dim: Option<usize>,
}

#[derive(Args, Debug)]
struct MlmArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Plain-text training corpus; synthesized from the vocabulary if absent
    #[arg(long, value_name = "PATH")]
    corpus: Option<PathBuf>,
    /// Words to synthesize when no corpus is given
    #[arg(long, value_name = "N", default_value_t = 20_000)]
    corpus_words: usize,
    #[arg(long, value_name = "N")]
    layers: Option<usize>,
    #[arg(long, value_name = "N")]
    seq_len: Option<usize>,
    /// Validation-loss checkpoint interval in steps
    #[arg(long, value_name = "N")]
    val_every: Option<usize>,
    /// Steps ignored before the curve comparison
    #[arg(long, value_name = "N", default_value_t = 100)]
    burn_in: u64,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Per-token report CSV from a probe run
    #[arg(long, value_name = "PATH")]
    report: PathBuf,
    /// Error-table sample size
    #[arg(long, value_name = "N", default_value_t = 20)]
    errors: usize,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Experiment output directory to scan
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

fn parse_random(s: &str) -> Result<EmbeddingSource> {
    let (v, d) = s
        .split_once(',')
        .with_context(|| format!("--random wants V,D, got {s:?}"))?;
    Ok(EmbeddingSource::Random {
        v: v.trim().parse().with_context(|| format!("bad V in --random {s:?}"))?,
        d: d.trim().parse().with_context(|| format!("bad D in --random {s:?}"))?,
    })
}

/// Defaults ← config file ← explicit flags.
fn resolve(args: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(p) => {
            let f = File::open(p).with_context(|| format!("opening config {}", p.display()))?;
            serde_json::from_reader(f).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(p) = &args.embeddings {
        cfg.embeddings = EmbeddingSource::Path(p.clone());
    }
    if let Some(r) = &args.random {
        cfg.embeddings = parse_random(r)?;
    }
    if !args.filters.is_empty() {
        cfg.arms = args
            .filters
            .iter()
            .map(|s| s.parse::<Arm>())
            .collect::<spellprobe::Result<_>>()?;
    }
    if let Some(n) = args.replicas {
        cfg.split.replicas = n;
    }
    if let Some(n) = args.train_size {
        cfg.split.train_size = n;
    }
    if let Some(n) = args.test_size {
        cfg.split.test_size = n;
    }
    if let Some(n) = args.k_sim {
        cfg.split.k_sim = n;
    }
    if let Some(n) = args.steps {
        cfg.probe.steps = n;
    }
    if let Some(s) = args.seed {
        cfg.split.seed = s;
        cfg.probe.seed = s;
    }
    if let Some(p) = &args.out {
        cfg.out_dir = p.clone();
    }
    if args.resume {
        cfg.resume = true;
    }
    if args.freq_file.is_some() {
        cfg.freq_file = args.freq_file.clone();
    }
    if args.lemma_file.is_some() {
        cfg.lemma_file = args.lemma_file.clone();
    }
    if args.max_rows.is_some() {
        cfg.max_rows = args.max_rows;
    }
    if args.workers.is_some() {
        cfg.workers = args.workers;
    }
    Ok(cfg)
}

fn cmd_split(args: CommonArgs) -> Result<ExitCode> {
    let cfg = resolve(&args)?;
    for (cell, split) in write_split_manifests(&cfg)? {
        println!(
            "{cell}: test {}  train {}  excluded {}{}",
            split.test_ids.len(),
            split.train_ids.len(),
            split.excluded_ids.len(),
            if split.train_truncated { "  (train truncated)" } else { "" }
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_probe(args: CommonArgs) -> Result<ExitCode> {
    let cfg = resolve(&args)?;
    let summary = run_experiment(&cfg)?;
    print!("{}", render_aggregate_table(&summary.table));
    println!(
        "{} cells completed, {} resumed, {} failed",
        summary.completed.len(),
        summary.resumed.len(),
        summary.failed.len()
    );
    if summary.all_ok() {
        Ok(ExitCode::SUCCESS)
    } else {
        for (cell, msg) in &summary.failed {
            eprintln!("cell {cell} failed: {msg}");
        }
        Ok(ExitCode::FAILURE)
    }
}

fn cmd_sweep(args: SweepArgs) -> Result<ExitCode> {
    let cfg = resolve(&args.common)?;
    let sizes: Vec<usize> = args
        .sizes
        .split(',')
        .map(|s| s.trim().parse().with_context(|| format!("bad size {s:?}")))
        .collect::<Result<_>>()?;
    let arm = *cfg.arms.first().unwrap_or(&Arm::None);
    let prep = prepare_sources(&cfg)?;
    let emb = prep.arm_embeddings(arm);
    let dir = cfg.out_dir.join("sweep");
    std::fs::create_dir_all(&dir)?;

    let mut per_replica: Vec<Vec<SweepPoint>> = Vec::new();
    for replica in 0..cfg.split.replicas as u32 {
        let spec = SplitSpec { filter: arm.filter(), ..cfg.split };
        let split = make_split(&prep.vocab, emb, &spec, replica, &prep.lemma_map)?;
        let probe_cfg = cell_probe_config(&cfg.probe, CellId { arm, replica });
        let points = training_size_sweep(&prep.vocab, emb, &split, &sizes, &probe_cfg)?;
        write_sweep_csv(dir.join(format!("r{replica}.csv")), &points)?;
        log::info!("sweep replica {replica} done");
        per_replica.push(points);
    }

    let n = per_replica.len() as f64;
    let mean: Vec<SweepPoint> = (0..sizes.len())
        .map(|i| SweepPoint {
            train_size: sizes[i],
            em: per_replica.iter().map(|r| r[i].em).sum::<f64>() / n,
            chrf: per_replica.iter().map(|r| r[i].chrf).sum::<f64>() / n,
            lev_ratio: per_replica.iter().map(|r| r[i].lev_ratio).sum::<f64>() / n,
        })
        .collect();
    write_sweep_csv(dir.join("mean.csv"), &mean)?;
    println!("train_size      EM    chrF");
    for p in &mean {
        println!("{:>10}{:>8.1}{:>8.1}", p.train_size, p.em, p.chrf);
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_pretrain(args: PretrainArgs) -> Result<ExitCode> {
    let cfg = resolve(&args.common)?;
    let (vocab, src_emb) = load_source(&cfg.embeddings, cfg.max_rows, cfg.split.seed)?;
    let d_emb = args.dim.unwrap_or_else(|| src_emb.dim());
    drop(src_emb); // only the vocabulary matters; the vectors are learned

    let outcome = pretrain_embeddings(&vocab, d_emb, &cfg.probe)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    write_embeddings_text(cfg.out_dir.join("embeddings.txt"), &vocab, &outcome.embeddings)?;
    save_probe(&outcome.probe, cfg.out_dir.join("probe.ckpt"))?;
    write_loss_curve(cfg.out_dir.join("curve.csv"), &outcome.curve)?;

    let ids: Vec<u32> = (0..vocab.len() as u32).collect();
    let report = evaluate_joint(&outcome.probe, &vocab, &ids)?;
    println!(
        "joint decode over {} tokens: EM {:.1}  chrF {:.1}  lev_ratio {:.1}",
        ids.len(),
        report.aggregates.em,
        report.aggregates.chrf,
        report.aggregates.lev_ratio
    );
    if !outcome.skipped.is_empty() {
        println!("{} tokens skipped (longer than max_decode_len)", outcome.skipped.len());
    }
    Ok(ExitCode::SUCCESS)
}

fn final_smoothed(curve: &TrainingCurve, window: usize) -> Option<(u64, f64)> {
    smoothed_train(curve, window).last().copied()
}

fn cmd_mlm(args: MlmArgs) -> Result<ExitCode> {
    let cfg = resolve(&args.common)?;
    let EmbeddingSource::Path(path) = &cfg.embeddings else {
        bail!("mlm needs --embeddings pointing at a pretrained matrix (see pretrain-embed)");
    };
    let (vocab, emb) =
        spellprobe::store::load_embeddings_text(path, cfg.max_rows, &MarkerTable::default())?;

    let defaults = MlmConfig::default();
    let d = emb.dim();
    let heads = [8, 4, 2, 1].into_iter().find(|h| d % h == 0).unwrap();
    let mlm_cfg = MlmConfig {
        layers: args.layers.unwrap_or(defaults.layers),
        d_model: d,
        heads,
        ffn_dim: 4 * d,
        steps: args.common.steps.unwrap_or(defaults.steps),
        seq_len: args.seq_len.unwrap_or(defaults.seq_len),
        val_every: args.val_every.unwrap_or(defaults.val_every),
        seed: cfg.split.seed,
        ..defaults
    };

    let text = match &args.corpus {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => {
            log::info!("no corpus given; synthesizing {} words", args.corpus_words);
            spellprobe::synth::synthetic_corpus(&vocab, args.corpus_words, cfg.split.seed)
        }
    };
    let corpus = build_mlm_corpus(&text, &vocab, mlm_cfg.seq_len, mlm_cfg.seed)?;
    log::info!(
        "corpus: {} train / {} val sequences of length {}",
        corpus.train.len(),
        corpus.val.len(),
        corpus.seq_len
    );

    let random = train_mlm(&corpus, &mlm_cfg, &EmbeddingInit::Random)?;
    let pretrained = train_mlm(&corpus, &mlm_cfg, &EmbeddingInit::Pretrained(emb))?;
    if random.mask_fingerprints != pretrained.mask_fingerprints {
        bail!("mask streams diverged between arms despite a shared seed");
    }

    let dir = cfg.out_dir.join("mlm");
    std::fs::create_dir_all(&dir)?;
    write_curve_csv(dir.join("random.csv"), &random.curve)?;
    write_curve_csv(dir.join("pretrained.csv"), &pretrained.curve)?;
    let cmp = compare_curves(&pretrained.curve, &random.curve, args.burn_in)?;
    write_comparison_csv(dir.join("comparison.csv"), &cmp)?;

    for (name, outcome) in [("random", &random), ("pretrained", &pretrained)] {
        if let Some((step, loss)) = final_smoothed(&outcome.curve, 50) {
            println!("{name:>10} arm: smoothed train loss {loss:.4} at step {step}");
        }
    }
    println!(
        "val-loss Δ (pretrained − random) after step {}: max |Δ| {:.4}, mean |Δ| {:.4}",
        cmp.burn_in, cmp.max_abs_after_burn_in, cmp.mean_abs_after_burn_in
    );
    Ok(ExitCode::SUCCESS)
}

fn print_buckets(title: &str, buckets: &[BucketReport]) {
    println!("{title}");
    println!("  bucket   count      EM    chrF");
    for b in buckets {
        println!("  {:<8}{:>6}{:>8.1}{:>8.1}", b.bucket, b.count, b.em, b.chrf);
    }
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<ExitCode> {
    let cfg = resolve(&args.common)?;
    let (mut vocab, _) = load_source(&cfg.embeddings, cfg.max_rows, cfg.split.seed)?;
    if let Some(freq) = &cfg.freq_file {
        vocab = spellprobe::store::load_frequency_file(freq, &vocab)?.0;
    }

    let records = read_report(&args.report)?;
    if records.is_empty() {
        bail!("report {} has no rows", args.report.display());
    }
    let scores: Vec<TokenScore> = records
        .iter()
        .map(|r| TokenScore {
            token_id: r.token_id,
            reference: r.token.clone(),
            hypothesis: r.prediction.clone(),
            em: r.em,
            chrf: r.chrf,
            lev_ratio: r.lev_ratio,
        })
        .collect();
    let group = args.report.display().to_string();
    let report = aggregate_report(scores, group)?;

    std::fs::create_dir_all(&cfg.out_dir)?;
    let rank = bucket_by_rank_quintile(&report, &vocab)?;
    write_bucket_csv(cfg.out_dir.join("rank_buckets.csv"), &rank)?;
    let length = bucket_by_length(&report);
    write_bucket_csv(cfg.out_dir.join("length_buckets.csv"), &length)?;
    let errors = error_table(&report, args.errors, cfg.split.seed);
    write_error_csv(cfg.out_dir.join("errors.csv"), &errors)?;

    println!(
        "{} rows: EM {:.1}  chrF {:.1}  lev_ratio {:.1}\n",
        report.scores.len(),
        report.aggregates.em,
        report.aggregates.chrf,
        report.aggregates.lev_ratio
    );
    print_buckets("by frequency-rank quintile", &rank);
    println!();
    print_buckets("by reference length", &length);
    println!();
    print!("{}", render_error_table(&errors));
    Ok(ExitCode::SUCCESS)
}

fn cmd_report(args: ReportArgs) -> Result<ExitCode> {
    let cells = discover_cells(&args.out);
    if cells.is_empty() {
        bail!("no completed cells under {}", args.out.display());
    }
    let table = aggregate_table(&args.out, &cells)?;
    write_aggregate_csv(args.out.join("aggregate.csv"), &table)?;
    print!("{}", render_aggregate_table(&table));

    // exit status reflects completeness: a cell directory without its
    // manifest means an interrupted or failed run
    let mut missing = Vec::new();
    for arm in Arm::ALL {
        let replicas = cells.iter().filter(|c| c.arm == arm).count();
        if replicas == 0 {
            continue;
        }
        for replica in 0..replicas as u32 {
            let cell = CellId { arm, replica };
            if !cell_dir(&args.out, cell).join("manifest.json").exists() {
                missing.push(cell);
            }
        }
    }
    if args.out.join("failures.json").exists() {
        eprintln!("failures.json present: at least one cell failed");
        return Ok(ExitCode::FAILURE);
    }
    if missing.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        for c in missing {
            eprintln!("incomplete cell: {c}");
        }
        Ok(ExitCode::FAILURE)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Split(a) => cmd_split(a),
        Cmd::Probe(a) => cmd_probe(a),
        Cmd::Sweep(a) => cmd_sweep(a),
        Cmd::PretrainEmbed(a) => cmd_pretrain(a),
        Cmd::Mlm(a) => cmd_mlm(a),
        Cmd::Analyze(a) => cmd_analyze(a),
        Cmd::Report(a) => cmd_report(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
