//! Orchestration of the experimental matrix: (arm × replica) cells, each
//! producing a split manifest, probe checkpoint, per-token report, and
//! loss curve, plus one aggregate table over the completed cells.
//!
//! Arms are the three training-pool filters plus "control", which runs the
//! none filter over freshly randomized embeddings of the same shape — the
//! floor for what the probe can do with no orthographic signal at all.

use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{mean_aggregates, Aggregates, MetricReport};
use crate::nn::ProbeConfig;
use crate::probe::{evaluate_probe, save_probe, train_probe, write_loss_curve};
use crate::seeding::derive_seed;
use crate::splits::{make_split, Filter, Split, SplitSpec};
use crate::store::{
    load_embeddings_text, random_embeddings, read_report, write_report, EmbeddingMatrix,
    LemmaFallback, LemmaMap, MarkerTable, ReportRecord, Vocabulary,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    /// Text-format embedding file (one `token v1 .. vD` line per row).
    Path(PathBuf),
    /// Randomly initialized vectors (the control configuration as a
    /// primary source).
    Random { v: usize, d: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    None,
    Similarity,
    Lemma,
    Control,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::None, Arm::Similarity, Arm::Lemma, Arm::Control];

    pub fn filter(self) -> Filter {
        match self {
            Arm::None | Arm::Control => Filter::None,
            Arm::Similarity => Filter::Similarity,
            Arm::Lemma => Filter::Lemma,
        }
    }

    fn index(self) -> u64 {
        match self {
            Arm::None => 0,
            Arm::Similarity => 1,
            Arm::Lemma => 2,
            Arm::Control => 3,
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Arm::None => "none",
            Arm::Similarity => "similarity",
            Arm::Lemma => "lemma",
            Arm::Control => "control",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Arm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Arm> {
        match s {
            "none" => Ok(Arm::None),
            "similarity" => Ok(Arm::Similarity),
            "lemma" => Ok(Arm::Lemma),
            "control" => Ok(Arm::Control),
            other => Err(Error::Config(format!(
                "unknown filter {other:?} (expected none|similarity|lemma|control)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CellId {
    pub arm: Arm,
    pub replica: u32,
}

impl fmt::Display for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/r{}", self.arm, self.replica)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub embeddings: EmbeddingSource,
    pub arms: Vec<Arm>,
    pub split: SplitSpec,
    pub probe: ProbeConfig,
    pub out_dir: PathBuf,
    /// Keep only the first N embedding rows (vocabularies are roughly
    /// frequency-ordered, so this keeps the most frequent tokens).
    pub max_rows: Option<usize>,
    pub freq_file: Option<PathBuf>,
    pub lemma_file: Option<PathBuf>,
    /// Cell worker pool; None = available cores.
    pub workers: Option<usize>,
    pub resume: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            embeddings: EmbeddingSource::Random { v: 50_000, d: 1024 },
            arms: Arm::ALL.to_vec(),
            split: SplitSpec::default(),
            probe: ProbeConfig::default(),
            out_dir: PathBuf::from("out"),
            max_rows: None,
            freq_file: None,
            lemma_file: None,
            workers: None,
            resume: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        self.probe.validate()?;
        if self.arms.is_empty() {
            return Err(Error::Config("no arms selected".into()));
        }
        if let EmbeddingSource::Path(p) = &self.embeddings {
            if !p.exists() {
                return Err(Error::Config(format!(
                    "embedding file {} does not exist",
                    p.display()
                )));
            }
        }
        for p in [&self.freq_file, &self.lemma_file].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::Config(format!("file {} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellManifest {
    pub cell: CellId,
    pub probe_config: ProbeConfig,
    pub split_manifest: PathBuf,
    pub checkpoint: PathBuf,
    pub report: PathBuf,
    pub curve: PathBuf,
    pub aggregates: Aggregates,
    pub skipped_tokens: Vec<u32>,
    pub train_truncated: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmRow {
    pub arm: Arm,
    pub replicas: usize,
    pub em: f64,
    pub chrf: f64,
    pub lev_ratio: f64,
}

#[derive(Debug)]
pub struct ExperimentSummary {
    pub completed: Vec<CellId>,
    pub resumed: Vec<CellId>,
    pub failed: Vec<(CellId, String)>,
    pub table: Vec<ArmRow>,
}

impl ExperimentSummary {
    pub fn all_ok(&self) -> bool {
        self.failed.is_empty()
    }
}

/// Everything cells share, loaded once up front.
pub struct PreparedSources {
    pub vocab: Vocabulary,
    pub emb: EmbeddingMatrix,
    pub control_emb: Option<EmbeddingMatrix>,
    pub lemma_map: LemmaMap,
}

impl PreparedSources {
    /// The matrix a given arm trains and evaluates on.
    pub fn arm_embeddings(&self, arm: Arm) -> &EmbeddingMatrix {
        match arm {
            Arm::Control => self.control_emb.as_ref().expect("control arm prepared"),
            _ => &self.emb,
        }
    }
}

pub fn load_source(
    source: &EmbeddingSource,
    max_rows: Option<usize>,
    seed: u64,
) -> Result<(Vocabulary, EmbeddingMatrix)> {
    match source {
        EmbeddingSource::Path(p) => load_embeddings_text(p, max_rows, &MarkerTable::default()),
        EmbeddingSource::Random { v, d } => {
            // word-like tokens, not serial numbers: the control probe's chrF
            // floor comes from realistic character statistics
            let v = max_rows.map_or(*v, |m| m.min(*v));
            let vocab = crate::synth::synthetic_vocabulary(v, seed);
            Ok((vocab, random_embeddings(v, *d, derive_seed(seed, "source-emb", &[]))))
        }
    }
}

pub fn prepare_sources(config: &ExperimentConfig) -> Result<PreparedSources> {
    let (mut vocab, emb) = load_source(&config.embeddings, config.max_rows, config.split.seed)?;
    if let Some(freq) = &config.freq_file {
        let (v, _stats) = crate::store::load_frequency_file(freq, &vocab)?;
        vocab = v;
    }
    let control_emb = config.arms.contains(&Arm::Control).then(|| {
        random_embeddings(
            vocab.len(),
            emb.dim(),
            derive_seed(config.split.seed, "control-emb", &[]),
        )
    });
    let lemma_map = match &config.lemma_file {
        Some(p) => LemmaMap::load(p, LemmaFallback::SuffixStrip)?,
        None => LemmaMap::rule_based(),
    };
    Ok(PreparedSources { vocab, emb, control_emb, lemma_map })
}

pub fn cell_dir(out: &Path, cell: CellId) -> PathBuf {
    out.join(cell.arm.to_string()).join(format!("r{}", cell.replica))
}

/// All cells under `out_dir` whose manifest (the completion marker) exists.
pub fn discover_cells(out_dir: &Path) -> Vec<CellId> {
    let mut cells = Vec::new();
    for arm in Arm::ALL {
        let arm_dir = out_dir.join(arm.to_string());
        let Ok(entries) = std::fs::read_dir(&arm_dir) else { continue };
        for entry in entries.flatten() {
            let name = entry.file_name();
            let Some(replica) = name
                .to_str()
                .and_then(|s| s.strip_prefix('r'))
                .and_then(|s| s.parse::<u32>().ok())
            else {
                continue;
            };
            if entry.path().join("manifest.json").exists() {
                cells.push(CellId { arm, replica });
            }
        }
    }
    cells.sort_by_key(|c| (c.arm.index(), c.replica));
    cells
}

pub fn cell_probe_config(base: &ProbeConfig, cell: CellId) -> ProbeConfig {
    ProbeConfig {
        seed: derive_seed(base.seed, "cell-probe", &[cell.arm.index(), cell.replica as u64]),
        ..*base
    }
}

fn report_records(report: &MetricReport, vocab: &Vocabulary, replica: u32) -> Vec<ReportRecord> {
    report
        .scores
        .iter()
        .map(|s| ReportRecord {
            token_id: s.token_id,
            token: s.reference.clone(),
            prediction: s.hypothesis.clone(),
            em: s.em,
            chrf: s.chrf,
            lev_ratio: s.lev_ratio,
            length: s.reference.chars().count() as u32,
            rank: vocab.rank(s.token_id),
            split_replica: replica,
        })
        .collect()
}

fn run_cell(config: &ExperimentConfig, prep: &PreparedSources, cell: CellId) -> Result<CellManifest> {
    let dir = cell_dir(&config.out_dir, cell);
    std::fs::create_dir_all(&dir)?;
    let wrap = |e: Error| Error::Cell { cell: cell.to_string(), msg: e.to_string() };

    let emb = prep.arm_embeddings(cell.arm);
    let spec = SplitSpec { filter: cell.arm.filter(), ..config.split };
    let split: Split =
        make_split(&prep.vocab, emb, &spec, cell.replica, &prep.lemma_map).map_err(wrap)?;
    let split_path = dir.join("split.json");
    split.write_manifest(&split_path).map_err(wrap)?;

    let probe_cfg = cell_probe_config(&config.probe, cell);
    let outcome = train_probe(&prep.vocab, emb, &split, &probe_cfg).map_err(wrap)?;
    let report = evaluate_probe(&outcome.probe, &split, &prep.vocab, emb).map_err(wrap)?;

    let curve_path = dir.join("curve.csv");
    write_loss_curve(&curve_path, &outcome.curve).map_err(wrap)?;
    let ckpt_path = dir.join("probe.ckpt");
    save_probe(&outcome.probe, &ckpt_path).map_err(wrap)?;
    let report_path = dir.join("report.csv");
    write_report(&report_path, &report_records(&report, &prep.vocab, cell.replica))
        .map_err(wrap)?;

    let manifest = CellManifest {
        cell,
        probe_config: probe_cfg,
        split_manifest: split_path,
        checkpoint: ckpt_path,
        report: report_path,
        curve: curve_path,
        aggregates: report.aggregates,
        skipped_tokens: outcome.skipped,
        train_truncated: split.train_truncated,
    };
    // the manifest is written last, so its presence marks a finished cell
    let f = std::fs::File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(f, &manifest)?;
    Ok(manifest)
}

fn load_manifest(dir: &Path) -> Result<CellManifest> {
    let f = std::fs::File::open(dir.join("manifest.json"))?;
    Ok(serde_json::from_reader::<_, CellManifest>(f)?)
}

fn cell_is_complete(config: &ExperimentConfig, cell: CellId) -> Option<CellManifest> {
    let dir = cell_dir(&config.out_dir, cell);
    let manifest = load_manifest(&dir).ok()?;
    manifest.report.exists().then_some(manifest)
}

/// Mean of the per-replica report aggregates, one row per arm, recomputed
/// from the report files on disk rather than from in-memory state.
pub fn aggregate_table(out_dir: &Path, cells: &[CellId]) -> Result<Vec<ArmRow>> {
    let mut rows = Vec::new();
    for arm in Arm::ALL {
        let mut per_replica = Vec::new();
        for &cell in cells.iter().filter(|c| c.arm == arm) {
            let manifest = load_manifest(&cell_dir(out_dir, cell))?;
            let records = read_report(&manifest.report)?;
            let scores = records
                .iter()
                .map(|r| crate::metrics::TokenScore {
                    token_id: r.token_id,
                    reference: r.token.clone(),
                    hypothesis: r.prediction.clone(),
                    em: r.em,
                    chrf: r.chrf,
                    lev_ratio: r.lev_ratio,
                })
                .collect();
            let report = crate::metrics::aggregate_report(scores, cell.to_string())?;
            per_replica.push(report.aggregates);
        }
        if per_replica.is_empty() {
            continue;
        }
        let mean = mean_aggregates(&per_replica)?;
        rows.push(ArmRow {
            arm,
            replicas: per_replica.len(),
            em: mean.em,
            chrf: mean.chrf,
            lev_ratio: mean.lev_ratio,
        });
    }
    Ok(rows)
}

pub fn write_aggregate_csv(path: impl AsRef<Path>, rows: &[ArmRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["arm", "replicas", "em", "chrf", "lev_ratio"])?;
    for r in rows {
        w.write_record([
            r.arm.to_string(),
            r.replicas.to_string(),
            r.em.to_string(),
            r.chrf.to_string(),
            r.lev_ratio.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn render_aggregate_table(rows: &[ArmRow]) -> String {
    let mut out = String::from("arm         replicas      EM    chrF   lev_ratio\n");
    for r in rows {
        out.push_str(&format!(
            "{:<12}{:>8}{:>8.1}{:>8.1}{:>12.1}\n",
            r.arm.to_string(),
            r.replicas,
            r.em,
            r.chrf,
            r.lev_ratio
        ));
    }
    out
}

#[derive(Debug, Serialize)]
struct FailureManifest<'a> {
    failures: Vec<FailureEntry<'a>>,
}

#[derive(Debug, Serialize)]
struct FailureEntry<'a> {
    cell: String,
    error: &'a str,
}

pub fn config_cells(config: &ExperimentConfig) -> Vec<CellId> {
    config
        .arms
        .iter()
        .flat_map(|&arm| {
            (0..config.split.replicas as u32).map(move |replica| CellId { arm, replica })
        })
        .collect()
}

/// Split manifests only — no training. Same directory layout as the full
/// run, so a later `run_experiment` regenerates identical splits in place.
pub fn write_split_manifests(config: &ExperimentConfig) -> Result<Vec<(CellId, Split)>> {
    config.validate()?;
    let prep = prepare_sources(config)?;
    let mut out = Vec::new();
    for cell in config_cells(config) {
        let spec = SplitSpec { filter: cell.arm.filter(), ..config.split };
        let split = make_split(
            &prep.vocab,
            prep.arm_embeddings(cell.arm),
            &spec,
            cell.replica,
            &prep.lemma_map,
        )
        .map_err(|e| Error::Cell { cell: cell.to_string(), msg: e.to_string() })?;
        let dir = cell_dir(&config.out_dir, cell);
        std::fs::create_dir_all(&dir)?;
        split.write_manifest(dir.join("split.json"))?;
        out.push((cell, split));
    }
    Ok(out)
}

/// Execute every (arm, replica) cell, in parallel up to the worker count.
/// Cell failures don't abort the run: completed artifacts stay on disk, a
/// failure manifest is written, and the summary reports both sides.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentSummary> {
    config.validate()?;
    let prep = prepare_sources(config)?;
    std::fs::create_dir_all(&config.out_dir)?;

    let cells = config_cells(config);

    let mut resumed = Vec::new();
    let mut todo = Vec::new();
    for &cell in &cells {
        if config.resume && cell_is_complete(config, cell).is_some() {
            log::info!("cell {cell} already complete, skipping");
            resumed.push(cell);
        } else {
            todo.push(cell);
        }
    }

    let workers = config
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let results: Vec<(CellId, std::result::Result<CellManifest, String>)> = pool.install(|| {
        todo.par_iter()
            .map(|&cell| {
                let r = run_cell(config, &prep, cell).map_err(|e| e.to_string());
                if let Err(msg) = &r {
                    log::error!("cell {cell} failed: {msg}");
                }
                (cell, r)
            })
            .collect()
    });

    let mut completed = resumed.clone();
    let mut failed = Vec::new();
    for (cell, r) in results {
        match r {
            Ok(_) => completed.push(cell),
            Err(msg) => failed.push((cell, msg)),
        }
    }
    completed.sort_by_key(|c| (c.arm.index(), c.replica));

    let table = aggregate_table(&config.out_dir, &completed)?;
    write_aggregate_csv(config.out_dir.join("aggregate.csv"), &table)?;
    std::fs::write(
        config.out_dir.join("aggregate.txt"),
        render_aggregate_table(&table),
    )?;
    if !failed.is_empty() {
        let manifest = FailureManifest {
            failures: failed
                .iter()
                .map(|(c, e)| FailureEntry { cell: c.to_string(), error: e })
                .collect(),
        };
        let f = std::fs::File::create(config.out_dir.join("failures.json"))?;
        serde_json::to_writer_pretty(f, &manifest)?;
    }

    let resumed_set: std::collections::HashSet<CellId> = resumed.iter().copied().collect();
    Ok(ExperimentSummary {
        completed: completed
            .iter()
            .copied()
            .filter(|c| !resumed_set.contains(c))
            .collect(),
        resumed,
        failed,
        table,
    })
}
