//! Vocabularies, embedding matrices, and the file formats around them.
//!
//! Embeddings use the GloVe text convention: one `token v1 … vd` line per
//! token, no header. Model-specific whitespace markers (Ġ, ▁, …) are mapped
//! onto the canonical marker "_" at load time via a substitution table.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding;

pub const CANONICAL_MARKER: char = '_';

// ---------------------------------------------------------------------------
// vocabulary
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    /// Corpus counts, if a frequency file was loaded.
    frequency: Option<Vec<u64>>,
    /// 1-based rank per token: frequency rank when counts are loaded,
    /// vocabulary order otherwise (BPE vocabularies are roughly
    /// frequency-ordered, so order is the default proxy).
    ranks: Vec<u32>,
    pub marker: char,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>, marker: char) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if tok.is_empty() {
                return Err(Error::Config(format!("token {i} is empty")));
            }
            if tok.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!(
                    "token {i} ({tok:?}) contains whitespace; markers substitute for it"
                )));
            }
            if index.insert(tok.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate token {tok:?}")));
            }
        }
        let ranks = (1..=tokens.len() as u32).collect();
        Ok(Vocabulary {
            tokens,
            index,
            frequency: None,
            ranks,
            marker,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn frequency(&self) -> Option<&[u64]> {
        self.frequency.as_deref()
    }

    /// 1-based frequency rank (or vocabulary order when no counts exist).
    pub fn rank(&self, id: u32) -> u32 {
        self.ranks[id as usize]
    }

    /// Marker-stripped, case-folded form used for lemma lookups.
    pub fn normalized(&self, id: u32) -> String {
        normalize_token(self.token(id), self.marker)
    }
}

pub fn normalize_token(token: &str, marker: char) -> String {
    token.strip_prefix(marker).unwrap_or(token).to_lowercase()
}

// ---------------------------------------------------------------------------
// marker substitution
// ---------------------------------------------------------------------------

/// Token-start substitutions applied when importing external vocabularies,
/// e.g. "Ġ" → "_". Rules are tried in order; at most one fires per token.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarkerTable {
    pub rules: Vec<(String, String)>,
}

impl Default for MarkerTable {
    fn default() -> Self {
        MarkerTable {
            rules: vec![
                ("Ġ".into(), CANONICAL_MARKER.to_string()),
                ("▁".into(), CANONICAL_MARKER.to_string()),
            ],
        }
    }
}

impl MarkerTable {
    pub fn empty() -> Self {
        MarkerTable { rules: vec![] }
    }

    pub fn apply(&self, token: &str) -> String {
        for (pat, rep) in &self.rules {
            if let Some(rest) = token.strip_prefix(pat.as_str()) {
                return format!("{rep}{rest}");
            }
        }
        token.to_string()
    }
}

// ---------------------------------------------------------------------------
// embedding matrix
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub values: Array2<f64>,
}

impl EmbeddingMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("embedding matrix contains non-finite values".into()));
        }
        Ok(EmbeddingMatrix { values })
    }

    pub fn v(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn row(&self, id: u32) -> ndarray::ArrayView1<'_, f64> {
        self.values.row(id as usize)
    }
}

/// Control embeddings: i.i.d. N(0, 1/d) entries, so rows have ~unit norm
/// like typical pretrained vectors. Pure function of (v, d, seed).
pub fn random_embeddings(v: usize, d: usize, seed: u64) -> EmbeddingMatrix {
    assert!(v >= 1 && d >= 1, "random_embeddings requires v, d >= 1");
    let mut rng = seeding::stream(seed, "random-embeddings", &[v as u64, d as u64]);
    let normal = Normal::new(0.0, (1.0 / d as f64).sqrt()).unwrap();
    let values = Array2::from_shape_simple_fn((v, d), || normal.sample(&mut rng));
    EmbeddingMatrix { values }
}

// ---------------------------------------------------------------------------
// GloVe-style text IO
// ---------------------------------------------------------------------------

/// Sidecar metadata written next to embedding text files.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct EmbeddingSidecar {
    marker: String,
    frequency: Option<Vec<u64>>,
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    path.with_file_name(name)
}

/// Parse a GloVe-convention embedding file. `max_rows` truncates (e.g.
/// "first 50K words"); `markers` rewrites model-specific whitespace markers.
pub fn load_embeddings_text(
    path: impl AsRef<Path>,
    max_rows: Option<usize>,
    markers: &MarkerTable,
) -> Result<(Vocabulary, EmbeddingMatrix)> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);

    let mut tokens: Vec<String> = Vec::new();
    let mut flat: Vec<f64> = Vec::new();
    let mut dim: Option<usize> = None;
    let mut seen: HashMap<String, usize> = HashMap::new();

    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split_ascii_whitespace();
        let raw = fields
            .next()
            .ok_or_else(|| Error::format(path, lineno, "blank token field"))?;
        let token = markers.apply(raw);

        let mut count = 0usize;
        for field in fields {
            let value: f64 = field.parse().map_err(|_| {
                Error::format(path, lineno, format!("non-numeric field {field:?}"))
            })?;
            if !value.is_finite() {
                return Err(Error::format(path, lineno, "non-finite embedding value"));
            }
            flat.push(value);
            count += 1;
        }
        match dim {
            None => {
                if count == 0 {
                    return Err(Error::format(path, lineno, "no embedding values on line"));
                }
                dim = Some(count);
            }
            Some(d) if d != count => {
                return Err(Error::format(
                    path,
                    lineno,
                    format!("expected {d} values, found {count}"),
                ));
            }
            _ => {}
        }
        if let Some(first) = seen.insert(token.clone(), lineno) {
            return Err(Error::format(
                path,
                lineno,
                format!("duplicate token {token:?} (first seen on line {first})"),
            ));
        }
        tokens.push(token);
        if max_rows.is_some_and(|m| tokens.len() >= m) {
            break;
        }
    }

    let dim = dim.ok_or_else(|| Error::format(path, 0, "empty embedding file"))?;
    let values = Array2::from_shape_vec((tokens.len(), dim), flat)
        .expect("row-major layout by construction");
    let mut vocab = Vocabulary::new(tokens, CANONICAL_MARKER)?;

    let sidecar = sidecar_path(path);
    if sidecar.exists() {
        let meta: EmbeddingSidecar = serde_json::from_reader(File::open(&sidecar)?)?;
        if let Some(m) = meta.marker.chars().next() {
            vocab.marker = m;
        }
        if let Some(freq) = meta.frequency {
            if freq.len() == vocab.len() {
                apply_frequency(&mut vocab, freq);
            }
        }
    }

    Ok((vocab, EmbeddingMatrix::new(values)?))
}

/// Write embeddings in the same text convention. f64 Display round-trips
/// exactly, so load(write(x)) == x bit for bit.
pub fn write_embeddings_text(
    path: impl AsRef<Path>,
    vocab: &Vocabulary,
    emb: &EmbeddingMatrix,
) -> Result<()> {
    assert_eq!(vocab.len(), emb.v(), "vocabulary/matrix size mismatch");
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path)?);
    for (i, token) in vocab.tokens().iter().enumerate() {
        write!(w, "{token}")?;
        for value in emb.values.row(i) {
            write!(w, " {value}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;

    if vocab.frequency.is_some() || vocab.marker != CANONICAL_MARKER {
        let meta = EmbeddingSidecar {
            marker: vocab.marker.to_string(),
            frequency: vocab.frequency.clone(),
        };
        serde_json::to_writer_pretty(File::create(sidecar_path(path))?, &meta)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// frequency file
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default)]
pub struct FrequencyStats {
    /// Lines whose token was not in the vocabulary (ignored with a warning).
    pub unknown_tokens: usize,
}

/// Load `token<TAB>count` lines and annotate the vocabulary. Tokens absent
/// from the file get count 0; ranks are recomputed by descending count with
/// vocabulary order as the tie-break.
pub fn load_frequency_file(
    path: impl AsRef<Path>,
    vocab: &Vocabulary,
) -> Result<(Vocabulary, FrequencyStats)> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut counts = vec![0u64; vocab.len()];
    let mut stats = FrequencyStats::default();

    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        if line.is_empty() {
            continue;
        }
        let (token, count) = line
            .split_once('\t')
            .ok_or_else(|| Error::format(path, lineno, "expected token<TAB>count"))?;
        let count: u64 = count
            .trim()
            .parse()
            .map_err(|_| Error::format(path, lineno, format!("bad count {count:?}")))?;
        match vocab.id_of(token) {
            Some(id) => counts[id as usize] = count,
            None => stats.unknown_tokens += 1,
        }
    }
    if stats.unknown_tokens > 0 {
        log::warn!(
            "{}: {} frequency entries not in vocabulary (ignored)",
            path.display(),
            stats.unknown_tokens
        );
    }

    let mut vocab = vocab.clone();
    apply_frequency(&mut vocab, counts);
    Ok((vocab, stats))
}

fn apply_frequency(vocab: &mut Vocabulary, counts: Vec<u64>) {
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(counts[i]), i));
    let mut ranks = vec![0u32; counts.len()];
    for (rank0, &i) in order.iter().enumerate() {
        ranks[i] = rank0 as u32 + 1;
    }
    vocab.frequency = Some(counts);
    vocab.ranks = ranks;
}

// ---------------------------------------------------------------------------
// lemma map
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LemmaFallback {
    /// Unknown tokens are their own lemma.
    Identity,
    /// Strip one of {s, es, ed, ing, er, ers} when the stem keeps length ≥ 3.
    SuffixStrip,
}

/// Lemma lookup over normalized (marker-stripped, case-folded) strings.
/// Lookup is total: tokens missing from the map go through the fallback.
#[derive(Debug, Clone)]
pub struct LemmaMap {
    entries: HashMap<String, String>,
    pub fallback: LemmaFallback,
}

impl LemmaMap {
    pub fn identity() -> Self {
        LemmaMap {
            entries: HashMap::new(),
            fallback: LemmaFallback::Identity,
        }
    }

    /// The built-in rule-based lemmatizer used when no lemma file is given.
    pub fn rule_based() -> Self {
        LemmaMap {
            entries: HashMap::new(),
            fallback: LemmaFallback::SuffixStrip,
        }
    }

    pub fn from_entries(entries: HashMap<String, String>, fallback: LemmaFallback) -> Self {
        LemmaMap { entries, fallback }
    }

    /// Load `token<TAB>lemma` lines; keys and values are normalized.
    pub fn load(path: impl AsRef<Path>, fallback: LemmaFallback) -> Result<Self> {
        let path = path.as_ref();
        let reader = BufReader::new(File::open(path)?);
        let mut entries = HashMap::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (token, lemma) = line
                .split_once('\t')
                .ok_or_else(|| Error::format(path, lineno + 1, "expected token<TAB>lemma"))?;
            entries.insert(
                normalize_token(token.trim(), CANONICAL_MARKER),
                normalize_token(lemma.trim(), CANONICAL_MARKER),
            );
        }
        Ok(LemmaMap { entries, fallback })
    }

    /// Lemma of an already-normalized string.
    pub fn lemma_of(&self, normalized: &str) -> String {
        if let Some(lemma) = self.entries.get(normalized) {
            return lemma.clone();
        }
        match self.fallback {
            LemmaFallback::Identity => normalized.to_string(),
            LemmaFallback::SuffixStrip => suffix_strip(normalized),
        }
    }
}

fn suffix_strip(s: &str) -> String {
    // Longest suffix first so "diggers" → "digg" rather than "digger".
    for suffix in ["ing", "ers", "es", "ed", "er", "s"] {
        if let Some(stem) = s.strip_suffix(suffix) {
            if stem.chars().count() >= 3 {
                return stem.to_string();
            }
        }
    }
    s.to_string()
}

// ---------------------------------------------------------------------------
// report CSV
// ---------------------------------------------------------------------------

/// One row of the per-token evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub token_id: u32,
    pub token: String,
    pub prediction: String,
    pub em: u8,
    pub chrf: f64,
    pub lev_ratio: f64,
    /// Character count including the whitespace marker.
    pub length: u32,
    pub rank: u32,
    pub split_replica: u32,
}

pub const REPORT_HEADER: [&str; 9] = [
    "token_id",
    "token",
    "prediction",
    "em",
    "chrf",
    "lev_ratio",
    "length",
    "rank",
    "split_replica",
];

pub fn write_report(path: impl AsRef<Path>, records: &[ReportRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    if records.is_empty() {
        // serde only emits the header alongside the first row.
        w.write_record(REPORT_HEADER)?;
    }
    for rec in records {
        w.serialize(rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_report(path: impl AsRef<Path>) -> Result<Vec<ReportRecord>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    let mut records = Vec::new();
    for row in r.deserialize() {
        records.push(row?);
    }
    Ok(records)
}
