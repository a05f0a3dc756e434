//! Evaluation metrics: exact match, chrF, Levenshtein distance ratio.
//!
//! All three operate on Unicode scalar values ("characters" below) and map
//! to [0, 100]. chrF here averages n-gram precision over the orders where
//! the hypothesis has at least one n-gram and recall over the orders where
//! the reference does, so identical strings always score 100 regardless of
//! length.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHRF_MAX_ORDER: usize = 6;
pub const CHRF_BETA: f64 = 2.0;

/// 1 iff the strings are byte-identical.
pub fn exact_match(hyp: &str, reference: &str) -> u8 {
    u8::from(hyp == reference)
}

/// Character n-gram F-score, n = 1..=6, β = 2 (recall-weighted).
pub fn chrf(hyp: &str, reference: &str) -> f64 {
    chrf_with(hyp, reference, CHRF_MAX_ORDER, CHRF_BETA)
}

pub fn chrf_with(hyp: &str, reference: &str, n_max: usize, beta: f64) -> f64 {
    assert!(n_max >= 1, "chrf requires n_max >= 1");
    let h: Vec<char> = hyp.chars().collect();
    let r: Vec<char> = reference.chars().collect();
    if h.is_empty() && r.is_empty() {
        return 100.0;
    }

    // A single map per order, counting hypothesis and reference occurrences
    // side by side; the clipped match count is Σ min(h_count, r_count).
    let mut precision_sum = 0.0;
    let mut recall_sum = 0.0;
    for n in 1..=n_max {
        let h_total = h.len().saturating_sub(n - 1);
        let r_total = r.len().saturating_sub(n - 1);
        if h_total == 0 && r_total == 0 {
            break;
        }
        let mut grams: HashMap<&[char], (usize, usize)> = HashMap::new();
        if h.len() >= n {
            for w in h.windows(n) {
                grams.entry(w).or_default().0 += 1;
            }
        }
        if r.len() >= n {
            for w in r.windows(n) {
                grams.entry(w).or_default().1 += 1;
            }
        }
        let matches: usize = grams.values().map(|&(hc, rc)| hc.min(rc)).sum();
        if h_total > 0 {
            precision_sum += matches as f64 / h_total as f64;
        }
        if r_total > 0 {
            recall_sum += matches as f64 / r_total as f64;
        }
    }

    let p_orders = h.len().min(n_max);
    let r_orders = r.len().min(n_max);
    let p = if p_orders > 0 { precision_sum / p_orders as f64 } else { 0.0 };
    let rec = if r_orders > 0 { recall_sum / r_orders as f64 } else { 0.0 };
    let beta_sq = beta * beta;
    let denom = beta_sq * p + rec;
    if denom == 0.0 {
        0.0
    } else {
        100.0 * (1.0 + beta_sq) * p * rec / denom
    }
}

/// 100·(L − D)/L with L = |hyp| + |ref| and D the edit distance under
/// insertion/deletion cost 1, substitution cost 2. Two empty strings → 100.
pub fn levenshtein_ratio(hyp: &str, reference: &str) -> f64 {
    let h: Vec<char> = hyp.chars().collect();
    let r: Vec<char> = reference.chars().collect();
    let l = h.len() + r.len();
    if l == 0 {
        return 100.0;
    }
    let d = edit_distance(&h, &r);
    100.0 * (l - d) as f64 / l as f64
}

/// Two-row DP over the shorter string.
fn edit_distance(a: &[char], b: &[char]) -> usize {
    let (a, b) = if a.len() < b.len() { (a, b) } else { (b, a) };
    let mut prev: Vec<usize> = (0..=a.len()).collect();
    let mut cur = vec![0usize; a.len() + 1];
    for (j, &bc) in b.iter().enumerate() {
        cur[0] = j + 1;
        for (i, &ac) in a.iter().enumerate() {
            let sub = prev[i] + if ac == bc { 0 } else { 2 };
            cur[i + 1] = sub.min(prev[i + 1] + 1).min(cur[i] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[a.len()]
}

// ---------------------------------------------------------------------------
// per-token scores and report aggregation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub token_id: u32,
    pub reference: String,
    pub hypothesis: String,
    pub em: u8,
    pub chrf: f64,
    pub lev_ratio: f64,
}

pub fn score_pair(token_id: u32, reference: &str, hypothesis: &str) -> TokenScore {
    TokenScore {
        token_id,
        reference: reference.to_string(),
        hypothesis: hypothesis.to_string(),
        em: exact_match(hypothesis, reference),
        chrf: chrf(hypothesis, reference),
        lev_ratio: levenshtein_ratio(hypothesis, reference),
    }
}

/// Macro-averaged aggregates; EM is a percentage as reported in the tables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub em: f64,
    pub chrf: f64,
    pub lev_ratio: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    /// Grouping key, e.g. "glove/similarity/replica3".
    pub group: String,
    pub scores: Vec<TokenScore>,
    pub aggregates: Aggregates,
}

pub fn aggregate_scores(scores: &[TokenScore]) -> Result<Aggregates> {
    if scores.is_empty() {
        return Err(Error::Config("cannot aggregate an empty score list".into()));
    }
    let n = scores.len() as f64;
    Ok(Aggregates {
        em: 100.0 * scores.iter().map(|s| s.em as f64).sum::<f64>() / n,
        chrf: scores.iter().map(|s| s.chrf).sum::<f64>() / n,
        lev_ratio: scores.iter().map(|s| s.lev_ratio).sum::<f64>() / n,
    })
}

pub fn aggregate_report(scores: Vec<TokenScore>, group: impl Into<String>) -> Result<MetricReport> {
    let aggregates = aggregate_scores(&scores)?;
    Ok(MetricReport {
        group: group.into(),
        scores,
        aggregates,
    })
}

/// Equal-weighted mean of replica aggregates (mean of replica means).
pub fn mean_aggregates(items: &[Aggregates]) -> Result<Aggregates> {
    if items.is_empty() {
        return Err(Error::Config("cannot average zero aggregates".into()));
    }
    let n = items.len() as f64;
    Ok(Aggregates {
        em: items.iter().map(|a| a.em).sum::<f64>() / n,
        chrf: items.iter().map(|a| a.chrf).sum::<f64>() / n,
        lev_ratio: items.iter().map(|a| a.lev_ratio).sum::<f64>() / n,
    })
}
