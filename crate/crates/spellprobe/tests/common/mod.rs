//! Brute-force oracles shared across integration test targets. Everything
//! here is deliberately naive — full sorts, full DP matrices, hash-map
//! n-gram enumeration — so it stays an independent check on the optimized
//! library implementations.

#![allow(dead_code)] // each test target uses a different subset

use std::collections::{HashMap, HashSet};

use spellprobe::store::EmbeddingMatrix;

fn ngram_counts(chars: &[char], n: usize) -> HashMap<String, usize> {
    let mut counts = HashMap::new();
    if n <= chars.len() {
        for window in chars.windows(n) {
            *counts.entry(window.iter().collect::<String>()).or_insert(0) += 1;
        }
    }
    counts
}

/// chrF by explicit n-gram enumeration.
///
/// For each order n = 1..=6: clipped matches / hypothesis count gives P_n,
/// clipped matches / reference count gives R_n. P averages P_n over the
/// orders where the hypothesis has at least one n-gram (min(|hyp|, 6) of
/// them), R averages R_n over min(|ref|, 6) orders. F = 100(1+β²)PR/(β²P+R)
/// with β=2.
pub fn chrf_oracle(hyp: &str, reference: &str) -> f64 {
    let h: Vec<char> = hyp.chars().collect();
    let r: Vec<char> = reference.chars().collect();
    if h.is_empty() && r.is_empty() {
        return 100.0;
    }
    let p_orders = h.len().min(6);
    let r_orders = r.len().min(6);
    let mut p_sum = 0.0;
    let mut r_sum = 0.0;
    for n in 1..=6usize {
        let hc = ngram_counts(&h, n);
        let rc = ngram_counts(&r, n);
        let matches: usize = hc
            .iter()
            .map(|(gram, count)| count.min(rc.get(gram).unwrap_or(&0)))
            .sum();
        let h_total: usize = hc.values().sum();
        let r_total: usize = rc.values().sum();
        if h_total > 0 {
            p_sum += matches as f64 / h_total as f64;
        }
        if r_total > 0 {
            r_sum += matches as f64 / r_total as f64;
        }
    }
    let p = if p_orders > 0 { p_sum / p_orders as f64 } else { 0.0 };
    let rec = if r_orders > 0 { r_sum / r_orders as f64 } else { 0.0 };
    let beta_sq = 4.0;
    let denom = beta_sq * p + rec;
    if denom == 0.0 {
        0.0
    } else {
        100.0 * (1.0 + beta_sq) * p * rec / denom
    }
}

/// Edit distance with insertion/deletion cost 1 and substitution cost 2,
/// via the full (m+1)×(n+1) DP matrix.
pub fn edit_distance_oracle(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut dp = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in dp.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        dp[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = dp[i - 1][j - 1] + if a[i - 1] == b[j - 1] { 0 } else { 2 };
            dp[i][j] = sub.min(dp[i - 1][j] + 1).min(dp[i][j - 1] + 1);
        }
    }
    dp[a.len()][b.len()]
}

pub fn lev_ratio_oracle(hyp: &str, reference: &str) -> f64 {
    let l = hyp.chars().count() + reference.chars().count();
    if l == 0 {
        return 100.0;
    }
    let d = edit_distance_oracle(hyp, reference);
    100.0 * (l - d) as f64 / l as f64
}

/// With substitution cost 2 the edit distance collapses to |a|+|b|−2·LCS;
/// a second, fully independent route to the same number.
pub fn lcs_len(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut dp = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            dp[i][j] = if a[i - 1] == b[j - 1] {
                dp[i - 1][j - 1] + 1
            } else {
                dp[i - 1][j].max(dp[i][j - 1])
            };
        }
    }
    dp[a.len()][b.len()]
}

/// Oracle: for one test token, the k best non-test ids by (cosine desc,
/// id asc), skipping zero-norm rows.
pub fn top_k_oracle(emb: &EmbeddingMatrix, test_ids: &[u32], t: u32, k: usize) -> Vec<u32> {
    let test: HashSet<u32> = test_ids.iter().copied().collect();
    let t_row = emb.row(t);
    let t_norm = t_row.dot(&t_row).sqrt();
    if t_norm == 0.0 {
        return vec![];
    }
    let mut cands: Vec<(f64, u32)> = (0..emb.v() as u32)
        .filter(|c| !test.contains(c))
        .filter_map(|c| {
            let row = emb.row(c);
            let norm = row.dot(&row).sqrt();
            if norm == 0.0 {
                return None;
            }
            Some((row.dot(&t_row) / (norm * t_norm), c))
        })
        .collect();
    cands.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    cands.into_iter().take(k).map(|(_, c)| c).collect()
}

/// Union of per-test-token top-k oracles, sorted ascending.
pub fn union_oracle(emb: &EmbeddingMatrix, test_ids: &[u32], k: usize) -> Vec<u32> {
    let mut set = HashSet::new();
    for &t in test_ids {
        set.extend(top_k_oracle(emb, test_ids, t, k));
    }
    let mut v: Vec<u32> = set.into_iter().collect();
    v.sort_unstable();
    v
}
