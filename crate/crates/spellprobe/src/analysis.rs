//! Stratified result analysis: frequency-rank quintiles, length buckets,
//! and sampled qualitative error tables.

use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{MetricReport, TokenScore};
use crate::seeding::stream;
use crate::store::Vocabulary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub bucket: String,
    pub count: usize,
    /// Macro means over the bucket; 0.0 for an empty bucket.
    pub em: f64,
    pub chrf: f64,
}

fn bucket_from(scores: &[&TokenScore], label: impl Into<String>) -> BucketReport {
    let n = scores.len();
    let (mut em, mut chrf) = (0.0, 0.0);
    for s in scores {
        em += s.em as f64 * 100.0;
        chrf += s.chrf;
    }
    if n > 0 {
        em /= n as f64;
        chrf /= n as f64;
    }
    BucketReport { bucket: label.into(), count: n, em, chrf }
}

/// Quintile index (1..=5) of a 1-based rank; quintile i covers ranks
/// (i−1)·V/5+1 ..= i·V/5 with integer-division boundaries.
pub(crate) fn quintile_of(rank: u32, v: usize) -> usize {
    debug_assert!(rank >= 1 && rank as usize <= v);
    for i in 1..=5usize {
        if rank as usize <= i * v / 5 {
            return i;
        }
    }
    5
}

/// Partition a report into five frequency-rank quintiles. Rank defaults to
/// vocabulary order unless the vocabulary carries an explicit frequency
/// file.
pub fn bucket_by_rank_quintile(
    report: &MetricReport,
    vocab: &Vocabulary,
) -> Result<Vec<BucketReport>> {
    let v = vocab.len();
    if v < 5 {
        return Err(Error::Config(format!(
            "need at least 5 vocabulary items for quintiles, have {v}"
        )));
    }
    let mut groups: [Vec<&TokenScore>; 5] = Default::default();
    for s in &report.scores {
        groups[quintile_of(vocab.rank(s.token_id), v) - 1].push(s);
    }
    Ok(groups
        .iter()
        .enumerate()
        .map(|(i, g)| bucket_from(g, format!("q{}", i + 1)))
        .collect())
}

/// Partition a report by reference length in characters (the whitespace
/// marker counts): buckets 1..=10 plus "11+".
pub fn bucket_by_length(report: &MetricReport) -> Vec<BucketReport> {
    let mut groups: Vec<Vec<&TokenScore>> = vec![Vec::new(); 11];
    for s in &report.scores {
        let len = s.reference.chars().count();
        let idx = if len >= 11 { 10 } else { len.saturating_sub(1) };
        groups[idx].push(s);
    }
    groups
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let label = if i == 10 { "11+".to_string() } else { (i + 1).to_string() };
            bucket_from(g, label)
        })
        .collect()
}

/// Uniform sample (without replacement) of n mismatched rows, deterministic
/// in the seed. Returns everything (with a warning) if the report has
/// fewer than n mismatches.
pub fn error_table(report: &MetricReport, n: usize, seed: u64) -> Vec<TokenScore> {
    let errors: Vec<&TokenScore> = report.scores.iter().filter(|s| s.em == 0).collect();
    if errors.len() <= n {
        if errors.len() < n {
            log::warn!(
                "requested {n} error rows but the report only has {}",
                errors.len()
            );
        }
        return errors.into_iter().cloned().collect();
    }
    let mut rng = stream(seed, "error-sample", &[]);
    let mut picks = sample(&mut rng, errors.len(), n).into_vec();
    picks.sort_unstable();
    picks.into_iter().map(|i| errors[i].clone()).collect()
}

/// Aligned text rendering of an error table for terminal output.
pub fn render_error_table(rows: &[TokenScore]) -> String {
    let ref_w = rows
        .iter()
        .map(|r| r.reference.chars().count())
        .chain(["token".len()])
        .max()
        .unwrap();
    let mut out = String::new();
    out.push_str(&format!("{:<ref_w$}  prediction\n", "token"));
    for r in rows {
        let pad = ref_w - r.reference.chars().count();
        out.push_str(&r.reference);
        out.extend(std::iter::repeat_n(' ', pad + 2));
        out.push_str(&r.hypothesis);
        out.push('\n');
    }
    out
}

pub fn write_bucket_csv(path: impl AsRef<Path>, buckets: &[BucketReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["bucket", "count", "em", "chrf"])?;
    for b in buckets {
        w.write_record([
            b.bucket.clone(),
            b.count.to_string(),
            b.em.to_string(),
            b.chrf.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_error_csv(path: impl AsRef<Path>, rows: &[TokenScore]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["token", "prediction"])?;
    for r in rows {
        w.write_record([r.reference.clone(), r.hypothesis.clone()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::score_pair;

    fn report_from(pairs: &[(&str, &str)]) -> MetricReport {
        let scores = pairs
            .iter()
            .enumerate()
            .map(|(i, (r, h))| score_pair(i as u32, r, h))
            .collect();
        crate::metrics::aggregate_report(scores, "test").unwrap()
    }

    #[test]
    fn quintile_boundaries_match_the_50000_vocabulary_layout() {
        assert_eq!(quintile_of(1, 50000), 1);
        assert_eq!(quintile_of(10000, 50000), 1);
        assert_eq!(quintile_of(10001, 50000), 2);
        assert_eq!(quintile_of(20000, 50000), 2);
        assert_eq!(quintile_of(30001, 50000), 4);
        assert_eq!(quintile_of(40000, 50000), 4);
        assert_eq!(quintile_of(40001, 50000), 5);
        assert_eq!(quintile_of(50000, 50000), 5);
    }

    #[test]
    fn quintiles_partition_any_vocab_size() {
        for v in [5usize, 12, 17, 100, 101] {
            let mut counts = [0usize; 5];
            for rank in 1..=v as u32 {
                counts[quintile_of(rank, v) - 1] += 1;
            }
            assert_eq!(counts.iter().sum::<usize>(), v);
            // integer boundaries keep buckets within one of each other
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            assert!(hi - lo <= 1, "v={v}: {counts:?}");
        }
    }

    #[test]
    fn rank_buckets_match_hand_computation() {
        // 10 tokens, vocabulary order = rank; quintiles of size 2
        let tokens: Vec<String> = (0..10).map(|i| format!("t{i}")).collect();
        let vocab = Vocabulary::new(tokens, '_').unwrap();
        // ids 0,1 → q1; 2,3 → q2; ... em hits on ids 0 and 3 only
        let pairs: Vec<(String, String)> = (0..10)
            .map(|i| {
                let r = format!("t{i}");
                let h = if i == 0 || i == 3 { r.clone() } else { "x".to_string() };
                (r, h)
            })
            .collect();
        let scores = pairs
            .iter()
            .enumerate()
            .map(|(i, (r, h))| score_pair(i as u32, r, h))
            .collect();
        let report = crate::metrics::aggregate_report(scores, "t").unwrap();
        let buckets = bucket_by_rank_quintile(&report, &vocab).unwrap();
        assert_eq!(buckets.len(), 5);
        assert!(buckets.iter().all(|b| b.count == 2));
        assert_eq!(buckets[0].em, 50.0); // id 0 hit, id 1 miss
        assert_eq!(buckets[1].em, 50.0); // id 3 hit, id 2 miss
        assert_eq!(buckets[2].em, 0.0);
        // weighted mean of bucket means = global mean
        let weighted: f64 = buckets.iter().map(|b| b.em * b.count as f64).sum::<f64>() / 10.0;
        assert!((weighted - report.aggregates.em).abs() < 1e-9);
        let weighted: f64 = buckets.iter().map(|b| b.chrf * b.count as f64).sum::<f64>() / 10.0;
        assert!((weighted - report.aggregates.chrf).abs() < 1e-9);
    }

    #[test]
    fn uniform_scores_give_equal_bucket_means() {
        let tokens: Vec<String> = (0..20).map(|i| format!("w{i:02}")).collect();
        let vocab = Vocabulary::new(tokens.clone(), '_').unwrap();
        let pairs: Vec<(&str, &str)> =
            tokens.iter().map(|t| (t.as_str(), t.as_str())).collect();
        let report = report_from(&pairs);
        let buckets = bucket_by_rank_quintile(&report, &vocab).unwrap();
        for b in buckets {
            assert_eq!(b.em, 100.0);
            assert_eq!(b.chrf, 100.0);
        }
    }

    #[test]
    fn tiny_vocab_is_rejected() {
        let vocab = Vocabulary::new(vec!["a".into(), "b".into()], '_').unwrap();
        let report = report_from(&[("a", "a")]);
        assert!(bucket_by_rank_quintile(&report, &vocab).is_err());
    }

    #[test]
    fn length_buckets_count_the_marker_and_group_eleven_plus() {
        let report = report_from(&[
            ("_break", "_break"),     // length 6
            ("spectacular!", "x"),    // length 12 → 11+
            ("a", "a"),               // length 1
            ("elevenchars", "y"),     // exactly 11 → 11+
        ]);
        let buckets = bucket_by_length(&report);
        assert_eq!(buckets.len(), 11);
        assert_eq!(buckets.iter().map(|b| b.count).sum::<usize>(), 4);
        assert_eq!(buckets[5].bucket, "6");
        assert_eq!(buckets[5].count, 1);
        assert_eq!(buckets[0].count, 1);
        assert_eq!(buckets[10].bucket, "11+");
        assert_eq!(buckets[10].count, 2);

        // empty report → all empty buckets
        let empty = MetricReport {
            group: "e".into(),
            scores: vec![],
            aggregates: crate::metrics::Aggregates { em: 0.0, chrf: 0.0, lev_ratio: 0.0 },
        };
        assert!(bucket_by_length(&empty).iter().all(|b| b.count == 0));
    }

    #[test]
    fn error_table_saturates_samples_and_repeats_deterministically() {
        let mut pairs: Vec<(String, String)> = (0..50)
            .map(|i| (format!("ref{i:02}"), format!("hyp{i:02}")))
            .collect();
        pairs.push(("same".into(), "same".into()));
        let borrowed: Vec<(&str, &str)> =
            pairs.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
        let report = report_from(&borrowed);

        let all = error_table(&report, 100, 0);
        assert_eq!(all.len(), 50); // saturation: fewer errors than requested
        assert!(all.iter().all(|s| s.em == 0));

        let n20 = error_table(&report, 20, 7);
        assert_eq!(n20.len(), 20);
        assert!(n20.iter().all(|s| s.reference != s.hypothesis));
        assert_eq!(error_table(&report, 20, 7), n20);
        assert_ne!(error_table(&report, 20, 8), n20);

        let txt = render_error_table(&n20);
        assert!(txt.lines().count() == 21);
        assert!(txt.starts_with("token"));
    }

    #[test]
    fn csv_writers_emit_expected_headers() {
        let dir = tempfile::tempdir().unwrap();
        let report = report_from(&[("abc", "abd"), ("xy", "xy")]);
        let b = dir.path().join("buckets.csv");
        write_bucket_csv(&b, &bucket_by_length(&report)).unwrap();
        assert!(std::fs::read_to_string(&b).unwrap().starts_with("bucket,count,em,chrf\n"));
        let e = dir.path().join("errors.csv");
        write_error_csv(&e, &error_table(&report, 10, 0)).unwrap();
        let text = std::fs::read_to_string(&e).unwrap();
        assert!(text.starts_with("token,prediction\n"));
        assert!(text.contains("abc,abd"));
    }
}
