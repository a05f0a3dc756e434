use std::io::Write;

use spellprobe::store::{
    load_embeddings_text, load_frequency_file, random_embeddings, read_report,
    write_embeddings_text, write_report, MarkerTable, ReportRecord, Vocabulary,
};
use spellprobe::Error;

fn write_tmp(content: &str) -> tempfile::NamedTempFile {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    f.write_all(content.as_bytes()).unwrap();
    f
}

#[test]
fn parses_small_glove_file_in_order() {
    let f = write_tmp("the 0.1 0.2 0.3 0.4\nĠcat -1 2.5e-1 0 1e3\nof 1 2 3 4\n");
    let (vocab, emb) = load_embeddings_text(f.path(), None, &MarkerTable::default()).unwrap();
    assert_eq!(vocab.len(), 3);
    assert_eq!(emb.v(), 3);
    assert_eq!(emb.dim(), 4);
    assert_eq!(vocab.token(0), "the");
    assert_eq!(vocab.token(1), "_cat"); // marker rewritten
    assert_eq!(emb.values[[1, 1]], 0.25);
}

#[test]
fn max_rows_truncates() {
    let f = write_tmp("a 1 2\nb 3 4\nc 5 6\n");
    let (vocab, emb) = load_embeddings_text(f.path(), Some(2), &MarkerTable::empty()).unwrap();
    assert_eq!(vocab.len(), 2);
    assert_eq!(emb.v(), 2);
}

#[test]
fn dimension_mismatch_names_the_line() {
    let f = write_tmp("a 1 2 3\nb 1 2\n");
    match load_embeddings_text(f.path(), None, &MarkerTable::empty()) {
        Err(Error::Format { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected format error, got {other:?}"),
    }
}

#[test]
fn non_numeric_field_and_duplicate_token_are_rejected() {
    let f = write_tmp("a 1 x\n");
    assert!(matches!(
        load_embeddings_text(f.path(), None, &MarkerTable::empty()),
        Err(Error::Format { line: 1, .. })
    ));

    let f = write_tmp("a 1 2\na 3 4\n");
    assert!(matches!(
        load_embeddings_text(f.path(), None, &MarkerTable::empty()),
        Err(Error::Format { line: 2, .. })
    ));
}

#[test]
fn embeddings_text_roundtrip_is_bit_exact() {
    let emb = random_embeddings(7, 5, 42);
    let vocab = Vocabulary::new(
        (0..7).map(|i| format!("_tok{i}")).collect(),
        '_',
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.txt");
    write_embeddings_text(&path, &vocab, &emb).unwrap();
    let (vocab2, emb2) = load_embeddings_text(&path, None, &MarkerTable::empty()).unwrap();
    assert_eq!(vocab.tokens(), vocab2.tokens());
    assert_eq!(emb.values, emb2.values);
}

#[test]
fn frequency_file_annotates_and_reranks() {
    let vocab = Vocabulary::new(vec!["a".into(), "b".into(), "c".into()], '_').unwrap();
    let f = write_tmp("b\t50\na\t10\nzzz\t99\n");
    let (vocab, stats) = load_frequency_file(f.path(), &vocab).unwrap();
    assert_eq!(stats.unknown_tokens, 1);
    assert_eq!(vocab.frequency().unwrap(), &[10, 50, 0]);
    // b (50) → rank 1, a (10) → rank 2, c (0) → rank 3.
    assert_eq!((vocab.rank(0), vocab.rank(1), vocab.rank(2)), (2, 1, 3));

    // Empty file: all counts zero, ranks = vocabulary order.
    let vocab0 = Vocabulary::new(vec!["a".into(), "b".into()], '_').unwrap();
    let f = write_tmp("");
    let (vocab0, stats) = load_frequency_file(f.path(), &vocab0).unwrap();
    assert_eq!(stats.unknown_tokens, 0);
    assert_eq!(vocab0.frequency().unwrap(), &[0, 0]);
    assert_eq!((vocab0.rank(0), vocab0.rank(1)), (1, 2));
}

#[test]
fn report_roundtrip_with_awkward_tokens() {
    let records = vec![
        ReportRecord {
            token_id: 3,
            token: "_a,b\"c".into(),
            prediction: "_a,b".into(),
            em: 0,
            chrf: 41.23456789,
            lev_ratio: 66.666666666666667,
            length: 6,
            rank: 4,
            split_replica: 2,
        },
        ReportRecord {
            token_id: 9,
            token: "_356".into(),
            prediction: "_356".into(),
            em: 1,
            chrf: 100.0,
            lev_ratio: 100.0,
            length: 4,
            rank: 10,
            split_replica: 2,
        },
    ];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.csv");
    write_report(&path, &records).unwrap();
    let back = read_report(&path).unwrap();
    assert_eq!(records, back);

    // Empty record list → header-only file that reads back as empty.
    let empty = dir.path().join("empty.csv");
    write_report(&empty, &[]).unwrap();
    assert!(read_report(&empty).unwrap().is_empty());
    let text = std::fs::read_to_string(&empty).unwrap();
    assert!(text.starts_with("token_id,token,prediction,em,chrf,lev_ratio,length,rank,split_replica"));
}

#[test]
fn control_embedding_statistics_at_paper_scale() {
    // (v=50000, d=1024): sample mean ≈ 0 and row norms ≈ 1 ± 0.15.
    let emb = random_embeddings(50_000, 1024, 7);
    let mean = emb.values.sum() / (emb.v() * emb.dim()) as f64;
    assert!(mean.abs() < 1e-3, "sample mean {mean}");
    for row in emb.values.rows() {
        let norm = row.dot(&row).sqrt();
        assert!((norm - 1.0).abs() < 0.15, "row norm {norm}");
    }
    // Same seed → identical matrix; different seed → different.
    assert_eq!(emb.values, random_embeddings(50_000, 1024, 7).values);
    assert_ne!(
        random_embeddings(4, 4, 0).values,
        random_embeddings(4, 4, 1).values
    );
}
