use negminer::store::{
    load_dataset, load_matrix, save_dataset, save_matrix, EmbeddingMatrix, MatrixWriter, MinedExample, MinedNegative,
    ScoredPassage,
};
use proptest::prelude::*;

fn matrix() -> impl Strategy<Value = EmbeddingMatrix> {
    (1usize..16, 0usize..20).prop_flat_map(|(dim, rows)| {
        prop::collection::vec(prop::collection::vec(-1e3f32..1e3, dim), rows).prop_map(move |rows| {
            let ids = (0..rows.len()).map(|i| format!("id \"{i}\"\n")).collect();
            EmbeddingMatrix::from_rows(ids, &rows).unwrap_or_else(|_| EmbeddingMatrix::new(dim, vec![], vec![], false).unwrap())
        })
    })
}

fn example() -> impl Strategy<Value = MinedExample> {
    (
        "[a-z]{1,8}",
        ".{0,20}",
        prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..6),
        any::<bool>(),
        prop::option::of(-2.0f64..2.0),
    )
        .prop_map(|(qid, text, scores, under_filled, threshold)| {
            let neg = |i: usize, s: f64| MinedNegative {
                passage_id: format!("n{i}"),
                text: format!("negative {i}"),
                score: s,
                teacher: "t".into(),
                rank: i + 1,
            };
            MinedExample {
                query_id: qid,
                query_text: text,
                positives: vec![ScoredPassage {
                    passage_id: "pos".into(),
                    text: "positive".into(),
                    score: scores[0],
                }],
                negatives: scores[1..].iter().enumerate().map(|(i, &s)| neg(i, s)).collect(),
                pool: vec![neg(10, 0.125)],
                pos_score: scores[0],
                threshold,
                under_filled,
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn matrix_round_trip(m in matrix()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ngmx");
        if m.num_rows() > 0 {
            save_matrix(&m, &path).unwrap();
            prop_assert_eq!(load_matrix(&path).unwrap(), m);
        }
    }

    #[test]
    fn dataset_round_trip(examples in prop::collection::vec(example(), 0..8)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        save_dataset(&examples, &path).unwrap();
        prop_assert_eq!(load_dataset(&path).unwrap(), examples);
    }
}

#[test]
fn truncated_payload_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ngmx");
    let m = EmbeddingMatrix::from_rows(vec!["a".into(), "b".into()], &[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    save_matrix(&m, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..16 + 12]).unwrap();
    let err = load_matrix(&path).unwrap_err();
    assert!(err.to_string().contains("payload size mismatch"), "{err}");
}

#[test]
fn resume_drops_partial_row() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ngmx");
    let mut w = MatrixWriter::create(&path, 3, 2, false).unwrap();
    w.write_row(&[1.0, 2.0]).unwrap();
    w.flush().unwrap();
    drop(w);
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.extend_from_slice(&7.0f32.to_le_bytes());
    std::fs::write(&path, bytes).unwrap();

    let (mut w, header) = MatrixWriter::resume(&path).unwrap();
    assert_eq!((header.num_rows, header.dim), (3, 2));
    assert_eq!(w.rows_written(), 1);
    w.write_row(&[3.0, 4.0]).unwrap();
    w.write_row(&[5.0, 6.0]).unwrap();
    w.finish(&["a".into(), "b".into(), "c".into()]).unwrap();
    let m = load_matrix(&path).unwrap();
    assert_eq!(m.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
}
