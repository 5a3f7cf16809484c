use std::collections::{HashMap, HashSet};

use negminer::store::EmbeddingMatrix;
use negminer::topk::{score, topk, Candidate, Metric, TopkOptions};
use proptest::prelude::*;

/// Scores every pair, sorts by (score desc, id asc), truncates.
fn oracle(
    queries: &EmbeddingMatrix,
    corpus: &EmbeddingMatrix,
    k: usize,
    exclusions: &HashMap<String, HashSet<String>>,
    metric: Metric,
) -> Vec<Vec<Candidate>> {
    let none = HashSet::new();
    queries
        .ids()
        .iter()
        .enumerate()
        .map(|(qi, qid)| {
            let skip = exclusions.get(qid).unwrap_or(&none);
            let mut all: Vec<Candidate> = corpus
                .ids()
                .iter()
                .enumerate()
                .filter(|(_, pid)| !skip.contains(*pid))
                .map(|(pi, pid)| Candidate {
                    passage_id: pid.clone(),
                    score: score(queries.row(qi), corpus.row(pi), metric).unwrap(),
                })
                .collect();
            all.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.passage_id.cmp(&b.passage_id)));
            all.truncate(k);
            all
        })
        .collect()
}

/// Small integer coordinates so exact ties are common.
fn matrix(prefix: &'static str, rows: usize, dim: usize) -> impl Strategy<Value = EmbeddingMatrix> {
    prop::collection::vec(prop::collection::vec(-3i8..=3, dim), rows).prop_map(move |rows| {
        let ids: Vec<String> = (0..rows.len()).map(|i| format!("{prefix}{:03}", (i * 37) % 1000)).collect();
        let rows: Vec<Vec<f32>> = rows
            .into_iter()
            .map(|r| {
                let mut r: Vec<f32> = r.into_iter().map(f32::from).collect();
                if r.iter().all(|&v| v == 0.0) {
                    r[0] = 1.0;
                }
                r
            })
            .collect();
        EmbeddingMatrix::from_rows(ids, &rows).unwrap()
    })
}

fn instance() -> impl Strategy<Value = (EmbeddingMatrix, EmbeddingMatrix)> {
    (1usize..=64, 1usize..=8, 1usize..=120).prop_flat_map(|(dim, nq, np)| (matrix("q", nq, dim), matrix("p", np, dim)))
}

fn exclusions_for(q: &EmbeddingMatrix, p: &EmbeddingMatrix, mask: &[bool]) -> HashMap<String, HashSet<String>> {
    q.ids()
        .iter()
        .enumerate()
        .map(|(qi, qid)| {
            let set = p
                .ids()
                .iter()
                .enumerate()
                .filter(|(pi, _)| mask[(qi * 31 + pi * 7) % mask.len()])
                .map(|(_, id)| id.clone())
                .collect();
            (qid.clone(), set)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn matches_full_sort(
        (q, p) in instance(),
        k_pick in 0usize..3,
        dot in any::<bool>(),
        mask in prop::collection::vec(prop::bool::weighted(0.2), 1..16),
        use_exclusions in any::<bool>(),
    ) {
        let metric = if dot { Metric::Dot } else { Metric::Cosine };
        let k = [1, 5, p.num_rows()][k_pick];
        let excl = if use_exclusions { exclusions_for(&q, &p, &mask) } else { HashMap::new() };
        let got = topk(&q, &p, k, &excl, TopkOptions { metric, ..Default::default() }).unwrap();
        let want = oracle(&q, &p, k, &excl, metric);
        for (list, expected) in got.iter().zip(&want) {
            prop_assert_eq!(&list.entries, expected);
            prop_assert_eq!(list.short, expected.len() < k);
        }
    }

    #[test]
    fn chunking_does_not_change_results((q, p) in instance(), k in 1usize..20) {
        let run = |chunk_rows| {
            topk(&q, &p, k, &HashMap::new(), TopkOptions { metric: Metric::Cosine, chunk_rows }).unwrap()
        };
        let full = run(p.num_rows());
        prop_assert_eq!(&run(1), &full);
        prop_assert_eq!(&run(7), &full);
    }

    #[test]
    fn entries_are_sorted_and_exclusion_free(
        (q, p) in instance(),
        k in 1usize..40,
        mask in prop::collection::vec(prop::bool::weighted(0.3), 1..16),
    ) {
        let excl = exclusions_for(&q, &p, &mask);
        let lists = topk(&q, &p, k, &excl, TopkOptions::default()).unwrap();
        for list in &lists {
            prop_assert!(list.entries.len() <= k);
            for w in list.entries.windows(2) {
                let ordered = w[0].score > w[1].score
                    || (w[0].score == w[1].score && w[0].passage_id < w[1].passage_id);
                prop_assert!(ordered, "{:?}", w);
            }
            for c in &list.entries {
                prop_assert!(!excl[&list.query_id].contains(&c.passage_id));
            }
        }
    }
}

#[test]
fn thread_count_does_not_change_results() {
    let rows = |n: usize, salt: usize| -> Vec<Vec<f32>> {
        (0..n)
            .map(|i| (0..48).map(|j| (((i * 131 + j * 71 + salt) % 97) as f32 - 48.0) / 17.0).collect())
            .collect()
    };
    let q = EmbeddingMatrix::from_rows((0..70).map(|i| format!("q{i}")).collect(), &rows(70, 5)).unwrap();
    let p = EmbeddingMatrix::from_rows((0..900).map(|i| format!("p{i:04}")).collect(), &rows(900, 11)).unwrap();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| topk(&q, &p, 25, &HashMap::new(), TopkOptions::default()).unwrap())
    };
    let one = run(1);
    assert_eq!(one, run(4));
    assert_eq!(one, run(4));
}

#[test]
fn cosine_score_stays_in_range() {
    let a = [1e6f32, -1e6, 3.0];
    let b = [1e6f32, -1e6, 3.0];
    let s = score(&a, &b, Metric::Cosine).unwrap();
    assert!((-1.0 - 1e-6..=1.0 + 1e-6).contains(&s), "{s}");
}
