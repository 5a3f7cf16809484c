//! Synthetic datasets with known false negatives.
//!
//! Each query gets one positive with a score in `[0.6, 0.9]`, a few planted
//! false negatives scoring 0.96 to 0.99 times the positive score, and hard
//! negatives scoring at most 0.9 times it. A shared pool of random
//! background passages fills the rest of the corpus. Scores are cosine
//! similarities built directly into the vectors, so they hold up to f32
//! rounding.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{save_corpus, save_matrix, save_pairs, Corpus, EmbeddingMatrix, Passage, TrainPair};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantedConfig {
    pub num_queries: usize,
    pub plants_per_query: usize,
    pub hard_per_query: usize,
    pub background: usize,
    pub dim: usize,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            num_queries: 200,
            plants_per_query: 3,
            hard_per_query: 12,
            background: 2000,
            dim: 128,
            seed: 7,
        }
    }
}

pub struct PlantedFixture {
    pub corpus: Corpus,
    pub pairs: Vec<TrainPair>,
    pub queries: EmbeddingMatrix,
    pub corpus_matrix: EmbeddingMatrix,
    /// Query id to its planted false negatives.
    pub planted: BTreeMap<String, Vec<String>>,
    /// Query id to its positive's cosine score.
    pub positive_scores: BTreeMap<String, f64>,
}

fn random_unit(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Unit vector whose cosine with the unit vector `q` is `score`.
pub fn vector_with_score(rng: &mut impl Rng, q: &[f64], score: f64) -> Vec<f64> {
    loop {
        let mut u = random_unit(rng, q.len());
        let proj: f64 = u.iter().zip(q).map(|(a, b)| a * b).sum();
        for (x, qi) in u.iter_mut().zip(q) {
            *x -= proj * qi;
        }
        let n = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-6 {
            continue;
        }
        let ortho = (1.0 - score * score).max(0.0).sqrt();
        return q.iter().zip(&u).map(|(qi, ui)| score * qi + ortho * ui / n).collect();
    }
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

pub fn planted_fixture(config: &PlantedConfig) -> Result<PlantedFixture> {
    if config.num_queries == 0 || config.dim < 2 {
        return Err(Error::Config("fixture needs at least one query and dim >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut passages = Vec::new();
    let mut rows: Vec<Vec<f32>> = Vec::new();
    let mut push = |passages: &mut Vec<Passage>, kind: &str, v: Vec<f64>| -> String {
        let id = format!("p{:06}", passages.len());
        passages.push(Passage {
            id: id.clone(),
            text: format!("{kind} passage {id}"),
        });
        rows.push(to_f32(&v));
        id
    };

    let mut query_rows = Vec::with_capacity(config.num_queries);
    let mut pairs = Vec::with_capacity(config.num_queries);
    let mut planted = BTreeMap::new();
    let mut positive_scores = BTreeMap::new();
    for i in 0..config.num_queries {
        let qid = format!("q{i:05}");
        let q = random_unit(&mut rng, config.dim);
        let pos = rng.random_range(0.6..=0.9);
        let pid = push(&mut passages, "positive", vector_with_score(&mut rng, &q, pos));
        let plants: Vec<String> = (0..config.plants_per_query)
            .map(|_| {
                let s = pos * rng.random_range(0.96..=0.99);
                push(&mut passages, "planted", vector_with_score(&mut rng, &q, s))
            })
            .collect();
        for _ in 0..config.hard_per_query {
            let s = pos * rng.random_range(0.5..=0.9);
            push(&mut passages, "hard", vector_with_score(&mut rng, &q, s));
        }
        pairs.push(TrainPair {
            query_id: qid.clone(),
            query_text: format!("query {qid}"),
            positive_ids: vec![pid],
        });
        planted.insert(qid.clone(), plants);
        positive_scores.insert(qid, pos);
        query_rows.push(to_f32(&q));
    }
    for _ in 0..config.background {
        let v = random_unit(&mut rng, config.dim);
        push(&mut passages, "background", v);
    }

    let query_ids = pairs.iter().map(|p| p.query_id.clone()).collect();
    let passage_ids = passages.iter().map(|p| p.id.clone()).collect();
    Ok(PlantedFixture {
        corpus: Corpus::new(passages)?,
        queries: EmbeddingMatrix::from_rows(query_ids, &query_rows)?,
        corpus_matrix: EmbeddingMatrix::from_rows(passage_ids, &rows)?,
        pairs,
        planted,
        positive_scores,
    })
}

impl PlantedFixture {
    /// Writes `corpus.jsonl`, `pairs.jsonl`, `queries.ngmx`, `corpus.ngmx`
    /// and `planted.json` into `dir`.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_corpus(&self.corpus, dir.join("corpus.jsonl"))?;
        save_pairs(&self.pairs, dir.join("pairs.jsonl"))?;
        save_matrix(&self.queries, dir.join("queries.ngmx"))?;
        save_matrix(&self.corpus_matrix, dir.join("corpus.ngmx"))?;
        let path = dir.join("planted.json");
        let body = serde_json::to_string_pretty(&self.planted)? + "\n";
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topk::{score, Metric};

    #[test]
    fn scores_are_planted_as_requested() {
        let f = planted_fixture(&PlantedConfig {
            num_queries: 5,
            background: 10,
            ..Default::default()
        })
        .unwrap();
        for pair in &f.pairs {
            let q = f.queries.row_by_id(&pair.query_id).unwrap();
            let pos = f.positive_scores[&pair.query_id];
            let p = f.corpus_matrix.row_by_id(&pair.positive_ids[0]).unwrap();
            assert!((f64::from(score(q, p, Metric::Cosine).unwrap()) - pos).abs() < 1e-5);
            for id in &f.planted[&pair.query_id] {
                let s = f64::from(score(q, f.corpus_matrix.row_by_id(id).unwrap(), Metric::Cosine).unwrap());
                assert!(s > 0.955 * pos && s < 0.995 * pos, "{s} vs {pos}");
            }
        }
        assert_eq!(f.corpus.len(), 5 * (1 + 3 + 12) + 10);
    }
}
