//! Mined train sets as JSONL.
//!
//! One object per example. `query`/`pos`/`neg` follow the usual contrastive
//! triplet layout so the file can be fed straight into a trainer; the `*_meta`
//! arrays line up index-for-index with `pos`/`neg` and record where each negative came from.
//! `pool` holds further eligible candidates (not selected) that ensembling can
//! draw replacements from.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPassage {
    pub passage_id: String,
    pub text: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinedNegative {
    pub passage_id: String,
    pub text: String,
    pub score: f64,
    pub teacher: String,
    /// 1-based rank in the teacher's post-filter candidate list.
    pub rank: usize,
}

/// One query with its positives and selected hard negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct MinedExample {
    pub query_id: String,
    pub query_text: String,
    pub positives: Vec<ScoredPassage>,
    pub negatives: Vec<MinedNegative>,
    /// Eligible candidates that were not selected, in rank order.
    pub pool: Vec<MinedNegative>,
    /// Positive score the filter threshold was derived from.
    pub pos_score: f64,
    /// Maximum score a negative was allowed to have, for threshold methods.
    pub threshold: Option<f64>,
    pub under_filled: bool,
}

impl MinedExample {
    pub fn negative_ids(&self) -> impl Iterator<Item = &str> {
        self.negatives.iter().map(|n| n.passage_id.as_str())
    }

    /// Negatives followed by the pool, ordered by rank.
    pub fn ranked_candidates(&self) -> Vec<&MinedNegative> {
        let mut all: Vec<&MinedNegative> = self.negatives.iter().chain(&self.pool).collect();
        all.sort_by_key(|n| n.rank);
        all
    }
}

#[derive(Serialize, Deserialize)]
struct PosMeta {
    id: String,
    score: f64,
}

#[derive(Serialize, Deserialize)]
struct NegMeta {
    id: String,
    score: f64,
    teacher: String,
    rank: usize,
}

#[derive(Serialize, Deserialize)]
struct PoolEntry {
    id: String,
    text: String,
    score: f64,
    teacher: String,
    rank: usize,
}

#[derive(Serialize, Deserialize)]
struct Record {
    query_id: String,
    query: String,
    pos: Vec<String>,
    neg: Vec<String>,
    pos_meta: Vec<PosMeta>,
    neg_meta: Vec<NegMeta>,
    pos_score: f64,
    #[serde(default)]
    threshold: Option<f64>,
    #[serde(default)]
    under_filled: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pool: Vec<PoolEntry>,
}

impl From<&MinedExample> for Record {
    fn from(ex: &MinedExample) -> Self {
        Record {
            query_id: ex.query_id.clone(),
            query: ex.query_text.clone(),
            pos: ex.positives.iter().map(|p| p.text.clone()).collect(),
            neg: ex.negatives.iter().map(|n| n.text.clone()).collect(),
            pos_meta: ex
                .positives
                .iter()
                .map(|p| PosMeta {
                    id: p.passage_id.clone(),
                    score: p.score,
                })
                .collect(),
            neg_meta: ex
                .negatives
                .iter()
                .map(|n| NegMeta {
                    id: n.passage_id.clone(),
                    score: n.score,
                    teacher: n.teacher.clone(),
                    rank: n.rank,
                })
                .collect(),
            pos_score: ex.pos_score,
            threshold: ex.threshold,
            under_filled: ex.under_filled,
            pool: ex
                .pool
                .iter()
                .map(|n| PoolEntry {
                    id: n.passage_id.clone(),
                    text: n.text.clone(),
                    score: n.score,
                    teacher: n.teacher.clone(),
                    rank: n.rank,
                })
                .collect(),
        }
    }
}

impl Record {
    fn into_example(self) -> std::result::Result<MinedExample, String> {
        if self.pos.len() != self.pos_meta.len() {
            return Err("pos and pos_meta differ in length".into());
        }
        if self.neg.len() != self.neg_meta.len() {
            return Err("neg and neg_meta differ in length".into());
        }
        let positives: Vec<ScoredPassage> = self
            .pos
            .into_iter()
            .zip(self.pos_meta)
            .map(|(text, m)| ScoredPassage {
                passage_id: m.id,
                text,
                score: m.score,
            })
            .collect();
        let negatives: Vec<MinedNegative> = self
            .neg
            .into_iter()
            .zip(self.neg_meta)
            .map(|(text, m)| MinedNegative {
                passage_id: m.id,
                text,
                score: m.score,
                teacher: m.teacher,
                rank: m.rank,
            })
            .collect();
        if let Some(n) = negatives
            .iter()
            .find(|n| positives.iter().any(|p| p.passage_id == n.passage_id))
        {
            return Err(format!("negative {:?} is also a positive", n.passage_id));
        }
        Ok(MinedExample {
            query_id: self.query_id,
            query_text: self.query,
            positives,
            negatives,
            pool: self
                .pool
                .into_iter()
                .map(|p| MinedNegative {
                    passage_id: p.id,
                    text: p.text,
                    score: p.score,
                    teacher: p.teacher,
                    rank: p.rank,
                })
                .collect(),
            pos_score: self.pos_score,
            threshold: self.threshold,
            under_filled: self.under_filled,
        })
    }
}

/// Writes examples as JSONL to any sink.
pub fn write_dataset<W: Write>(examples: &[MinedExample], mut out: W) -> std::io::Result<()> {
    for ex in examples {
        serde_json::to_writer(&mut out, &Record::from(ex))?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn save_dataset(examples: &[MinedExample], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_dataset(examples, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<MinedExample>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let parse = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let record: Record = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        out.push(record.into_example().map_err(parse)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example() -> MinedExample {
        MinedExample {
            query_id: "q1".into(),
            query_text: "who wrote hamlet".into(),
            positives: vec![ScoredPassage {
                passage_id: "p1".into(),
                text: "Shakespeare wrote it".into(),
                score: 0.800000011920929,
            }],
            negatives: vec![MinedNegative {
                passage_id: "p7".into(),
                text: "Marlowe".into(),
                score: 0.5,
                teacher: "t".into(),
                rank: 3,
            }],
            pool: vec![MinedNegative {
                passage_id: "p8".into(),
                text: "Kyd".into(),
                score: 0.4,
                teacher: "t".into(),
                rank: 4,
            }],
            pos_score: 0.800000011920929,
            threshold: Some(0.76),
            under_filled: true,
        }
    }

    #[test]
    fn jsonl_round_trip_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        save_dataset(&[example()], &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(v["query"], "who wrote hamlet");
        assert_eq!(v["pos"][0], "Shakespeare wrote it");
        assert_eq!(v["neg"][0], "Marlowe");
        assert_eq!(v["neg_meta"][0]["teacher"], "t");
        assert_eq!(v["neg_meta"][0]["rank"], 3);
        assert_eq!(load_dataset(&p).unwrap(), vec![example()]);
    }

    #[test]
    fn negative_equal_to_positive_rejected() {
        let mut ex = example();
        ex.negatives[0].passage_id = "p1".into();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        save_dataset(&[ex], &p).unwrap();
        assert!(matches!(load_dataset(&p), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn ranked_candidates_merge_pool() {
        let ex = example();
        let ids: Vec<_> = ex.ranked_candidates().iter().map(|n| n.passage_id.as_str()).collect();
        assert_eq!(ids, ["p7", "p8"]);
    }
}
