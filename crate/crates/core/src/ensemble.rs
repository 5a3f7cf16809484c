//! Combining train sets mined by several teacher models.
//!
//! * Cross-sample: each example takes all of its negatives from one teacher,
//!   drawn uniformly per example.
//! * Intra-sample: each example takes the top-1 negative of every teacher.
//!   Without dedup, agreeing teachers produce repeated negatives, which are
//!   kept. With dedup, repeats are dropped and refilled round-robin from the
//!   teachers' next candidates, most accurate teacher first.

use std::collections::{BTreeSet, HashMap, HashSet};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mining::example_rng;
use crate::store::{MinedExample, MinedNegative};

const MAX_LISTED_IDS: usize = 20;

/// One teacher's mined train set.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherRun {
    pub teacher_name: String,
    /// 1 = most accurate.
    pub accuracy_rank: usize,
    pub examples: Vec<MinedExample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMethod {
    CrossSample,
    IntraSample,
}

/// Rows of examples, one per query (in the first run's order), one column per run.
pub fn align_runs(runs: &[TeacherRun]) -> Result<Vec<Vec<&MinedExample>>> {
    let Some(first) = runs.first() else {
        return Ok(Vec::new());
    };
    let mut indexes: Vec<HashMap<&str, &MinedExample>> = Vec::with_capacity(runs.len());
    for run in runs {
        let mut index = HashMap::with_capacity(run.examples.len());
        for ex in &run.examples {
            if index.insert(ex.query_id.as_str(), ex).is_some() {
                return Err(Error::Misaligned(format!(
                    "teacher {:?} has query {:?} more than once",
                    run.teacher_name, ex.query_id
                )));
            }
        }
        indexes.push(index);
    }
    let reference: HashSet<&str> = indexes[0].keys().copied().collect();
    for (run, index) in runs.iter().zip(&indexes).skip(1) {
        let other: HashSet<&str> = index.keys().copied().collect();
        if other != reference {
            let diff: BTreeSet<&str> = reference.symmetric_difference(&other).copied().collect();
            let listed: Vec<&str> = diff.iter().take(MAX_LISTED_IDS).copied().collect();
            let more = if diff.len() > MAX_LISTED_IDS {
                format!(" (+{} more)", diff.len() - MAX_LISTED_IDS)
            } else {
                String::new()
            };
            return Err(Error::Misaligned(format!(
                "teachers {:?} and {:?} cover different queries; symmetric difference: {}{more}",
                first.teacher_name,
                run.teacher_name,
                listed.join(", ")
            )));
        }
    }
    Ok(first
        .examples
        .iter()
        .map(|ex| indexes.iter().map(|idx| idx[ex.query_id.as_str()]).collect())
        .collect())
}

fn retag(neg: &MinedNegative, teacher: &str) -> MinedNegative {
    MinedNegative {
        teacher: teacher.to_string(),
        ..neg.clone()
    }
}

/// Picks one teacher per example, uniformly at random, and takes all its negatives.
pub fn cross_sample_ensemble(runs: &[TeacherRun], num_negatives: usize, seed: u64) -> Result<Vec<MinedExample>> {
    if runs.is_empty() {
        return Err(Error::Config("cross-sample ensembling needs at least one run".into()));
    }
    if num_negatives == 0 {
        return Err(Error::Config("num_negatives must be at least 1".into()));
    }
    let aligned = align_runs(runs)?;
    Ok(aligned
        .par_iter()
        .enumerate()
        .map(|(i, row)| {
            let t = example_rng(seed, i).random_range(0..runs.len());
            let name = &runs[t].teacher_name;
            let src = row[t];
            let take = num_negatives.min(src.negatives.len());
            MinedExample {
                negatives: src.negatives[..take].iter().map(|n| retag(n, name)).collect(),
                pool: src.pool.iter().map(|n| retag(n, name)).collect(),
                under_filled: take < num_negatives,
                ..src.clone()
            }
        })
        .collect())
}

/// Takes the top-1 negative from every teacher.
///
/// Requires one run per negative. Positives, `pos_score` and `threshold`
/// come from the most accurate teacher.
pub fn intra_sample_ensemble(runs: &[TeacherRun], num_negatives: usize, dedup: bool) -> Result<Vec<MinedExample>> {
    if runs.is_empty() {
        return Err(Error::Config("intra-sample ensembling needs at least one run".into()));
    }
    if runs.len() != num_negatives {
        return Err(Error::Config(format!(
            "intra-sample ensembling takes one negative per teacher: {} runs but num_negatives = {num_negatives}",
            runs.len()
        )));
    }
    let aligned = align_runs(runs)?;
    let mut by_accuracy: Vec<usize> = (0..runs.len()).collect();
    by_accuracy.sort_by_key(|&i| (runs[i].accuracy_rank, i));
    let best = by_accuracy[0];

    Ok(aligned
        .par_iter()
        .map(|row| {
            let mut negatives: Vec<MinedNegative> = row
                .iter()
                .zip(runs)
                .filter_map(|(ex, run)| ex.negatives.first().map(|n| retag(n, &run.teacher_name)))
                .collect();
            if dedup {
                let mut seen = HashSet::new();
                negatives.retain(|n| seen.insert(n.passage_id.clone()));
                refill(&mut negatives, &mut seen, row, runs, &by_accuracy, num_negatives);
            }
            let base = row[best];
            MinedExample {
                under_filled: negatives.len() < num_negatives,
                negatives,
                pool: Vec::new(),
                threshold: None,
                ..base.clone()
            }
        })
        .collect())
}

/// Round-robin over teachers (most accurate first), each adding its next
/// not-yet-included candidate, until `target` negatives or every pool is spent.
fn refill(
    negatives: &mut Vec<MinedNegative>,
    seen: &mut HashSet<String>,
    row: &[&MinedExample],
    runs: &[TeacherRun],
    by_accuracy: &[usize],
    target: usize,
) {
    let ranked: Vec<Vec<&MinedNegative>> = row.iter().map(|ex| ex.ranked_candidates()).collect();
    let mut cursors = vec![0usize; row.len()];
    while negatives.len() < target {
        let mut progressed = false;
        for &t in by_accuracy {
            if negatives.len() == target {
                break;
            }
            while let Some(cand) = ranked[t].get(cursors[t]) {
                cursors[t] += 1;
                if seen.insert(cand.passage_id.clone()) {
                    negatives.push(retag(cand, &runs[t].teacher_name));
                    progressed = true;
                    break;
                }
            }
        }
        if !progressed {
            break;
        }
    }
}
