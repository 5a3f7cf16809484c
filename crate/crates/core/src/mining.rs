//! Hard-negative mining: false-negative filtering and negative selection.
//!
//! A mining run retrieves the top `k_candidates` passages per query (positives
//! excluded), drops candidates the method flags as potential false negatives,
//! then picks `num_negatives` of the survivors. The positive-aware methods
//! derive the maximum allowed negative score from the positive's own score:
//!
//! * `TopKMarginPos`: `threshold = pos_score - absolute_margin`
//! * `TopKPercPos`:   `threshold = pos_score * percentage_margin`
//!
//! A candidate survives when `score <= threshold`.

use std::collections::{HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::Summary;
use crate::error::{Error, Result};
use crate::store::{Corpus, EmbeddingMatrix, MinedExample, MinedNegative, ScoredPassage, TrainPair};
use crate::topk::{self, Candidate, CandidateList, Metric, TopkOptions};

pub const DEFAULT_NUM_NEGATIVES: usize = 4;
pub const DEFAULT_PERCENTAGE_MARGIN: f64 = 0.95;
pub const DEFAULT_ABSOLUTE_MARGIN: f64 = 0.05;
pub const DEFAULT_MAX_SCORE: f64 = 0.7;
pub const DEFAULT_N_SHIFT: usize = 10;
pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_POOL_DEPTH: usize = 16;

/// How candidates that may be unlabeled positives are removed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum MiningMethod {
    /// Keep every candidate.
    #[serde(rename = "naive")]
    NaiveTopK,
    /// Drop the first `n_shift` candidates.
    #[serde(rename = "shifted")]
    TopKShifted { n_shift: usize },
    /// Keep candidates scoring at most `max_score`.
    #[serde(rename = "abs")]
    TopKAbs { max_score: f64 },
    /// Keep candidates scoring at most `pos_score - absolute_margin`.
    #[serde(rename = "margin_pos")]
    TopKMarginPos { absolute_margin: f64 },
    /// Keep candidates scoring at most `pos_score * percentage_margin`.
    #[serde(rename = "perc_pos")]
    TopKPercPos { percentage_margin: f64 },
}

impl Default for MiningMethod {
    fn default() -> Self {
        MiningMethod::TopKPercPos {
            percentage_margin: DEFAULT_PERCENTAGE_MARGIN,
        }
    }
}

impl MiningMethod {
    /// Short lowercase name used in file names and reports.
    pub fn family(&self) -> &'static str {
        match self {
            MiningMethod::NaiveTopK => "naive",
            MiningMethod::TopKShifted { .. } => "shifted",
            MiningMethod::TopKAbs { .. } => "abs",
            MiningMethod::TopKMarginPos { .. } => "marginpos",
            MiningMethod::TopKPercPos { .. } => "percpos",
        }
    }

    /// Maximum allowed negative score, or `None` for rank-based methods.
    pub fn threshold(&self, pos_score: f64) -> Option<f64> {
        match *self {
            MiningMethod::NaiveTopK | MiningMethod::TopKShifted { .. } => None,
            MiningMethod::TopKAbs { max_score } => Some(max_score),
            MiningMethod::TopKMarginPos { absolute_margin } => Some(pos_score - absolute_margin),
            MiningMethod::TopKPercPos { percentage_margin } => Some(pos_score * percentage_margin),
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        match *self {
            MiningMethod::NaiveTopK | MiningMethod::TopKShifted { .. } => Ok(()),
            MiningMethod::TopKAbs { max_score } if max_score.is_nan() => bad("max_score is NaN".into()),
            MiningMethod::TopKAbs { .. } => Ok(()),
            MiningMethod::TopKMarginPos { absolute_margin } if !absolute_margin.is_finite() => {
                bad(format!("absolute_margin must be finite, got {absolute_margin}"))
            }
            MiningMethod::TopKMarginPos { .. } => Ok(()),
            MiningMethod::TopKPercPos { percentage_margin } if !(percentage_margin >= 0.0 && percentage_margin.is_finite()) => bad(format!(
                "percentage_margin must be a finite fraction >= 0 (0.95, not 95), got {percentage_margin}"
            )),
            MiningMethod::TopKPercPos { percentage_margin } => {
                if percentage_margin > 2.0 {
                    log::warn!("percentage_margin {percentage_margin} looks like a percent; it is a fraction (0.95 = 95%)");
                }
                Ok(())
            }
        }
    }
}

/// How the final negatives are picked from the eligible candidates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Sampling {
    /// The first `num_negatives` eligible candidates.
    #[default]
    TakeTop,
    /// Softmax-weighted draws without replacement from the first `pool_k`.
    #[serde(rename = "sampled_topk")]
    SampledTopK { pool_k: usize },
    /// The first eligible candidate, plus softmax draws from ranks `2..=pool_k`.
    #[serde(rename = "top1_sampled")]
    Top1PlusSampled { pool_k: usize },
}

/// Which score represents a query with several positives.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MultiPositiveRule {
    #[default]
    Min,
    Max,
    First,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiningConfig {
    pub method: MiningMethod,
    pub num_negatives: usize,
    pub sampling: Sampling,
    /// Softmax temperature applied to raw scores when sampling.
    pub sampling_temperature: f64,
    pub seed: u64,
    pub multi_positive_rule: MultiPositiveRule,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            method: MiningMethod::default(),
            num_negatives: DEFAULT_NUM_NEGATIVES,
            sampling: Sampling::TakeTop,
            sampling_temperature: 1.0,
            seed: DEFAULT_SEED,
            multi_positive_rule: MultiPositiveRule::Min,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        self.method.validate()?;
        if self.num_negatives == 0 {
            return Err(Error::Config("num_negatives must be at least 1".into()));
        }
        if !(self.sampling_temperature > 0.0 && self.sampling_temperature.is_finite()) {
            return Err(Error::Config(format!(
                "sampling_temperature must be positive, got {}",
                self.sampling_temperature
            )));
        }
        match self.sampling {
            Sampling::SampledTopK { pool_k } | Sampling::Top1PlusSampled { pool_k } if pool_k < self.num_negatives => {
                Err(Error::Config(format!(
                    "pool_k ({pool_k}) must be >= num_negatives ({})",
                    self.num_negatives
                )))
            }
            _ => Ok(()),
        }
    }
}

/// Settings of a mining run that are not part of the method itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunOptions {
    pub k_candidates: usize,
    pub metric: Metric,
    pub chunk_rows: usize,
    /// Recorded on every negative.
    pub teacher: String,
    /// Unselected eligible candidates kept per example for later ensembling.
    pub pool_depth: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            k_candidates: topk::DEFAULT_K_CANDIDATES,
            metric: Metric::Cosine,
            chunk_rows: topk::DEFAULT_CHUNK_ROWS,
            teacher: "teacher".into(),
            pool_depth: DEFAULT_POOL_DEPTH,
        }
    }
}

/// Candidates that survived filtering.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    /// Survivors in their original descending order.
    pub eligible: CandidateList,
    pub removed_as_false_negative: usize,
    pub threshold_used: Option<f64>,
}

/// A chosen negative and its 1-based rank among the eligible candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectedNegative {
    pub passage_id: String,
    pub score: f32,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub negatives: Vec<SelectedNegative>,
    pub under_filled: bool,
}

pub fn positive_score(pair: &TrainPair, scores: &HashMap<String, f64>, rule: MultiPositiveRule) -> Result<f64> {
    let mut values = Vec::with_capacity(pair.positive_ids.len());
    for id in &pair.positive_ids {
        let s = scores.get(id).ok_or_else(|| Error::MissingScore { id: id.clone() })?;
        values.push(*s);
    }
    reduce_positive_scores(&values, rule)
        .ok_or_else(|| Error::Config(format!("query {:?} has no positives", pair.query_id)))
}

fn reduce_positive_scores(values: &[f64], rule: MultiPositiveRule) -> Option<f64> {
    match rule {
        MultiPositiveRule::First => values.first().copied(),
        MultiPositiveRule::Min => values.iter().copied().reduce(f64::min),
        MultiPositiveRule::Max => values.iter().copied().reduce(f64::max),
    }
}

pub fn filter_candidates(candidates: &CandidateList, pos_score: f64, method: &MiningMethod) -> FilterOutcome {
    let threshold_used = method.threshold(pos_score);
    let entries: Vec<Candidate> = match (*method, threshold_used) {
        (MiningMethod::TopKShifted { n_shift }, _) => candidates.entries.iter().skip(n_shift).cloned().collect(),
        (_, Some(t)) => candidates
            .entries
            .iter()
            .filter(|c| f64::from(c.score) <= t)
            .cloned()
            .collect(),
        (_, None) => candidates.entries.clone(),
    };
    FilterOutcome {
        removed_as_false_negative: candidates.entries.len() - entries.len(),
        eligible: CandidateList {
            query_id: candidates.query_id.clone(),
            entries,
            short: candidates.short,
        },
        threshold_used,
    }
}

/// Draws `count` distinct indices from `scores` with probability proportional to
/// `softmax(score / temperature)`, renormalizing after each draw.
pub fn softmax_sample<R: Rng + ?Sized>(scores: &[f64], temperature: f64, count: usize, rng: &mut R) -> Vec<usize> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = scores.iter().map(|s| ((s - max) / temperature).exp()).collect();
    let mut picked = Vec::with_capacity(count.min(scores.len()));
    for _ in 0..count.min(scores.len()) {
        let total: f64 = weights.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut choice = None;
        for (i, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            choice = Some(i);
            if target < w {
                break;
            }
            target -= w;
        }
        // rounding can leave `target` past the last weight; `choice` is then the last live index
        let i = choice.expect("fewer live weights than draws");
        weights[i] = 0.0;
        picked.push(i);
    }
    picked
}

pub fn select_negatives<R: Rng + ?Sized>(outcome: &FilterOutcome, config: &MiningConfig, rng: &mut R) -> Selection {
    let eligible = &outcome.eligible.entries;
    let n = config.num_negatives;
    let sample_from = |offset: usize, pool_k: usize, count: usize, rng: &mut R| -> Vec<usize> {
        let end = pool_k.min(eligible.len());
        if offset >= end {
            return Vec::new();
        }
        let scores: Vec<f64> = eligible[offset..end].iter().map(|c| f64::from(c.score)).collect();
        softmax_sample(&scores, config.sampling_temperature, count, rng)
            .into_iter()
            .map(|i| i + offset)
            .collect()
    };
    let mut indices: Vec<usize> = match config.sampling {
        Sampling::TakeTop => (0..n.min(eligible.len())).collect(),
        Sampling::SampledTopK { pool_k } => sample_from(0, pool_k, n, rng),
        Sampling::Top1PlusSampled { pool_k } => {
            if eligible.is_empty() {
                Vec::new()
            } else {
                let mut v = vec![0];
                v.extend(sample_from(1, pool_k, n - 1, rng));
                v
            }
        }
    };
    indices.sort_unstable();
    Selection {
        under_filled: indices.len() < n,
        negatives: indices
            .into_iter()
            .map(|i| SelectedNegative {
                passage_id: eligible[i].passage_id.clone(),
                score: eligible[i].score,
                rank: i + 1,
            })
            .collect(),
    }
}

/// Random stream for one example; depends only on the seed and the example's position.
pub fn example_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Top-k candidates and positive scores for a set of pairs, reusable across configs.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateCache {
    pub lists: Vec<CandidateList>,
    /// Scores of each pair's positives, in `positive_ids` order.
    pub positive_scores: Vec<Vec<f64>>,
}

/// Aggregates over one mining run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningStats {
    pub teacher: String,
    pub examples: usize,
    pub negatives: usize,
    pub removed_as_false_negative: usize,
    pub under_filled: usize,
    /// Queries with fewer than `k_candidates` non-positive passages in the corpus.
    pub short_candidate_lists: usize,
    pub positive_scores: Summary,
    pub negative_scores: Summary,
    /// `pos_score - neg_score` for every selected negative.
    pub differences: Summary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiningOutput {
    pub examples: Vec<MinedExample>,
    pub stats: MiningStats,
}

fn query_submatrix(pairs: &[TrainPair], queries: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    let mut data = Vec::with_capacity(pairs.len() * queries.dim());
    for pair in pairs {
        let row = queries
            .row_by_id(&pair.query_id)
            .ok_or_else(|| Error::Misaligned(format!("query {:?} has no row in the query matrix", pair.query_id)))?;
        data.extend_from_slice(row);
    }
    let ids = pairs.iter().map(|p| p.query_id.clone()).collect();
    EmbeddingMatrix::new(queries.dim(), ids, data, queries.is_normalized())
}

/// Runs the top-k search once and scores every positive.
pub fn prepare_candidates(
    pairs: &[TrainPair],
    queries: &EmbeddingMatrix,
    corpus_matrix: &EmbeddingMatrix,
    opts: &RunOptions,
) -> Result<CandidateCache> {
    if opts.k_candidates == 0 {
        return Err(Error::Config("k_candidates must be at least 1".into()));
    }
    let query_rows = query_submatrix(pairs, queries)?;
    let mut exclusions: HashMap<String, HashSet<String>> = HashMap::with_capacity(pairs.len());
    let mut positive_scores = Vec::with_capacity(pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        let q = query_rows.row(i);
        let mut scores = Vec::with_capacity(pair.positive_ids.len());
        for pid in &pair.positive_ids {
            let p = corpus_matrix.row_by_id(pid).ok_or_else(|| {
                Error::Misaligned(format!("positive {pid:?} of query {:?} has no row in the corpus matrix", pair.query_id))
            })?;
            scores.push(f64::from(topk::score(q, p, opts.metric)?));
        }
        positive_scores.push(scores);
        exclusions.insert(pair.query_id.clone(), pair.positive_ids.iter().cloned().collect());
    }
    let lists = topk::topk(
        &query_rows,
        corpus_matrix,
        opts.k_candidates,
        &exclusions,
        TopkOptions {
            metric: opts.metric,
            chunk_rows: opts.chunk_rows,
        },
    )?;
    Ok(CandidateCache { lists, positive_scores })
}

/// Filters and selects negatives for every pair from precomputed candidates.
pub fn mine_candidates(
    pairs: &[TrainPair],
    cache: &CandidateCache,
    corpus: &Corpus,
    config: &MiningConfig,
    opts: &RunOptions,
) -> Result<MiningOutput> {
    config.validate()?;
    if cache.lists.len() != pairs.len() || cache.positive_scores.len() != pairs.len() {
        return Err(Error::Misaligned(format!(
            "{} pairs but {} candidate lists",
            pairs.len(),
            cache.lists.len()
        )));
    }
    let per_pair: Vec<(MinedExample, usize)> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, pair)| mine_one(i, pair, &cache.lists[i], &cache.positive_scores[i], corpus, config, opts))
        .collect::<Result<_>>()?;

    let removed = per_pair.iter().map(|(_, r)| r).sum();
    let examples: Vec<MinedExample> = per_pair.into_iter().map(|(e, _)| e).collect();
    let stats = compute_stats(&examples, removed, cache, opts);
    Ok(MiningOutput { examples, stats })
}

fn mine_one(
    index: usize,
    pair: &TrainPair,
    candidates: &CandidateList,
    positive_scores: &[f64],
    corpus: &Corpus,
    config: &MiningConfig,
    opts: &RunOptions,
) -> Result<(MinedExample, usize)> {
    if candidates.query_id != pair.query_id {
        return Err(Error::Misaligned(format!(
            "candidate list for {:?} found at position of query {:?}",
            candidates.query_id, pair.query_id
        )));
    }
    let pos_score = reduce_positive_scores(positive_scores, config.multi_positive_rule)
        .ok_or_else(|| Error::Config(format!("query {:?} has no positives", pair.query_id)))?;
    let outcome = filter_candidates(candidates, pos_score, &config.method);
    let mut rng = example_rng(config.seed, index);
    let selection = select_negatives(&outcome, config, &mut rng);

    let text = |id: &str| -> Result<String> {
        corpus
            .text(id)
            .map(str::to_owned)
            .ok_or_else(|| Error::Misaligned(format!("passage {id:?} is in the corpus matrix but not the corpus")))
    };
    let mined = |passage_id: &str, score: f32, rank: usize| -> Result<MinedNegative> {
        Ok(MinedNegative {
            passage_id: passage_id.to_owned(),
            text: text(passage_id)?,
            score: f64::from(score),
            teacher: opts.teacher.clone(),
            rank,
        })
    };

    let negatives = selection
        .negatives
        .iter()
        .map(|n| mined(&n.passage_id, n.score, n.rank))
        .collect::<Result<Vec<_>>>()?;
    let chosen: HashSet<usize> = selection.negatives.iter().map(|n| n.rank).collect();
    let pool = outcome
        .eligible
        .entries
        .iter()
        .enumerate()
        .filter(|(i, _)| !chosen.contains(&(i + 1)))
        .take(opts.pool_depth)
        .map(|(i, c)| mined(&c.passage_id, c.score, i + 1))
        .collect::<Result<Vec<_>>>()?;
    let positives = pair
        .positive_ids
        .iter()
        .zip(positive_scores)
        .map(|(id, &score)| {
            Ok(ScoredPassage {
                passage_id: id.clone(),
                text: text(id)?,
                score,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok((
        MinedExample {
            query_id: pair.query_id.clone(),
            query_text: pair.query_text.clone(),
            positives,
            negatives,
            pool,
            pos_score,
            threshold: outcome.threshold_used,
            under_filled: selection.under_filled,
        },
        outcome.removed_as_false_negative,
    ))
}

fn compute_stats(examples: &[MinedExample], removed: usize, cache: &CandidateCache, opts: &RunOptions) -> MiningStats {
    let pos: Vec<f64> = examples.iter().map(|e| e.pos_score).collect();
    let neg: Vec<f64> = examples.iter().flat_map(|e| e.negatives.iter().map(|n| n.score)).collect();
    let diff: Vec<f64> = examples
        .iter()
        .flat_map(|e| e.negatives.iter().map(move |n| e.pos_score - n.score))
        .collect();
    MiningStats {
        teacher: opts.teacher.clone(),
        examples: examples.len(),
        negatives: neg.len(),
        removed_as_false_negative: removed,
        under_filled: examples.iter().filter(|e| e.under_filled).count(),
        short_candidate_lists: cache.lists.iter().filter(|l| l.short).count(),
        positive_scores: Summary::of(&pos),
        negative_scores: Summary::of(&neg),
        differences: Summary::of(&diff),
    }
}

/// Full pipeline for one teacher: top-k search, filtering, selection.
pub fn mine_dataset(
    pairs: &[TrainPair],
    queries: &EmbeddingMatrix,
    corpus_matrix: &EmbeddingMatrix,
    corpus: &Corpus,
    config: &MiningConfig,
    opts: &RunOptions,
) -> Result<MiningOutput> {
    config.validate()?;
    let cache = prepare_candidates(pairs, queries, corpus_matrix, opts)?;
    mine_candidates(pairs, &cache, corpus, config, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn list(scores: &[f32]) -> CandidateList {
        CandidateList {
            query_id: "q".into(),
            entries: scores
                .iter()
                .enumerate()
                .map(|(i, &s)| Candidate {
                    passage_id: format!("p{i:02}"),
                    score: s,
                })
                .collect(),
            short: false,
        }
    }

    fn scores(l: &CandidateList) -> Vec<f32> {
        l.entries.iter().map(|c| c.score).collect()
    }

    fn pair(positives: &[&str]) -> TrainPair {
        TrainPair {
            query_id: "q".into(),
            query_text: "q".into(),
            positive_ids: positives.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn positive_score_rules() {
        let single = HashMap::from([("a".to_string(), 0.9)]);
        for rule in [MultiPositiveRule::Min, MultiPositiveRule::Max, MultiPositiveRule::First] {
            assert_eq!(positive_score(&pair(&["a"]), &single, rule).unwrap(), 0.9);
        }
        let two = HashMap::from([("a".to_string(), 0.9), ("b".to_string(), 0.7)]);
        let p = pair(&["a", "b"]);
        assert_eq!(positive_score(&p, &two, MultiPositiveRule::Min).unwrap(), 0.7);
        assert_eq!(positive_score(&p, &two, MultiPositiveRule::Max).unwrap(), 0.9);
        assert_eq!(positive_score(&p, &two, MultiPositiveRule::First).unwrap(), 0.9);
        assert!(matches!(
            positive_score(&pair(&["a", "zz"]), &two, MultiPositiveRule::Min),
            Err(Error::MissingScore { ref id }) if id == "zz"
        ));
    }

    #[test]
    fn perc_pos_example() {
        let c = list(&[0.79, 0.77, 0.75, 0.70]);
        let out = filter_candidates(&c, 0.8, &MiningMethod::TopKPercPos { percentage_margin: 0.95 });
        assert!((out.threshold_used.unwrap() - 0.76).abs() < 1e-12);
        assert_eq!(scores(&out.eligible), [0.75, 0.70]);
        assert_eq!(out.removed_as_false_negative, 2);
    }

    #[test]
    fn margin_pos_keeps_boundary() {
        let c = list(&[0.79, 0.77, 0.75, 0.70]);
        let out = filter_candidates(&c, 0.8, &MiningMethod::TopKMarginPos { absolute_margin: 0.05 });
        assert!((out.threshold_used.unwrap() - 0.75).abs() < 1e-12);
        assert_eq!(scores(&out.eligible), [0.75, 0.70]);
    }

    #[test]
    fn shifted_drops_leading_ranks() {
        let s: Vec<f32> = (0..15).map(|i| 1.0 - i as f32 * 0.01).collect();
        let c = list(&s);
        let out = filter_candidates(&c, 0.5, &MiningMethod::TopKShifted { n_shift: 10 });
        let ids: Vec<_> = out.eligible.entries.iter().map(|e| e.passage_id.as_str()).collect();
        assert_eq!(ids, ["p10", "p11", "p12", "p13", "p14"]);
        assert_eq!(out.removed_as_false_negative, 10);
        assert_eq!(out.threshold_used, None);
    }

    #[test]
    fn abs_threshold() {
        let out = filter_candidates(&list(&[0.72, 0.70, 0.65]), 0.99, &MiningMethod::TopKAbs { max_score: 0.7 });
        assert_eq!(scores(&out.eligible), [0.70, 0.65]);
        assert_eq!(out.threshold_used, Some(0.7));
    }

    #[test]
    fn naive_keeps_everything() {
        let c = list(&[0.99, 0.5]);
        let out = filter_candidates(&c, 0.1, &MiningMethod::NaiveTopK);
        assert_eq!(out.eligible, c);
        assert_eq!(out.removed_as_false_negative, 0);
    }

    fn outcome(s: &[f32]) -> FilterOutcome {
        FilterOutcome {
            eligible: list(s),
            removed_as_false_negative: 0,
            threshold_used: None,
        }
    }

    #[test]
    fn take_top_four_of_ten() {
        let s: Vec<f32> = (0..10).map(|i| 1.0 - i as f32 * 0.05).collect();
        let sel = select_negatives(&outcome(&s), &MiningConfig::default(), &mut example_rng(1, 0));
        let ranks: Vec<_> = sel.negatives.iter().map(|n| n.rank).collect();
        assert_eq!(ranks, [1, 2, 3, 4]);
        assert!(!sel.under_filled);
    }

    #[test]
    fn short_eligible_is_under_filled() {
        for sampling in [
            Sampling::TakeTop,
            Sampling::SampledTopK { pool_k: 10 },
            Sampling::Top1PlusSampled { pool_k: 10 },
        ] {
            let cfg = MiningConfig {
                sampling,
                ..Default::default()
            };
            let sel = select_negatives(&outcome(&[0.5, 0.4]), &cfg, &mut example_rng(3, 0));
            assert_eq!(sel.negatives.len(), 2);
            assert!(sel.under_filled);
            let sel = select_negatives(&outcome(&[]), &cfg, &mut example_rng(3, 0));
            assert!(sel.negatives.is_empty() && sel.under_filled);
        }
    }

    #[test]
    fn top1_plus_sampled_always_has_rank_one() {
        let s: Vec<f32> = (0..20).map(|i| 0.9 - i as f32 * 0.01).collect();
        let cfg = MiningConfig {
            sampling: Sampling::Top1PlusSampled { pool_k: 10 },
            ..Default::default()
        };
        for seed in 0..200 {
            let sel = select_negatives(&outcome(&s), &cfg, &mut example_rng(seed, 0));
            let ranks: Vec<_> = sel.negatives.iter().map(|n| n.rank).collect();
            assert_eq!(ranks.len(), 4);
            assert_eq!(ranks[0], 1);
            assert!(ranks.windows(2).all(|w| w[0] < w[1]));
            assert!(ranks.iter().all(|&r| r <= 10));
        }
    }

    #[test]
    fn uniform_when_scores_equal() {
        // 100k single draws from 10 equal scores: each count ~ Binomial(100k, 0.1)
        let draws = 100_000;
        let cfg = MiningConfig {
            num_negatives: 1,
            sampling: Sampling::SampledTopK { pool_k: 10 },
            ..Default::default()
        };
        let o = outcome(&[0.5; 10]);
        let mut rng = example_rng(7, 0);
        let mut counts = [0usize; 10];
        for _ in 0..draws {
            let sel = select_negatives(&o, &cfg, &mut rng);
            counts[sel.negatives[0].rank - 1] += 1;
        }
        let expected = draws as f64 * 0.1;
        let sigma = (draws as f64 * 0.1 * 0.9).sqrt();
        for c in counts {
            assert!((c as f64 - expected).abs() <= 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn sampling_is_deterministic_given_seed() {
        let s: Vec<f32> = (0..30).map(|i| 0.9 - i as f32 * 0.02).collect();
        let cfg = MiningConfig {
            sampling: Sampling::SampledTopK { pool_k: 30 },
            ..Default::default()
        };
        let a = select_negatives(&outcome(&s), &cfg, &mut example_rng(11, 5));
        let b = select_negatives(&outcome(&s), &cfg, &mut example_rng(11, 5));
        assert_eq!(a, b);
    }

    #[test]
    fn config_validation() {
        let mut cfg = MiningConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.sampling = Sampling::SampledTopK { pool_k: 3 };
        assert!(cfg.validate().is_err());
        cfg.sampling = Sampling::TakeTop;
        cfg.num_negatives = 0;
        assert!(cfg.validate().is_err());
        cfg.num_negatives = 4;
        cfg.sampling_temperature = 0.0;
        assert!(cfg.validate().is_err());
        cfg.sampling_temperature = 1.0;
        cfg.method = MiningMethod::TopKPercPos { percentage_margin: -0.1 };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_json_shape() {
        let cfg: MiningConfig = serde_json::from_str(
            r#"{"method":{"type":"perc_pos","percentage_margin":0.9},"sampling":{"type":"top1_sampled","pool_k":10}}"#,
        )
        .unwrap();
        assert_eq!(cfg.method, MiningMethod::TopKPercPos { percentage_margin: 0.9 });
        assert_eq!(cfg.sampling, Sampling::Top1PlusSampled { pool_k: 10 });
        assert_eq!(cfg.num_negatives, 4);
        assert!(serde_json::from_str::<MiningConfig>(r#"{"bogus":1}"#).is_err());
    }
}
