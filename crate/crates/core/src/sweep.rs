//! Parameter sweeps over one mining method.
//!
//! The top-k search runs once; every grid point only re-filters and
//! re-selects from the cached candidate lists.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{infonce_loss, DEFAULT_LOSS_TEMPERATURE};
use crate::error::{Error, Result};
use crate::mining::{mine_candidates, prepare_candidates, CandidateCache, MiningConfig, MiningMethod, RunOptions, Sampling};
use crate::store::{save_dataset, Corpus, EmbeddingMatrix, MinedExample, TrainPair};

const SNAP: f64 = 1e9;

/// The parameter a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodFamily {
    /// `n_shift` of `TopKShifted`.
    Shifted,
    /// `max_score` of `TopKAbs`.
    Abs,
    /// `absolute_margin` of `TopKMarginPos`.
    MarginPos,
    /// `percentage_margin` of `TopKPercPos`.
    PercPos,
    /// `pool_k` of `SampledTopK`, on top of the shared method.
    SampledTopk,
    /// `pool_k` of `Top1PlusSampled`, on top of the shared method.
    Top1Sampled,
}

impl MethodFamily {
    pub fn name(self) -> &'static str {
        match self {
            MethodFamily::Shifted => "shifted",
            MethodFamily::Abs => "abs",
            MethodFamily::MarginPos => "marginpos",
            MethodFamily::PercPos => "percpos",
            MethodFamily::SampledTopk => "sampled_topk",
            MethodFamily::Top1Sampled => "top1_sampled",
        }
    }

    /// Applies `value` to `shared`.
    pub fn configure(self, shared: &MiningConfig, value: f64) -> Result<MiningConfig> {
        let count = || -> Result<usize> {
            if value < 0.0 || (value - value.round()).abs() > 1e-9 {
                return Err(Error::Config(format!("{} takes non-negative integers, got {value}", self.name())));
            }
            Ok(value.round() as usize)
        };
        let mut cfg = *shared;
        match self {
            MethodFamily::Shifted => cfg.method = MiningMethod::TopKShifted { n_shift: count()? },
            MethodFamily::Abs => cfg.method = MiningMethod::TopKAbs { max_score: value },
            MethodFamily::MarginPos => cfg.method = MiningMethod::TopKMarginPos { absolute_margin: value },
            MethodFamily::PercPos => cfg.method = MiningMethod::TopKPercPos { percentage_margin: value },
            MethodFamily::SampledTopk => cfg.sampling = Sampling::SampledTopK { pool_k: count()? },
            MethodFamily::Top1Sampled => cfg.sampling = Sampling::Top1PlusSampled { pool_k: count()? },
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Explicit values, or an inclusive arithmetic progression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Grid {
    Values(Vec<f64>),
    Range { start: f64, stop_inclusive: f64, step: f64 },
}

impl Grid {
    pub fn values(&self) -> Result<Vec<f64>> {
        let values = match *self {
            Grid::Values(ref v) => v.iter().map(|&x| snap(x)).collect(),
            Grid::Range {
                start,
                stop_inclusive,
                step,
            } => {
                if !(step > 0.0) || !start.is_finite() || !stop_inclusive.is_finite() {
                    return Err(Error::Config(format!(
                        "grid range needs finite bounds and a positive step (start {start}, stop {stop_inclusive}, step {step})"
                    )));
                }
                let span = (stop_inclusive - start) / step;
                if span < -1e-9 {
                    Vec::new()
                } else {
                    let n = (span + 1e-9).floor() as usize + 1;
                    (0..n).map(|i| snap(start + i as f64 * step)).collect()
                }
            }
        };
        if values.is_empty() {
            return Err(Error::Config("grid expands to no values".into()));
        }
        Ok(values)
    }
}

fn snap(v: f64) -> f64 {
    (v * SNAP).round() / SNAP
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub method_family: MethodFamily,
    pub grid: Grid,
    /// Fields not being swept.
    #[serde(default)]
    pub shared: MiningConfig,
    #[serde(default)]
    pub emit_datasets: bool,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default = "default_loss_temperature")]
    pub loss_temperature: f64,
}

fn default_loss_temperature() -> f64 {
    DEFAULT_LOSS_TEMPERATURE
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub value: f64,
    pub config: MiningConfig,
}

pub fn expand_grid(spec: &SweepSpec) -> Result<Vec<GridPoint>> {
    spec.grid
        .values()?
        .into_iter()
        .map(|value| {
            Ok(GridPoint {
                value,
                config: spec.method_family.configure(&spec.shared, value)?,
            })
        })
        .collect()
}

/// File name of the dataset for one grid point, e.g. `percpos-0.95.jsonl`.
pub fn dataset_file_name(family: MethodFamily, value: f64) -> String {
    format!("{}-{}.jsonl", family.name(), value)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub examples: usize,
    pub negatives: usize,
    pub removed_as_false_negative: usize,
    pub under_filled: usize,
    pub mean_negative_score: Option<f64>,
    pub min_negative_score: Option<f64>,
    pub mean_difference: Option<f64>,
    pub mean_loss: Option<f64>,
    pub dataset: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub method_family: MethodFamily,
    pub loss_temperature: f64,
    /// One row per grid point, in grid order.
    pub rows: Vec<SweepRow>,
}

impl SweepSummary {
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.error.is_some()).count()
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let mut out = String::from(
            "value,examples,negatives,removed_as_false_negative,under_filled,mean_negative_score,min_negative_score,mean_difference,mean_loss,error\n",
        );
        for r in &self.rows {
            let error = r
                .error
                .as_deref()
                .map(|e| format!("\"{}\"", e.replace('"', "\"\"")))
                .unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.value,
                r.examples,
                r.negatives,
                r.removed_as_false_negative,
                r.under_filled,
                opt(r.mean_negative_score),
                opt(r.min_negative_score),
                opt(r.mean_difference),
                opt(r.mean_loss),
                error
            )
            .unwrap();
        }
        out
    }

    /// Writes `summary.csv` and `summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("summary.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join("summary.json");
        let mut body = serde_json::to_string_pretty(self)?;
        body.push('\n');
        std::fs::write(&json, body).map_err(|e| Error::io(&json, e))
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn summarize(value: f64, examples: &[MinedExample], removed: usize, temperature: f64) -> SweepRow {
    let negs = || examples.iter().flat_map(|e| e.negatives.iter().map(|n| n.score));
    SweepRow {
        value,
        examples: examples.len(),
        negatives: negs().count(),
        removed_as_false_negative: removed,
        under_filled: examples.iter().filter(|e| e.under_filled).count(),
        mean_negative_score: mean(negs()),
        min_negative_score: negs().reduce(f64::min),
        mean_difference: mean(
            examples
                .iter()
                .flat_map(|e| e.negatives.iter().map(move |n| e.pos_score - n.score)),
        ),
        mean_loss: mean(examples.iter().map(|e| {
            let negs: Vec<f64> = e.negatives.iter().map(|n| n.score).collect();
            infonce_loss(e.pos_score, &negs, temperature)
        })),
        dataset: None,
        error: None,
    }
}

fn failed_row(value: f64, error: &Error) -> SweepRow {
    SweepRow {
        value,
        examples: 0,
        negatives: 0,
        removed_as_false_negative: 0,
        under_filled: 0,
        mean_negative_score: None,
        min_negative_score: None,
        mean_difference: None,
        mean_loss: None,
        dataset: None,
        error: Some(error.to_string()),
    }
}

/// Mines every grid point from one shared candidate cache.
///
/// A failing grid point is recorded in its row and does not stop the sweep.
pub fn run_sweep_cached(
    spec: &SweepSpec,
    pairs: &[TrainPair],
    cache: &CandidateCache,
    corpus: &Corpus,
    opts: &RunOptions,
) -> Result<SweepSummary> {
    let values = spec.grid.values()?;
    if spec.emit_datasets && spec.out_dir.is_none() {
        return Err(Error::Config("emit_datasets requires out_dir".into()));
    }
    if let Some(dir) = spec.out_dir.as_deref().filter(|_| spec.emit_datasets) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let rows = values
        .par_iter()
        .map(|&value| {
            let run = || -> Result<SweepRow> {
                let cfg = spec.method_family.configure(&spec.shared, value)?;
                let out = mine_candidates(pairs, cache, corpus, &cfg, opts)?;
                let mut row = summarize(value, &out.examples, out.stats.removed_as_false_negative, spec.loss_temperature);
                if let Some(dir) = spec.out_dir.as_deref().filter(|_| spec.emit_datasets) {
                    let name = dataset_file_name(spec.method_family, value);
                    save_dataset(&out.examples, dir.join(&name))?;
                    row.dataset = Some(name);
                }
                Ok(row)
            };
            run().unwrap_or_else(|e| {
                log::error!("sweep point {value}: {e}");
                failed_row(value, &e)
            })
        })
        .collect();
    Ok(SweepSummary {
        method_family: spec.method_family,
        loss_temperature: spec.loss_temperature,
        rows,
    })
}

pub fn run_sweep(
    spec: &SweepSpec,
    pairs: &[TrainPair],
    queries: &EmbeddingMatrix,
    corpus_matrix: &EmbeddingMatrix,
    corpus: &Corpus,
    opts: &RunOptions,
) -> Result<SweepSummary> {
    spec.grid.values()?;
    let cache = prepare_candidates(pairs, queries, corpus_matrix, opts)?;
    run_sweep_cached(spec, pairs, &cache, corpus, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(family: MethodFamily, grid: Grid) -> SweepSpec {
        SweepSpec {
            method_family: family,
            grid,
            shared: MiningConfig::default(),
            emit_datasets: false,
            out_dir: None,
            loss_temperature: DEFAULT_LOSS_TEMPERATURE,
        }
    }

    fn range(start: f64, stop_inclusive: f64, step: f64) -> Grid {
        Grid::Range {
            start,
            stop_inclusive,
            step,
        }
    }

    #[test]
    fn threshold_grid_has_21_points() {
        let pts = expand_grid(&spec(MethodFamily::PercPos, range(0.0, 1.0, 0.05))).unwrap();
        assert_eq!(pts.len(), 21);
        assert_eq!(pts[19].value, 0.95);
        assert_eq!(pts[20].value, 1.0);
        assert_eq!(pts[3].value, 0.15);
    }

    #[test]
    fn pool_grid_has_10_points() {
        let pts = expand_grid(&spec(MethodFamily::SampledTopk, range(10.0, 100.0, 10.0))).unwrap();
        assert_eq!(pts.len(), 10);
        assert_eq!(pts[9].config.sampling, Sampling::SampledTopK { pool_k: 100 });
    }

    #[test]
    fn degenerate_range_has_one_point() {
        let pts = expand_grid(&spec(MethodFamily::PercPos, range(0.95, 0.95, 0.05))).unwrap();
        assert_eq!(pts.len(), 1);
        assert_eq!(pts[0].config.method, MiningMethod::TopKPercPos { percentage_margin: 0.95 });
    }

    #[test]
    fn empty_or_invalid_grids_rejected() {
        assert!(expand_grid(&spec(MethodFamily::Abs, range(1.0, 0.0, 0.05))).is_err());
        assert!(expand_grid(&spec(MethodFamily::Abs, range(0.0, 1.0, 0.0))).is_err());
        assert!(expand_grid(&spec(MethodFamily::Abs, Grid::Values(vec![]))).is_err());
        assert!(expand_grid(&spec(MethodFamily::Shifted, Grid::Values(vec![2.5]))).is_err());
        // pool_k below num_negatives
        assert!(expand_grid(&spec(MethodFamily::SampledTopk, Grid::Values(vec![2.0]))).is_err());
    }

    #[test]
    fn grid_json_forms() {
        let g: Grid = serde_json::from_str(r#"{"start":0,"stop_inclusive":1,"step":0.05}"#).unwrap();
        assert_eq!(g.values().unwrap().len(), 21);
        let g: Grid = serde_json::from_str("[0.9, 0.95]").unwrap();
        assert_eq!(g.values().unwrap(), vec![0.9, 0.95]);
    }

    #[test]
    fn file_names() {
        assert_eq!(dataset_file_name(MethodFamily::PercPos, 0.95), "percpos-0.95.jsonl");
        assert_eq!(dataset_file_name(MethodFamily::Shifted, 10.0), "shifted-10.jsonl");
    }
}
