//! Python bindings. Configs cross the boundary as dicts with the same layout
//! as the JSON config file; datasets come back as lists of dicts.

use std::collections::{HashMap, HashSet};
use std::path::PathBuf;

use negminer::analysis::{self, HistogramOptions, ReportFormat};
use negminer::embed::{EmbedClient as CoreClient, EmbedServiceConfig, InstructionPrefix};
use negminer::ensemble::{cross_sample_ensemble, intra_sample_ensemble, TeacherRun};
use negminer::fixtures::{self, PlantedConfig};
use negminer::mining::{self, MiningConfig, MiningMethod, RunOptions};
use negminer::store::{self, EmbeddingMatrix, MinedExample};
use negminer::sweep::{self, SweepSpec};
use negminer::topk::{self, Candidate, CandidateList, Metric, TopkOptions};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(negminer, NegminerError, PyException);
create_exception!(negminer, ServiceError, NegminerError);

fn err(e: negminer::Error) -> PyErr {
    if e.is_service_error() {
        ServiceError::new_err(e.to_string())
    } else {
        NegminerError::new_err(e.to_string())
    }
}

fn to_json(py: Python<'_>, obj: &Bound<'_, PyAny>) -> PyResult<String> {
    py.import("json")?.call_method1("dumps", (obj,))?.extract()
}

fn from_json<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

/// Deserializes an optional dict; `None` gives the default.
fn config<T: serde::de::DeserializeOwned + Default>(py: Python<'_>, obj: Option<&Bound<'_, PyAny>>) -> PyResult<T> {
    match obj {
        None => Ok(T::default()),
        Some(o) if o.is_none() => Ok(T::default()),
        Some(o) => serde_json::from_str(&to_json(py, o)?).map_err(|e| PyValueError::new_err(e.to_string())),
    }
}

fn to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    from_json(py, &text)
}

fn examples_to_py<'py>(py: Python<'py>, examples: &[MinedExample]) -> PyResult<Vec<Bound<'py, PyAny>>> {
    let mut buf = Vec::new();
    store::write_dataset(examples, &mut buf).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let text = String::from_utf8(buf).map_err(|e| PyValueError::new_err(e.to_string()))?;
    text.lines().map(|l| from_json(py, l)).collect()
}

fn parse_metric(metric: &str) -> PyResult<Metric> {
    metric.parse().map_err(err)
}

/// A row-major float32 embedding matrix with one id per row.
#[pyclass(name = "Matrix", module = "negminer", frozen)]
struct PyMatrix {
    inner: EmbeddingMatrix,
}

#[pymethods]
impl PyMatrix {
    #[new]
    #[pyo3(signature = (ids, rows))]
    fn new(ids: Vec<String>, rows: Vec<Vec<f32>>) -> PyResult<Self> {
        Ok(PyMatrix {
            inner: EmbeddingMatrix::from_rows(ids, &rows).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyMatrix {
            inner: store::load_matrix(path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        store::save_matrix(&self.inner, path).map_err(err)
    }

    #[getter]
    fn ids(&self) -> Vec<String> {
        self.inner.ids().to_vec()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn normalized(&self) -> bool {
        self.inner.is_normalized()
    }

    fn __len__(&self) -> usize {
        self.inner.num_rows()
    }

    fn row(&self, id: &str) -> PyResult<Vec<f32>> {
        self.inner
            .row_by_id(id)
            .map(<[f32]>::to_vec)
            .ok_or_else(|| PyValueError::new_err(format!("no row for id {id:?}")))
    }

    fn __repr__(&self) -> String {
        format!("Matrix(rows={}, dim={})", self.inner.num_rows(), self.inner.dim())
    }
}

/// Client for an OpenAI-compatible embeddings endpoint.
#[pyclass(name = "EmbedClient", module = "negminer", frozen)]
struct PyEmbedClient {
    inner: CoreClient,
}

#[pymethods]
impl PyEmbedClient {
    /// `config` holds `base_url`, `model_name` and optionally the other service settings.
    #[new]
    fn new(py: Python<'_>, config: &Bound<'_, PyDict>) -> PyResult<Self> {
        let c: EmbedServiceConfig = serde_json::from_str(&to_json(py, config.as_any())?)
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(PyEmbedClient {
            inner: CoreClient::new(c.with_env_overrides()).map_err(err)?,
        })
    }

    fn embed(&self, py: Python<'_>, texts: Vec<String>) -> PyResult<Vec<Vec<f32>>> {
        py.detach(|| self.inner.embed_texts(&texts)).map_err(err)
    }

    /// Embeds into a matrix file, resuming a partial one. Returns the number of rows requested.
    #[pyo3(signature = (ids, texts, out_path, instruction=None))]
    fn embed_to_file(
        &self,
        py: Python<'_>,
        ids: Vec<String>,
        texts: Vec<String>,
        out_path: PathBuf,
        instruction: Option<String>,
    ) -> PyResult<usize> {
        let prefix = instruction.map(InstructionPrefix::new);
        let run = py
            .detach(|| self.inner.embed_to_file(&ids, &texts, prefix.as_ref(), &out_path))
            .map_err(err)?;
        Ok(run.requested_rows)
    }
}

/// Exact top-k search. Returns one list of `(passage_id, score)` per query row.
#[pyfunction]
#[pyo3(signature = (queries, corpus, k, metric="cosine", exclusions=None, chunk_rows=topk::DEFAULT_CHUNK_ROWS))]
fn search(
    py: Python<'_>,
    queries: &PyMatrix,
    corpus: &PyMatrix,
    k: usize,
    metric: &str,
    exclusions: Option<HashMap<String, HashSet<String>>>,
    chunk_rows: usize,
) -> PyResult<Vec<Vec<(String, f32)>>> {
    let opts = TopkOptions {
        metric: parse_metric(metric)?,
        chunk_rows,
    };
    let exclusions = exclusions.unwrap_or_default();
    let lists = py
        .detach(|| topk::topk(&queries.inner, &corpus.inner, k, &exclusions, opts))
        .map_err(err)?;
    Ok(lists
        .into_iter()
        .map(|l| l.entries.into_iter().map(|c| (c.passage_id, c.score)).collect())
        .collect())
}

/// Applies a mining method to ranked candidates. Returns `(eligible, removed, threshold)`.
#[pyfunction]
fn filter_candidates(
    py: Python<'_>,
    candidates: Vec<(String, f32)>,
    pos_score: f64,
    method: &Bound<'_, PyAny>,
) -> PyResult<(Vec<(String, f32)>, usize, Option<f64>)> {
    let method: MiningMethod = serde_json::from_str(&to_json(py, method)?).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let list = CandidateList {
        query_id: String::new(),
        entries: candidates
            .into_iter()
            .map(|(passage_id, score)| Candidate { passage_id, score })
            .collect(),
        short: false,
    };
    let out = mining::filter_candidates(&list, pos_score, &method);
    Ok((
        out.eligible.entries.into_iter().map(|c| (c.passage_id, c.score)).collect(),
        out.removed_as_false_negative,
        out.threshold_used,
    ))
}

/// Softmax draws without replacement, seeded per `(seed, index)` like mining.
#[pyfunction]
#[pyo3(signature = (scores, temperature, count, seed, index=0))]
fn softmax_sample(scores: Vec<f64>, temperature: f64, count: usize, seed: u64, index: usize) -> Vec<usize> {
    mining::softmax_sample(&scores, temperature, count, &mut mining::example_rng(seed, index))
}

#[pyfunction]
fn infonce_loss(pos_score: f64, neg_scores: Vec<f64>, temperature: f64) -> f64 {
    analysis::infonce_loss(pos_score, &neg_scores, temperature)
}

#[pyfunction]
fn infonce_bound(pos_score: f64, threshold: f64, k: usize, temperature: f64) -> f64 {
    analysis::infonce_bound(pos_score, threshold, k, temperature)
}

/// Full mining run over files. Returns `(examples, stats)`.
#[pyfunction]
#[pyo3(signature = (corpus, pairs, query_matrix, corpus_matrix, config=None, run=None))]
fn mine<'py>(
    py: Python<'py>,
    corpus: PathBuf,
    pairs: PathBuf,
    query_matrix: PathBuf,
    corpus_matrix: PathBuf,
    config: Option<&Bound<'py, PyAny>>,
    run: Option<&Bound<'py, PyAny>>,
) -> PyResult<(Vec<Bound<'py, PyAny>>, Bound<'py, PyAny>)> {
    let cfg: MiningConfig = self::config(py, config)?;
    let opts: RunOptions = self::config(py, run)?;
    let out = py
        .detach(|| -> negminer::Result<_> {
            let corpus = store::load_corpus(&corpus)?;
            let pairs = store::load_pairs(&pairs, &corpus)?;
            let queries = store::load_matrix(&query_matrix)?;
            let matrix = store::load_matrix(&corpus_matrix)?;
            mining::mine_dataset(&pairs, &queries, &matrix, &corpus, &cfg, &opts)
        })
        .map_err(err)?;
    Ok((examples_to_py(py, &out.examples)?, to_py(py, &out.stats)?))
}

#[pyfunction]
fn load_dataset<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Vec<Bound<'py, PyAny>>> {
    examples_to_py(py, &store::load_dataset(path).map_err(err)?)
}

fn load_runs(datasets: Vec<(String, PathBuf)>) -> negminer::Result<Vec<TeacherRun>> {
    datasets
        .into_iter()
        .enumerate()
        .map(|(i, (name, path))| {
            Ok(TeacherRun {
                teacher_name: name,
                accuracy_rank: i + 1,
                examples: store::load_dataset(path)?,
            })
        })
        .collect()
}

/// Ensembles `(teacher, dataset_path)` runs, listed most accurate first, into `out_path`.
#[pyfunction]
#[pyo3(signature = (runs, out_path, method="cross_sample", num_negatives=None, seed=mining::DEFAULT_SEED, dedup=false))]
fn ensemble(
    py: Python<'_>,
    runs: Vec<(String, PathBuf)>,
    out_path: PathBuf,
    method: &str,
    num_negatives: Option<usize>,
    seed: u64,
    dedup: bool,
) -> PyResult<usize> {
    py.detach(|| -> negminer::Result<usize> {
        let runs = load_runs(runs)?;
        let out = match method {
            "cross_sample" => cross_sample_ensemble(&runs, num_negatives.unwrap_or(mining::DEFAULT_NUM_NEGATIVES), seed)?,
            "intra_sample" => intra_sample_ensemble(&runs, num_negatives.unwrap_or(runs.len()), dedup)?,
            other => return Err(negminer::Error::Config(format!("unknown ensemble method {other:?}"))),
        };
        store::save_dataset(&out, &out_path)?;
        Ok(out.len())
    })
    .map_err(err)
}

/// Mean per-example overlap of the first `top_n` negatives between runs.
#[pyfunction]
#[pyo3(signature = (runs, top_n=analysis::DEFAULT_TOP_N))]
fn jaccard_matrix<'py>(py: Python<'py>, runs: Vec<(String, PathBuf)>, top_n: usize) -> PyResult<Bound<'py, PyAny>> {
    let m = py
        .detach(|| analysis::jaccard_matrix(&load_runs(runs)?, top_n))
        .map_err(err)?;
    to_py(py, &m)
}

/// Histogram report for a dataset; writes the requested formats and returns the file paths.
#[pyfunction]
#[pyo3(signature = (dataset, out_dir, formats=vec!["csv".to_string(), "svg".to_string(), "json".to_string()], bins=analysis::DEFAULT_BINS, temperature=analysis::DEFAULT_LOSS_TEMPERATURE))]
fn analyze(dataset: PathBuf, out_dir: PathBuf, formats: Vec<String>, bins: usize, temperature: f64) -> PyResult<Vec<PathBuf>> {
    let formats: Vec<ReportFormat> = formats
        .iter()
        .map(|f| serde_json::from_value(serde_json::Value::String(f.clone())))
        .collect::<Result<_, _>>()
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    let examples = store::load_dataset(dataset).map_err(err)?;
    let report = analysis::histogram_report(&examples, &HistogramOptions { bins, temperature }).map_err(err)?;
    analysis::emit_report(&report, out_dir, &formats).map_err(err)
}

/// Grid values of a sweep spec, as `(value, mining_config)` pairs.
#[pyfunction]
fn expand_grid<'py>(py: Python<'py>, spec: &Bound<'py, PyAny>) -> PyResult<Vec<(f64, Bound<'py, PyAny>)>> {
    let spec: SweepSpec = serde_json::from_str(&to_json(py, spec)?).map_err(|e| PyValueError::new_err(e.to_string()))?;
    sweep::expand_grid(&spec)
        .map_err(err)?
        .iter()
        .map(|p| Ok((p.value, to_py(py, &p.config)?)))
        .collect()
}

/// Writes the synthetic planted-false-negative fixture into `out_dir`.
#[pyfunction]
#[pyo3(signature = (out_dir, num_queries=200, background=2000, dim=128, seed=7))]
fn write_planted_fixture(out_dir: PathBuf, num_queries: usize, background: usize, dim: usize, seed: u64) -> PyResult<()> {
    let cfg = PlantedConfig {
        num_queries,
        background,
        dim,
        seed,
        ..Default::default()
    };
    fixtures::planted_fixture(&cfg).and_then(|f| f.write_to(out_dir)).map_err(err)
}

#[pymodule]
#[pyo3(name = "negminer")]
fn negminer_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("NegminerError", m.py().get_type::<NegminerError>())?;
    m.add("ServiceError", m.py().get_type::<ServiceError>())?;
    m.add_class::<PyMatrix>()?;
    m.add_class::<PyEmbedClient>()?;
    m.add_function(wrap_pyfunction!(search, m)?)?;
    m.add_function(wrap_pyfunction!(filter_candidates, m)?)?;
    m.add_function(wrap_pyfunction!(softmax_sample, m)?)?;
    m.add_function(wrap_pyfunction!(infonce_loss, m)?)?;
    m.add_function(wrap_pyfunction!(infonce_bound, m)?)?;
    m.add_function(wrap_pyfunction!(mine, m)?)?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(ensemble, m)?)?;
    m.add_function(wrap_pyfunction!(jaccard_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(analyze, m)?)?;
    m.add_function(wrap_pyfunction!(expand_grid, m)?)?;
    m.add_function(wrap_pyfunction!(write_planted_fixture, m)?)?;
    Ok(())
}
