use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use negminer::analysis::{emit_jaccard, emit_report, histogram_report, jaccard_matrix, HistogramOptions};
use negminer::embed::{embed_corpus, embed_queries, EmbedClient, InstructionPrefix};
use negminer::ensemble::{cross_sample_ensemble, intra_sample_ensemble, EnsembleMethod, TeacherRun};
use negminer::mining::mine_dataset;
use negminer::store::{
    load_corpus, load_dataset, load_matrix, load_pairs, save_dataset, scan_corpus, scan_pairs, Corpus, EmbeddingMatrix,
    TrainPair,
};
use negminer::sweep::run_sweep;
use negminer::topk::Metric;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::CliError;

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const STATS_FILE: &str = "stats.json";
pub const MANIFEST_FILE: &str = "run-manifest.json";
const MAX_LISTED: usize = 20;

/// What a command produced: a summary for `--json` and whether it counts as success.
#[derive(Debug)]
pub struct Report {
    pub summary: Value,
    pub clean: bool,
}

impl Report {
    fn ok(summary: Value) -> Self {
        Report { summary, clean: true }
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::invalid(format!("{}: {e}", dir.display())))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    let body = serde_json::to_string_pretty(value).map_err(negminer::Error::from)? + "\n";
    fs::write(path, body).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))
}

fn sha256_file(path: &Path) -> Result<String, CliError> {
    let mut file = fs::File::open(path).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = file
            .read(&mut buf)
            .map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

/// Writes `run-manifest.json`: the effective config (secrets redacted) and input hashes.
pub fn write_manifest(dir: &Path, command: &str, cfg: &RunConfig, inputs: &[PathBuf]) -> Result<PathBuf, CliError> {
    let hashes = inputs
        .iter()
        .map(|p| Ok(json!({"path": p.display().to_string(), "sha256": sha256_file(p)?})))
        .collect::<Result<Vec<_>, CliError>>()?;
    let manifest = json!({
        "tool": "negminer",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "config": cfg.redacted_json(),
        "inputs": hashes,
    });
    let path = dir.join(MANIFEST_FILE);
    write_json(&path, &manifest)?;
    Ok(path)
}

pub fn cmd_embed(cfg: &RunConfig) -> Result<Report, CliError> {
    let service = cfg.embed_config()?;
    let corpus_path = cfg.require_path(&cfg.paths.corpus, "corpus")?;
    let out_dir = cfg.out_dir()?;
    let corpus = load_corpus(&corpus_path)?;
    let pairs = cfg.paths.pairs.as_ref().map(|p| load_pairs(p, &corpus)).transpose()?;
    create_dir(&out_dir)?;
    let client = EmbedClient::new(service)?;

    let corpus_out = cfg.paths.corpus_matrix.clone().unwrap_or_else(|| out_dir.join("corpus.ngmx"));
    let c = embed_corpus(&client, &corpus, &corpus_out)?;
    log::info!("{}: {} rows, {} requested", corpus_out.display(), c.matrix.num_rows(), c.requested_rows);
    let mut inputs = vec![corpus_path];
    let mut summary = json!({
        "corpus_matrix": corpus_out.display().to_string(),
        "corpus_rows": c.matrix.num_rows(),
        "dim": c.matrix.dim(),
        "requested_rows": c.requested_rows,
        "resumed_rows": c.resumed_rows,
    });
    if let Some(pairs) = pairs {
        let prefix = InstructionPrefix::new(cfg.instruction.clone().unwrap_or_default());
        let query_out = cfg.paths.query_matrix.clone().unwrap_or_else(|| out_dir.join("queries.ngmx"));
        let q = embed_queries(&client, &pairs, &prefix, &query_out)?;
        log::info!("{}: {} rows, {} requested", query_out.display(), q.matrix.num_rows(), q.requested_rows);
        summary["query_matrix"] = json!(query_out.display().to_string());
        summary["query_rows"] = json!(q.matrix.num_rows());
        summary["requested_rows"] = json!(c.requested_rows + q.requested_rows);
        summary["resumed_rows"] = json!(c.resumed_rows + q.resumed_rows);
        inputs.push(cfg.paths.pairs.clone().unwrap());
    }
    write_manifest(&out_dir, "embed", cfg, &inputs)?;
    Ok(Report::ok(summary))
}

struct MiningInputs {
    corpus: Corpus,
    pairs: Vec<TrainPair>,
    queries: EmbeddingMatrix,
    corpus_matrix: EmbeddingMatrix,
    paths: Vec<PathBuf>,
}

fn load_mining_inputs(cfg: &RunConfig) -> Result<MiningInputs, CliError> {
    let corpus_path = cfg.require_path(&cfg.paths.corpus, "corpus")?;
    let pairs_path = cfg.require_path(&cfg.paths.pairs, "pairs")?;
    let query_path = cfg.require_path(&cfg.paths.query_matrix, "query_matrix")?;
    let matrix_path = cfg.require_path(&cfg.paths.corpus_matrix, "corpus_matrix")?;
    let corpus = load_corpus(&corpus_path)?;
    let pairs = load_pairs(&pairs_path, &corpus)?;
    let queries = load_matrix(&query_path)?;
    let corpus_matrix = load_matrix(&matrix_path)?;
    Ok(MiningInputs {
        corpus,
        pairs,
        queries,
        corpus_matrix,
        paths: vec![corpus_path, pairs_path, query_path, matrix_path],
    })
}

pub fn cmd_mine(cfg: &RunConfig) -> Result<Report, CliError> {
    let out_dir = cfg.out_dir()?;
    let mining = cfg.mining_config();
    mining.validate()?;
    let inputs = load_mining_inputs(cfg)?;
    let out = mine_dataset(
        &inputs.pairs,
        &inputs.queries,
        &inputs.corpus_matrix,
        &inputs.corpus,
        &mining,
        &cfg.run,
    )?;
    create_dir(&out_dir)?;
    save_dataset(&out.examples, out_dir.join(DATASET_FILE))?;
    write_json(&out_dir.join(STATS_FILE), &out.stats)?;
    write_manifest(&out_dir, "mine", cfg, &inputs.paths)?;
    log::info!(
        "{} examples, {} negatives, {} removed as false negatives, {} under-filled",
        out.stats.examples,
        out.stats.negatives,
        out.stats.removed_as_false_negative,
        out.stats.under_filled
    );
    Ok(Report::ok(serde_json::to_value(&out.stats).map_err(negminer::Error::from)?))
}

/// Resolves a run directory to its dataset file.
fn dataset_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(DATASET_FILE)
    } else {
        path.to_path_buf()
    }
}

fn recorded_teacher(path: &Path) -> Option<String> {
    let stats = fs::read_to_string(path.join(STATS_FILE)).ok()?;
    let v: Value = serde_json::from_str(&stats).ok()?;
    v.get("teacher")?.as_str().map(String::from)
}

fn default_teacher_name(path: &Path) -> String {
    if path.is_dir() {
        if let Some(t) = recorded_teacher(path) {
            return t;
        }
        path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into())
    } else {
        path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into())
    }
}

fn load_runs(refs: &[(PathBuf, Option<String>, Option<usize>)]) -> Result<(Vec<TeacherRun>, Vec<PathBuf>), CliError> {
    let mut runs = Vec::with_capacity(refs.len());
    let mut files = Vec::with_capacity(refs.len());
    for (i, (path, teacher, rank)) in refs.iter().enumerate() {
        let file = dataset_path(path);
        runs.push(TeacherRun {
            teacher_name: teacher.clone().unwrap_or_else(|| default_teacher_name(path)),
            accuracy_rank: rank.unwrap_or(i + 1),
            examples: load_dataset(&file)?,
        });
        files.push(file);
    }
    Ok((runs, files))
}

pub fn cmd_ensemble(cfg: &RunConfig) -> Result<Report, CliError> {
    let e = &cfg.ensemble;
    if e.runs.is_empty() {
        return Err(CliError::invalid("missing config key ensemble.runs (or run directories as arguments)"));
    }
    let out_dir = cfg.out_dir()?;
    let refs: Vec<_> = e.runs.iter().map(|r| (r.path.clone(), r.teacher.clone(), r.accuracy_rank)).collect();
    let (runs, files) = load_runs(&refs)?;
    let examples = match e.method {
        EnsembleMethod::CrossSample => {
            if e.dedup {
                log::warn!("--dedup only applies to intra-sample ensembling; ignored");
            }
            let n = e.num_negatives.unwrap_or(cfg.mining.num_negatives);
            cross_sample_ensemble(&runs, n, cfg.mining_config().seed)?
        }
        EnsembleMethod::IntraSample => intra_sample_ensemble(&runs, e.num_negatives.unwrap_or(runs.len()), e.dedup)?,
    };
    create_dir(&out_dir)?;
    save_dataset(&examples, out_dir.join(DATASET_FILE))?;
    let summary = json!({
        "method": e.method,
        "dedup": e.dedup,
        "teachers": runs.iter().map(|r| json!({"name": r.teacher_name, "accuracy_rank": r.accuracy_rank})).collect::<Vec<_>>(),
        "examples": examples.len(),
        "under_filled": examples.iter().filter(|x| x.under_filled).count(),
    });
    write_json(&out_dir.join("ensemble.json"), &summary)?;
    write_manifest(&out_dir, "ensemble", cfg, &files)?;
    Ok(Report::ok(summary))
}

fn unique_names(runs: &[TeacherRun]) -> Vec<String> {
    let mut seen = HashSet::new();
    runs.iter()
        .enumerate()
        .map(|(i, r)| {
            let base: String = r
                .teacher_name
                .chars()
                .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
                .collect();
            let name = if seen.contains(&base) { format!("{base}-{}", i + 1) } else { base };
            seen.insert(name.clone());
            name
        })
        .collect()
}

pub fn cmd_analyze(cfg: &RunConfig) -> Result<Report, CliError> {
    let a = &cfg.analysis;
    if a.inputs.is_empty() {
        return Err(CliError::invalid("missing config key analysis.inputs (or datasets as arguments)"));
    }
    if a.formats.is_empty() {
        return Err(CliError::invalid("analysis.formats is empty"));
    }
    let out_dir = cfg.out_dir()?;
    let refs: Vec<_> = a.inputs.iter().map(|p| (p.clone(), None, None)).collect();
    let (runs, files) = load_runs(&refs)?;
    let opts = HistogramOptions {
        bins: a.bins,
        temperature: a.temperature,
    };
    let mut written = Vec::new();
    let mut reports = BTreeMap::new();
    if runs.len() == 1 {
        let report = histogram_report(&runs[0].examples, &opts)?;
        written.extend(emit_report(&report, &out_dir, &a.formats)?);
        reports.insert(runs[0].teacher_name.clone(), report.examples);
    } else {
        for (run, name) in runs.iter().zip(unique_names(&runs)) {
            let report = histogram_report(&run.examples, &opts)?;
            written.extend(emit_report(&report, out_dir.join(&name), &a.formats)?);
            reports.insert(name, report.examples);
        }
        let matrix = jaccard_matrix(&runs, a.top_n)?;
        written.extend(emit_jaccard(&matrix, &out_dir, &a.formats)?);
    }
    write_manifest(&out_dir, "analyze", cfg, &files)?;
    Ok(Report::ok(json!({
        "examples": reports,
        "files": written.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
    })))
}

pub fn cmd_sweep(cfg: &RunConfig) -> Result<Report, CliError> {
    let spec = cfg.sweep_spec()?;
    let out_dir = cfg.out_dir()?;
    let inputs = load_mining_inputs(cfg)?;
    let summary = run_sweep(
        &spec,
        &inputs.pairs,
        &inputs.queries,
        &inputs.corpus_matrix,
        &inputs.corpus,
        &cfg.run,
    )?;
    summary.write(&out_dir)?;
    write_manifest(&out_dir, "sweep", cfg, &inputs.paths)?;
    let failures = summary.failures();
    if failures > 0 {
        log::error!("{failures} of {} grid points failed; see summary.csv", summary.rows.len());
    }
    Ok(Report {
        summary: serde_json::to_value(&summary).map_err(negminer::Error::from)?,
        clean: failures == 0,
    })
}

fn list_ids<'a>(ids: impl Iterator<Item = &'a str>) -> String {
    let all: Vec<&str> = ids.collect();
    let mut s = all.iter().take(MAX_LISTED).map(|id| format!("{id:?}")).collect::<Vec<_>>().join(", ");
    if all.len() > MAX_LISTED {
        s.push_str(&format!(" (+{} more)", all.len() - MAX_LISTED));
    }
    s
}

fn zero_norm_rows(m: &EmbeddingMatrix) -> Vec<&str> {
    m.rows()
        .zip(m.ids())
        .filter(|(row, _)| row.iter().all(|&v| v == 0.0))
        .map(|(_, id)| id.as_str())
        .collect()
}

/// Checks every input that is configured and reports all problems found.
pub fn cmd_validate(cfg: &RunConfig) -> Result<Report, CliError> {
    let p = &cfg.paths;
    if p.corpus.is_none() && p.pairs.is_none() && p.query_matrix.is_none() && p.corpus_matrix.is_none() {
        return Err(CliError::invalid("nothing to validate: give --corpus, --pairs, --query-matrix or --corpus-matrix"));
    }
    let mut issues: Vec<String> = Vec::new();
    let mut checked = serde_json::Map::new();

    let corpus = match &p.corpus {
        Some(path) => match scan_corpus(path) {
            Ok(report) => {
                issues.extend(report.errors.iter().map(ToString::to_string));
                checked.insert("corpus_passages".into(), json!(report.items.len()));
                Some(report.items)
            }
            Err(e) => {
                issues.push(e.to_string());
                None
            }
        },
        None => None,
    };

    let pairs = match (&p.pairs, &corpus) {
        (Some(path), Some(corpus)) => match scan_pairs(path, corpus) {
            Ok(report) => {
                issues.extend(report.errors.iter().map(ToString::to_string));
                checked.insert("pairs".into(), json!(report.items.len()));
                Some(report.items)
            }
            Err(e) => {
                issues.push(e.to_string());
                None
            }
        },
        (Some(_), None) => {
            if p.corpus.is_none() {
                issues.push("pairs can only be checked together with --corpus".into());
            }
            None
        }
        _ => None,
    };

    let load = |path: &Option<PathBuf>, issues: &mut Vec<String>| -> Option<(PathBuf, EmbeddingMatrix)> {
        let path = path.as_ref()?;
        match load_matrix(path) {
            Ok(m) => Some((path.clone(), m)),
            Err(e) => {
                issues.push(e.to_string());
                None
            }
        }
    };
    let corpus_matrix = load(&p.corpus_matrix, &mut issues);
    let query_matrix = load(&p.query_matrix, &mut issues);

    for (path, m) in corpus_matrix.iter().chain(&query_matrix) {
        if cfg.run.metric == Metric::Cosine {
            let zero = zero_norm_rows(m);
            if !zero.is_empty() {
                issues.push(format!(
                    "{}: zero-norm rows cannot be scored by cosine: {}",
                    path.display(),
                    list_ids(zero.into_iter())
                ));
            }
        }
    }
    if let Some((path, m)) = &corpus_matrix {
        checked.insert("corpus_matrix_rows".into(), json!(m.num_rows()));
        if let Some(corpus) = &corpus {
            let missing: Vec<&str> = corpus.ids().filter(|id| m.row_index(id).is_none()).collect();
            if !missing.is_empty() {
                issues.push(format!(
                    "{}: missing rows for corpus ids {}",
                    path.display(),
                    list_ids(missing.into_iter())
                ));
            }
            let extra: Vec<&str> = m.ids().iter().map(String::as_str).filter(|id| !corpus.contains(id)).collect();
            if !extra.is_empty() {
                issues.push(format!(
                    "{}: rows for ids not in the corpus: {}",
                    path.display(),
                    list_ids(extra.into_iter())
                ));
            }
        }
    }
    if let Some((path, m)) = &query_matrix {
        checked.insert("query_matrix_rows".into(), json!(m.num_rows()));
        if let Some(pairs) = &pairs {
            let missing: Vec<&str> = pairs
                .iter()
                .map(|pr| pr.query_id.as_str())
                .filter(|id| m.row_index(id).is_none())
                .collect();
            if !missing.is_empty() {
                issues.push(format!("{}: missing rows for queries {}", path.display(), list_ids(missing.into_iter())));
            }
        }
        if let Some((cpath, c)) = &corpus_matrix {
            if c.dim() != m.dim() {
                issues.push(format!(
                    "{} has dim {} but {} has dim {}",
                    path.display(),
                    m.dim(),
                    cpath.display(),
                    c.dim()
                ));
            }
        }
    }

    for issue in &issues {
        eprintln!("{issue}");
    }
    let clean = issues.is_empty();
    if clean {
        log::info!("no problems found");
    }
    Ok(Report {
        summary: json!({"clean": clean, "issues": issues, "checked": checked}),
        clean,
    })
}
