//! Client for an external embedding service.
//!
//! Speaks the common `/v1/embeddings` JSON shape: the request body is
//! `{"model": ..., "input": [...]}` and the response carries
//! `{"data": [{"index": i, "embedding": [...]}]}`.

use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::store::{load_matrix, Corpus, EmbeddingMatrix, MatrixWriter, TrainPair};

pub const ENV_BASE_URL: &str = "NEGMINER_BASE_URL";
pub const ENV_API_KEY: &str = "NEGMINER_API_KEY";

const BACKOFF_FACTOR: f64 = 2.0;
const BACKOFF_JITTER: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedServiceConfig {
    pub base_url: String,
    pub model_name: String,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    /// Per-request timeout in seconds.
    #[serde(default = "default_timeout")]
    pub timeout: f64,
    #[serde(default = "default_parallel")]
    pub max_parallel_requests: usize,
    /// Sent as a bearer token. Never written to manifests.
    #[serde(default, skip_serializing)]
    pub api_key: Option<String>,
    /// Texts longer than this many characters are truncated before sending.
    #[serde(default)]
    pub max_chars: Option<usize>,
    /// First retry delay in seconds; doubles on each further retry.
    #[serde(default = "default_backoff_base")]
    pub backoff_base: f64,
}

fn default_batch_size() -> usize {
    32
}
fn default_max_retries() -> u32 {
    3
}
fn default_timeout() -> f64 {
    60.0
}
fn default_parallel() -> usize {
    4
}
fn default_backoff_base() -> f64 {
    1.0
}

impl EmbedServiceConfig {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        EmbedServiceConfig {
            base_url: base_url.into(),
            model_name: model_name.into(),
            batch_size: default_batch_size(),
            max_retries: default_max_retries(),
            timeout: default_timeout(),
            max_parallel_requests: default_parallel(),
            api_key: None,
            max_chars: None,
            backoff_base: default_backoff_base(),
        }
    }

    /// Applies `NEGMINER_BASE_URL` and `NEGMINER_API_KEY` when set.
    pub fn with_env_overrides(mut self) -> Self {
        if let Ok(url) = std::env::var(ENV_BASE_URL) {
            if !url.is_empty() {
                self.base_url = url;
            }
        }
        if let Ok(key) = std::env::var(ENV_API_KEY) {
            if !key.is_empty() {
                self.api_key = Some(key);
            }
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.timeout > 0.0) || !self.timeout.is_finite() {
            return Err(Error::Config(format!("timeout must be positive, got {}", self.timeout)));
        }
        if self.max_parallel_requests == 0 {
            return Err(Error::Config("max_parallel_requests must be at least 1".into()));
        }
        if !(self.backoff_base >= 0.0) || !self.backoff_base.is_finite() {
            return Err(Error::Config(format!("backoff_base must be non-negative, got {}", self.backoff_base)));
        }
        if self.max_chars == Some(0) {
            return Err(Error::Config("max_chars must be positive when set".into()));
        }
        if self.base_url.trim().is_empty() {
            return Err(Error::Config("base_url is empty".into()));
        }
        Ok(())
    }

    fn endpoint(&self) -> String {
        format!("{}/v1/embeddings", self.base_url.trim_end_matches('/'))
    }
}

/// Task definition placed in front of queries. Passages are never prefixed.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionPrefix {
    pub task_definition: String,
}

impl InstructionPrefix {
    pub fn new(task_definition: impl Into<String>) -> Self {
        InstructionPrefix {
            task_definition: task_definition.into(),
        }
    }
}

pub fn apply_prefix(prefix: &InstructionPrefix, query: &str) -> String {
    if prefix.task_definition.is_empty() {
        query.to_string()
    } else {
        format!("{}: {}", prefix.task_definition, query)
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    data: Vec<EmbedDatum>,
}

#[derive(Deserialize)]
struct EmbedDatum {
    index: usize,
    embedding: Vec<f32>,
}

/// Blocking client. Cheap to clone and safe to share between threads.
#[derive(Debug, Clone)]
pub struct EmbedClient {
    config: EmbedServiceConfig,
    agent: ureq::Agent,
}

impl EmbedClient {
    pub fn new(config: EmbedServiceConfig) -> Result<Self> {
        config.validate()?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(EmbedClient { config, agent })
    }

    pub fn config(&self) -> &EmbedServiceConfig {
        &self.config
    }

    fn truncate<'a>(&self, text: &'a str) -> std::borrow::Cow<'a, str> {
        match self.config.max_chars {
            Some(max) if text.chars().count() > max => text.chars().take(max).collect::<String>().into(),
            _ => text.into(),
        }
    }

    fn request_once(&self, input: &[String]) -> std::result::Result<Vec<Vec<f32>>, String> {
        let mut req = self.agent.post(&self.config.endpoint());
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(EmbedRequest {
                model: &self.config.model_name,
                input,
            })
            .map_err(|e| e.to_string())?;
        let status = resp.status();
        if !status.is_success() {
            let body = resp.body_mut().read_to_string().unwrap_or_default();
            let body: String = body.chars().take(200).collect();
            return Err(format!("HTTP {status}: {body}"));
        }
        let parsed: EmbedResponse = resp.body_mut().read_json().map_err(|e| format!("bad response: {e}"))?;
        if parsed.data.len() != input.len() {
            return Err(format!("sent {} inputs, got {} embeddings", input.len(), parsed.data.len()));
        }
        let mut rows: Vec<Option<Vec<f32>>> = vec![None; input.len()];
        for d in parsed.data {
            match rows.get_mut(d.index) {
                Some(slot @ None) => *slot = Some(d.embedding),
                _ => return Err(format!("response index {} is out of range or repeated", d.index)),
            }
        }
        Ok(rows.into_iter().map(|r| r.unwrap()).collect())
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let base = self.config.backoff_base * BACKOFF_FACTOR.powi(attempt as i32);
        let jitter = rand::rng().random_range(-BACKOFF_JITTER..=BACKOFF_JITTER);
        Duration::from_secs_f64((base * (1.0 + jitter)).max(0.0))
    }

    /// Embeds one batch, retrying with exponential backoff.
    fn embed_batch(&self, batch: usize, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        let input: Vec<String> = texts.iter().map(|t| self.truncate(t).into_owned()).collect();
        let mut attempt = 0;
        loop {
            match self.request_once(&input) {
                Ok(rows) => return Ok(rows),
                Err(message) if attempt < self.config.max_retries => {
                    let wait = self.backoff(attempt);
                    log::warn!("batch {batch}: {message}; retrying in {:.2}s", wait.as_secs_f64());
                    std::thread::sleep(wait);
                    attempt += 1;
                }
                Err(message) => {
                    return Err(Error::Service {
                        batch,
                        message: format!("{message} (after {} attempts)", attempt + 1),
                    })
                }
            }
        }
    }

    /// Embeds `texts` in order, calling `sink` with each completed batch.
    ///
    /// Batches go out in waves of at most `max_parallel_requests`. When a
    /// batch fails, the batches before it in the same wave are still handed
    /// to `sink` before the error is returned.
    fn stream<F>(&self, texts: &[String], mut dim: Option<usize>, mut sink: F) -> Result<usize>
    where
        F: FnMut(Vec<Vec<f32>>) -> Result<()>,
    {
        let batches: Vec<&[String]> = texts.chunks(self.config.batch_size).collect();
        for (wave_no, wave) in batches.chunks(self.config.max_parallel_requests).enumerate() {
            let first = wave_no * self.config.max_parallel_requests;
            let results: Vec<Result<Vec<Vec<f32>>>> = std::thread::scope(|s| {
                let handles: Vec<_> = wave
                    .iter()
                    .enumerate()
                    .map(|(j, batch)| s.spawn(move || self.embed_batch(first + j, batch)))
                    .collect();
                handles.into_iter().map(|h| h.join().expect("embedding worker panicked")).collect()
            });
            for (j, result) in results.into_iter().enumerate() {
                let rows = result?;
                for row in &rows {
                    let expected = *dim.get_or_insert(row.len());
                    if row.len() != expected {
                        return Err(Error::Service {
                            batch: first + j,
                            message: Error::DimMismatch {
                                expected,
                                actual: row.len(),
                            }
                            .to_string(),
                        });
                    }
                    if row.is_empty() {
                        return Err(Error::Service {
                            batch: first + j,
                            message: "empty embedding".into(),
                        });
                    }
                }
                sink(rows)?;
            }
        }
        dim.ok_or_else(|| Error::Config("no inputs".into()))
    }

    /// Embeds `texts`; row `i` of the result belongs to `texts[i]`.
    pub fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        if texts.is_empty() {
            return Err(Error::Config("no inputs".into()));
        }
        let mut out = Vec::with_capacity(texts.len());
        self.stream(texts, None, |rows| {
            out.extend(rows);
            Ok(())
        })?;
        Ok(out)
    }

    /// Embeds `texts` into a matrix whose row ids are `ids`.
    pub fn embed_matrix(&self, ids: Vec<String>, texts: &[String]) -> Result<EmbeddingMatrix> {
        if ids.len() != texts.len() {
            return Err(Error::Misaligned(format!("{} ids for {} texts", ids.len(), texts.len())));
        }
        let rows = self.embed_texts(texts)?;
        EmbeddingMatrix::from_rows(ids, &rows)
    }

    /// Streams embeddings of `texts` into the matrix file at `out_path`.
    ///
    /// A partial file from an earlier run with the same fingerprint is
    /// continued from its last complete row; a finished one is returned
    /// without contacting the service.
    pub fn embed_to_file(
        &self,
        ids: &[String],
        texts: &[String],
        prefix: Option<&InstructionPrefix>,
        out_path: &Path,
    ) -> Result<EmbedRun> {
        if ids.len() != texts.len() {
            return Err(Error::Misaligned(format!("{} ids for {} texts", ids.len(), texts.len())));
        }
        if texts.is_empty() {
            return Err(Error::Config("no inputs".into()));
        }
        let fingerprint = Fingerprint::new(&self.config, prefix, ids);
        let fp_path = fingerprint_path(out_path);

        let resumable = out_path.exists() && fp_path.exists();
        let (mut writer, dim) = if resumable {
            let previous = Fingerprint::load(&fp_path)?;
            if previous != fingerprint {
                return Err(Error::Config(format!(
                    "{} was produced with a different model, prefix, or input list ({}); remove it to start over",
                    out_path.display(),
                    previous.describe_difference(&fingerprint)
                )));
            }
            if let Ok(done) = load_matrix(out_path) {
                if done.ids() == ids {
                    log::info!("{} is already complete", out_path.display());
                    return Ok(EmbedRun {
                        matrix: done,
                        resumed_rows: ids.len(),
                        requested_rows: 0,
                    });
                }
            }
            let (writer, header) = MatrixWriter::resume(out_path)?;
            if header.num_rows != ids.len() {
                return Err(Error::Config(format!(
                    "{} declares {} rows, expected {}",
                    out_path.display(),
                    header.num_rows,
                    ids.len()
                )));
            }
            log::info!("resuming {} at row {}", out_path.display(), writer.rows_written());
            (Some(writer), Some(header.dim))
        } else {
            fingerprint.save(&fp_path)?;
            (None, None)
        };

        let start = writer.as_ref().map_or(0, MatrixWriter::rows_written);
        let remaining = &texts[start..];
        if !remaining.is_empty() {
            self.stream(remaining, dim, |rows| {
                let w = match writer.as_mut() {
                    Some(w) => w,
                    None => writer.insert(MatrixWriter::create(out_path, ids.len(), rows[0].len(), false)?),
                };
                for row in &rows {
                    w.write_row(row)?;
                }
                w.flush()
            })?;
        }
        writer.expect("at least one row was written").finish(ids)?;
        Ok(EmbedRun {
            matrix: load_matrix(out_path)?,
            resumed_rows: start,
            requested_rows: remaining.len(),
        })
    }
}

/// Result of a file-backed embedding run.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedRun {
    pub matrix: EmbeddingMatrix,
    /// Rows taken from an earlier partial run.
    pub resumed_rows: usize,
    /// Rows sent to the service in this run.
    pub requested_rows: usize,
}

/// Embeds all passages, in corpus order, without any prefix.
pub fn embed_corpus(client: &EmbedClient, corpus: &Corpus, out_path: &Path) -> Result<EmbedRun> {
    let ids: Vec<String> = corpus.ids().map(String::from).collect();
    let texts: Vec<String> = corpus.iter().map(|p| p.text.clone()).collect();
    client.embed_to_file(&ids, &texts, None, out_path)
}

/// Embeds each pair's query with the instruction prefix applied.
pub fn embed_queries(
    client: &EmbedClient,
    pairs: &[TrainPair],
    prefix: &InstructionPrefix,
    out_path: &Path,
) -> Result<EmbedRun> {
    let ids: Vec<String> = pairs.iter().map(|p| p.query_id.clone()).collect();
    let texts: Vec<String> = pairs.iter().map(|p| apply_prefix(prefix, &p.query_text)).collect();
    client.embed_to_file(&ids, &texts, Some(prefix), out_path)
}

/// Sidecar path holding the fingerprint of a matrix file.
pub fn fingerprint_path(out_path: &Path) -> PathBuf {
    let mut name = out_path.file_name().unwrap_or_default().to_os_string();
    name.push(".fingerprint.json");
    out_path.with_file_name(name)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Fingerprint {
    model: String,
    prefix: Option<String>,
    max_chars: Option<usize>,
    rows: usize,
    ids_sha256: String,
}

impl Fingerprint {
    fn new(config: &EmbedServiceConfig, prefix: Option<&InstructionPrefix>, ids: &[String]) -> Self {
        let mut h = Sha256::new();
        for id in ids {
            h.update(id.as_bytes());
            h.update([0u8]);
        }
        Fingerprint {
            model: config.model_name.clone(),
            prefix: prefix.map(|p| p.task_definition.clone()),
            max_chars: config.max_chars,
            rows: ids.len(),
            ids_sha256: format!("{:x}", h.finalize()),
        }
    }

    fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    fn describe_difference(&self, other: &Fingerprint) -> String {
        let mut parts = Vec::new();
        if self.model != other.model {
            parts.push(format!("model {:?} vs {:?}", self.model, other.model));
        }
        if self.prefix != other.prefix {
            parts.push("instruction prefix differs".to_string());
        }
        if self.max_chars != other.max_chars {
            parts.push("max_chars differs".to_string());
        }
        if self.rows != other.rows || self.ids_sha256 != other.ids_sha256 {
            parts.push("input ids differ".to_string());
        }
        parts.join(", ")
    }
}
