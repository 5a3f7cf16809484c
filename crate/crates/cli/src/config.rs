//! The JSON run configuration shared by all subcommands.
//!
//! Paths are resolved against the working directory. Command-line flags are
//! applied on top of the file and always win.

use std::path::{Path, PathBuf};

use negminer::analysis::{ReportFormat, DEFAULT_BINS, DEFAULT_LOSS_TEMPERATURE, DEFAULT_TOP_N};
use negminer::embed::{EmbedServiceConfig, ENV_API_KEY, ENV_BASE_URL};
use negminer::ensemble::EnsembleMethod;
use negminer::mining::{MiningConfig, RunOptions};
use negminer::sweep::{Grid, MethodFamily, SweepSpec};
use serde::{Deserialize, Serialize, Serializer};

use crate::CliError;

const REDACTED: &str = "<redacted>";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides `mining.seed` when set.
    pub seed: Option<u64>,
    pub paths: Paths,
    pub embed: EmbedSection,
    /// Task definition prepended to queries before embedding.
    pub instruction: Option<String>,
    pub mining: MiningConfig,
    pub run: RunOptions,
    pub ensemble: EnsembleSection,
    pub analysis: AnalysisSection,
    pub sweep: Option<SweepSection>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub pairs: Option<PathBuf>,
    pub query_matrix: Option<PathBuf>,
    pub corpus_matrix: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

/// Embedding service settings; every field may also come from flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedSection {
    pub base_url: Option<String>,
    pub model_name: Option<String>,
    pub batch_size: Option<usize>,
    pub max_retries: Option<u32>,
    pub timeout: Option<f64>,
    pub max_parallel_requests: Option<usize>,
    #[serde(serialize_with = "redact")]
    pub api_key: Option<String>,
    pub max_chars: Option<usize>,
    pub backoff_base: Option<f64>,
}

fn redact<S: Serializer>(value: &Option<String>, s: S) -> Result<S::Ok, S::Error> {
    match value {
        Some(_) => s.serialize_some(REDACTED),
        None => s.serialize_none(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSection {
    pub method: EnsembleMethod,
    pub dedup: bool,
    /// Defaults to `mining.num_negatives`.
    pub num_negatives: Option<usize>,
    pub runs: Vec<RunRef>,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        EnsembleSection {
            method: EnsembleMethod::CrossSample,
            dedup: false,
            num_negatives: None,
            runs: Vec::new(),
        }
    }
}

/// A mining output directory (or dataset file) taking part in an ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRef {
    pub path: PathBuf,
    /// Defaults to the teacher recorded in the run's `stats.json`.
    #[serde(default)]
    pub teacher: Option<String>,
    /// 1 = most accurate. Defaults to the run's position in the list.
    #[serde(default)]
    pub accuracy_rank: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    pub bins: usize,
    pub temperature: f64,
    pub top_n: usize,
    pub formats: Vec<ReportFormat>,
    /// Datasets or run directories to analyze.
    pub inputs: Vec<PathBuf>,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection {
            bins: DEFAULT_BINS,
            temperature: DEFAULT_LOSS_TEMPERATURE,
            top_n: DEFAULT_TOP_N,
            formats: vec![ReportFormat::Csv, ReportFormat::Svg, ReportFormat::Json],
            inputs: Vec::new(),
        }
    }
}

/// Sweep settings. The non-swept mining fields come from `mining`, the
/// output directory from `paths.out_dir`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub method_family: MethodFamily,
    pub grid: Grid,
    #[serde(default = "yes")]
    pub emit_datasets: bool,
    #[serde(default = "default_loss_temperature")]
    pub loss_temperature: f64,
}

fn yes() -> bool {
    true
}

fn default_loss_temperature() -> f64 {
    DEFAULT_LOSS_TEMPERATURE
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))
    }

    /// Mining settings with the top-level seed applied.
    pub fn mining_config(&self) -> MiningConfig {
        let mut m = self.mining;
        if let Some(seed) = self.seed {
            m.seed = seed;
        }
        m
    }

    pub fn require_path(&self, value: &Option<PathBuf>, key: &str) -> Result<PathBuf, CliError> {
        value
            .clone()
            .ok_or_else(|| CliError::invalid(format!("missing config key paths.{key} (or --{})", key.replace('_', "-"))))
    }

    pub fn out_dir(&self) -> Result<PathBuf, CliError> {
        self.require_path(&self.paths.out_dir, "out_dir")
    }

    /// Applies `NEGMINER_BASE_URL` and `NEGMINER_API_KEY`. Flags applied afterwards still win.
    pub fn apply_env(&mut self) {
        if let Some(url) = std::env::var(ENV_BASE_URL).ok().filter(|v| !v.is_empty()) {
            self.embed.base_url = Some(url);
        }
        if let Some(key) = std::env::var(ENV_API_KEY).ok().filter(|v| !v.is_empty()) {
            self.embed.api_key = Some(key);
        }
    }

    /// Service settings; fails naming the first missing key.
    pub fn embed_config(&self) -> Result<EmbedServiceConfig, CliError> {
        let e = &self.embed;
        let base_url = e
            .base_url
            .clone()
            .ok_or_else(|| CliError::invalid(format!("missing config key embed.base_url (or --base-url, or {ENV_BASE_URL})")))?;
        let model = e
            .model_name
            .clone()
            .ok_or_else(|| CliError::invalid("missing config key embed.model_name (or --model)"))?;
        let mut c = EmbedServiceConfig::new(base_url, model);
        c.batch_size = e.batch_size.unwrap_or(c.batch_size);
        c.max_retries = e.max_retries.unwrap_or(c.max_retries);
        c.timeout = e.timeout.unwrap_or(c.timeout);
        c.max_parallel_requests = e.max_parallel_requests.unwrap_or(c.max_parallel_requests);
        c.api_key = e.api_key.clone();
        c.max_chars = e.max_chars.or(c.max_chars);
        c.backoff_base = e.backoff_base.unwrap_or(c.backoff_base);
        c.validate()?;
        Ok(c)
    }

    pub fn sweep_spec(&self) -> Result<SweepSpec, CliError> {
        let s = self
            .sweep
            .as_ref()
            .ok_or_else(|| CliError::invalid("missing config key sweep (or --family with --grid/--range)"))?;
        Ok(SweepSpec {
            method_family: s.method_family,
            grid: s.grid.clone(),
            shared: self.mining_config(),
            emit_datasets: s.emit_datasets,
            out_dir: Some(self.out_dir()?),
            loss_temperature: s.loss_temperature,
        })
    }

    /// The configuration as echoed into manifests, secrets replaced.
    pub fn redacted_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
