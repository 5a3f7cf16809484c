use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use negminer::analysis::ReportFormat;
use negminer::ensemble::EnsembleMethod;
use negminer::mining::{
    MiningMethod, Sampling, DEFAULT_ABSOLUTE_MARGIN, DEFAULT_MAX_SCORE, DEFAULT_N_SHIFT, DEFAULT_PERCENTAGE_MARGIN,
};
use negminer::sweep::{Grid, MethodFamily};
use negminer::topk::Metric;

use crate::config::{RunConfig, RunRef, SweepSection};
use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "negminer", version, about = "Hard-negative mining for embedding fine-tuning")]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Print a machine-readable summary on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    /// Worker threads for search and mining (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Embed the corpus and the (prefixed) queries through the embedding service.
    Embed(EmbedArgs),
    /// Search candidates, filter false negatives, select negatives.
    Mine(MineArgs),
    /// Combine datasets mined by several teachers.
    Ensemble(EnsembleArgs),
    /// Score distributions and teacher overlap reports.
    Analyze(AnalyzeArgs),
    /// Mine over a grid of one method parameter.
    Sweep(SweepArgs),
    /// Check corpus, pairs and matrices for consistency.
    Validate(ValidateArgs),
}

#[derive(Debug, Default, Args)]
pub struct PathArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    #[arg(long)]
    pub query_matrix: Option<PathBuf>,
    #[arg(long)]
    pub corpus_matrix: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[command(flatten)]
    pub paths: PathArgs,
    #[arg(long)]
    pub base_url: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_retries: Option<u32>,
    /// Per-request timeout in seconds.
    #[arg(long)]
    pub timeout: Option<f64>,
    #[arg(long)]
    pub max_parallel_requests: Option<usize>,
    #[arg(long)]
    pub max_chars: Option<usize>,
    /// Task definition placed before each query as "<instruction>: <query>".
    #[arg(long)]
    pub instruction: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodName {
    Naive,
    Shifted,
    Abs,
    Marginpos,
    Percpos,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SamplingName {
    TakeTop,
    SampledTopk,
    Top1Sampled,
}

#[derive(Debug, Default, Args)]
pub struct MiningArgs {
    /// Mining method; its parameter comes from --param or the method default.
    #[arg(long, value_enum)]
    pub method: Option<MethodName>,
    /// Parameter of the method: n_shift, max_score, absolute_margin or percentage_margin.
    #[arg(long)]
    pub param: Option<f64>,
    #[arg(long)]
    pub num_negatives: Option<usize>,
    #[arg(long, value_enum)]
    pub sampling: Option<SamplingName>,
    #[arg(long)]
    pub pool_k: Option<usize>,
    #[arg(long)]
    pub sampling_temperature: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Candidates retrieved per query before filtering.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub metric: Option<Metric>,
    #[arg(long)]
    pub chunk_rows: Option<usize>,
    #[arg(long)]
    pub teacher: Option<String>,
    #[arg(long)]
    pub pool_depth: Option<usize>,
}

#[derive(Debug, Args)]
pub struct MineArgs {
    #[command(flatten)]
    pub paths: PathArgs,
    #[command(flatten)]
    pub mining: MiningArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EnsembleName {
    Cross,
    Intra,
}

#[derive(Debug, Args)]
pub struct EnsembleArgs {
    /// Mining output directories or dataset files, one per teacher.
    pub runs: Vec<PathBuf>,
    #[arg(long, value_enum)]
    pub method: Option<EnsembleName>,
    #[arg(long)]
    pub dedup: bool,
    #[arg(long)]
    pub num_negatives: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Accuracy ranks of the runs, in argument order (1 = best).
    #[arg(long, value_delimiter = ',')]
    pub accuracy_ranks: Vec<usize>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Datasets or run directories. Two or more also produce a Jaccard matrix.
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub bins: Option<usize>,
    /// Temperature of the per-example loss.
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Negatives per example compared in the Jaccard matrix.
    #[arg(long)]
    pub top_n: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub formats: Vec<ReportFormat>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FamilyName {
    Shifted,
    Abs,
    Marginpos,
    Percpos,
    SampledTopk,
    Top1Sampled,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub paths: PathArgs,
    #[command(flatten)]
    pub mining: MiningArgs,
    #[arg(long, value_enum)]
    pub family: Option<FamilyName>,
    /// Explicit grid values, comma separated.
    #[arg(long, value_delimiter = ',', conflicts_with = "range")]
    pub grid: Vec<f64>,
    /// Inclusive range as start:stop:step.
    #[arg(long)]
    pub range: Option<String>,
    /// Only write the summary, not one dataset per grid point.
    #[arg(long)]
    pub no_datasets: bool,
    #[arg(long)]
    pub loss_temperature: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[command(flatten)]
    pub paths: PathArgs,
    #[arg(long)]
    pub metric: Option<Metric>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, value: Option<T>) {
    if value.is_some() {
        *slot = value;
    }
}

impl PathArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        let p = &mut cfg.paths;
        set_opt(&mut p.corpus, self.corpus.clone());
        set_opt(&mut p.pairs, self.pairs.clone());
        set_opt(&mut p.query_matrix, self.query_matrix.clone());
        set_opt(&mut p.corpus_matrix, self.corpus_matrix.clone());
        set_opt(&mut p.out_dir, self.out_dir.clone());
    }
}

fn method_for(name: MethodName, param: Option<f64>) -> Result<MiningMethod, CliError> {
    Ok(match name {
        MethodName::Naive => {
            if param.is_some() {
                return Err(CliError::invalid("--param has no meaning for --method naive"));
            }
            MiningMethod::NaiveTopK
        }
        MethodName::Shifted => {
            let v = param.unwrap_or(DEFAULT_N_SHIFT as f64);
            if v < 0.0 || v.fract() != 0.0 {
                return Err(CliError::invalid(format!("n_shift must be a non-negative integer, got {v}")));
            }
            MiningMethod::TopKShifted { n_shift: v as usize }
        }
        MethodName::Abs => MiningMethod::TopKAbs {
            max_score: param.unwrap_or(DEFAULT_MAX_SCORE),
        },
        MethodName::Marginpos => MiningMethod::TopKMarginPos {
            absolute_margin: param.unwrap_or(DEFAULT_ABSOLUTE_MARGIN),
        },
        MethodName::Percpos => MiningMethod::TopKPercPos {
            percentage_margin: param.unwrap_or(DEFAULT_PERCENTAGE_MARGIN),
        },
    })
}

fn current_method_name(m: &MiningMethod) -> MethodName {
    match m {
        MiningMethod::NaiveTopK => MethodName::Naive,
        MiningMethod::TopKShifted { .. } => MethodName::Shifted,
        MiningMethod::TopKAbs { .. } => MethodName::Abs,
        MiningMethod::TopKMarginPos { .. } => MethodName::Marginpos,
        MiningMethod::TopKPercPos { .. } => MethodName::Percpos,
    }
}

impl MiningArgs {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<(), CliError> {
        match (self.method, self.param) {
            (Some(name), param) => cfg.mining.method = method_for(name, param)?,
            (None, Some(param)) => cfg.mining.method = method_for(current_method_name(&cfg.mining.method), Some(param))?,
            (None, None) => {}
        }
        let m = &mut cfg.mining;
        set(&mut m.num_negatives, self.num_negatives);
        set(&mut m.sampling_temperature, self.sampling_temperature);
        let current_pool = match m.sampling {
            Sampling::SampledTopK { pool_k } | Sampling::Top1PlusSampled { pool_k } => Some(pool_k),
            Sampling::TakeTop => None,
        };
        let pool_k = self.pool_k.or(current_pool);
        let name = self.sampling.or(match m.sampling {
            Sampling::TakeTop => None,
            Sampling::SampledTopK { .. } => Some(SamplingName::SampledTopk),
            Sampling::Top1PlusSampled { .. } => Some(SamplingName::Top1Sampled),
        });
        m.sampling = match name {
            None if self.pool_k.is_some() => return Err(CliError::invalid("--pool-k needs --sampling sampled-topk or top1-sampled")),
            None | Some(SamplingName::TakeTop) => Sampling::TakeTop,
            Some(SamplingName::SampledTopk) => Sampling::SampledTopK {
                pool_k: pool_k.ok_or_else(|| CliError::invalid("--sampling sampled-topk needs --pool-k"))?,
            },
            Some(SamplingName::Top1Sampled) => Sampling::Top1PlusSampled {
                pool_k: pool_k.ok_or_else(|| CliError::invalid("--sampling top1-sampled needs --pool-k"))?,
            },
        };
        set_opt(&mut cfg.seed, self.seed);
        let r = &mut cfg.run;
        set(&mut r.k_candidates, self.k);
        set(&mut r.metric, self.metric);
        set(&mut r.chunk_rows, self.chunk_rows);
        set(&mut r.teacher, self.teacher.clone());
        set(&mut r.pool_depth, self.pool_depth);
        Ok(())
    }
}

impl EmbedArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        self.paths.apply(cfg);
        let e = &mut cfg.embed;
        set_opt(&mut e.base_url, self.base_url.clone());
        set_opt(&mut e.model_name, self.model.clone());
        set_opt(&mut e.batch_size, self.batch_size);
        set_opt(&mut e.max_retries, self.max_retries);
        set_opt(&mut e.timeout, self.timeout);
        set_opt(&mut e.max_parallel_requests, self.max_parallel_requests);
        set_opt(&mut e.max_chars, self.max_chars);
        set_opt(&mut cfg.instruction, self.instruction.clone());
    }
}

impl EnsembleArgs {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<(), CliError> {
        let e = &mut cfg.ensemble;
        if !self.runs.is_empty() {
            e.runs = self
                .runs
                .iter()
                .map(|p| RunRef {
                    path: p.clone(),
                    teacher: None,
                    accuracy_rank: None,
                })
                .collect();
        }
        if !self.accuracy_ranks.is_empty() {
            if self.accuracy_ranks.len() != e.runs.len() {
                return Err(CliError::invalid(format!(
                    "{} accuracy ranks for {} runs",
                    self.accuracy_ranks.len(),
                    e.runs.len()
                )));
            }
            for (run, &rank) in e.runs.iter_mut().zip(&self.accuracy_ranks) {
                run.accuracy_rank = Some(rank);
            }
        }
        set(
            &mut e.method,
            self.method.map(|m| match m {
                EnsembleName::Cross => EnsembleMethod::CrossSample,
                EnsembleName::Intra => EnsembleMethod::IntraSample,
            }),
        );
        e.dedup |= self.dedup;
        set_opt(&mut e.num_negatives, self.num_negatives);
        set_opt(&mut cfg.seed, self.seed);
        set_opt(&mut cfg.paths.out_dir, self.out_dir.clone());
        Ok(())
    }
}

impl AnalyzeArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        let a = &mut cfg.analysis;
        if !self.inputs.is_empty() {
            a.inputs = self.inputs.clone();
        }
        if !self.formats.is_empty() {
            a.formats = self.formats.clone();
        }
        set(&mut a.bins, self.bins);
        set(&mut a.temperature, self.temperature);
        set(&mut a.top_n, self.top_n);
        set_opt(&mut cfg.paths.out_dir, self.out_dir.clone());
    }
}

fn parse_range(s: &str) -> Result<Grid, CliError> {
    let parts: Vec<&str> = s.split(':').collect();
    let nums: Result<Vec<f64>, _> = parts.iter().map(|p| p.trim().parse::<f64>()).collect();
    match nums {
        Ok(v) if v.len() == 3 => Ok(Grid::Range {
            start: v[0],
            stop_inclusive: v[1],
            step: v[2],
        }),
        _ => Err(CliError::invalid(format!("--range expects start:stop:step, got {s:?}"))),
    }
}

impl SweepArgs {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<(), CliError> {
        self.paths.apply(cfg);
        self.mining.apply(cfg)?;
        let grid = if !self.grid.is_empty() {
            Some(Grid::Values(self.grid.clone()))
        } else {
            self.range.as_deref().map(parse_range).transpose()?
        };
        let family = self.family.map(|f| match f {
            FamilyName::Shifted => MethodFamily::Shifted,
            FamilyName::Abs => MethodFamily::Abs,
            FamilyName::Marginpos => MethodFamily::MarginPos,
            FamilyName::Percpos => MethodFamily::PercPos,
            FamilyName::SampledTopk => MethodFamily::SampledTopk,
            FamilyName::Top1Sampled => MethodFamily::Top1Sampled,
        });
        match (&mut cfg.sweep, family, grid) {
            (Some(s), family, grid) => {
                set(&mut s.method_family, family);
                set(&mut s.grid, grid);
            }
            (None, Some(method_family), Some(grid)) => {
                cfg.sweep = Some(SweepSection {
                    method_family,
                    grid,
                    emit_datasets: true,
                    loss_temperature: negminer::analysis::DEFAULT_LOSS_TEMPERATURE,
                })
            }
            (None, _, _) => return Err(CliError::invalid("missing config key sweep (or --family with --grid/--range)")),
        }
        let s = cfg.sweep.as_mut().unwrap();
        if self.no_datasets {
            s.emit_datasets = false;
        }
        set(&mut s.loss_temperature, self.loss_temperature);
        Ok(())
    }
}

impl ValidateArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        self.paths.apply(cfg);
        set(&mut cfg.run.metric, self.metric);
    }
}
