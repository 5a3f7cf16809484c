//! Diagnostics over mined datasets: teacher overlap (Jaccard) and the
//! score / margin / loss distributions of a train set.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::hash::Hash;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ensemble::{align_runs, TeacherRun};
use crate::error::{Error, Result};
use crate::store::MinedExample;

pub const DEFAULT_LOSS_TEMPERATURE: f64 = 0.05;
pub const DEFAULT_TOP_N: usize = 4;
pub const DEFAULT_BINS: usize = 50;

/// min / max / mean / p50 / p95 of a sample; all `None` when empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub mean: Option<f64>,
    pub p50: Option<f64>,
    pub p95: Option<f64>,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Summary {
                count: 0,
                min: None,
                max: None,
                mean: None,
                p50: None,
                p95: None,
            };
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        // nearest-rank percentile
        let pct = |p: f64| sorted[((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1];
        Summary {
            count: values.len(),
            min: Some(sorted[0]),
            max: Some(sorted[sorted.len() - 1]),
            mean: Some(values.iter().sum::<f64>() / values.len() as f64),
            p50: Some(pct(0.5)),
            p95: Some(pct(0.95)),
        }
    }
}

/// `|a ∩ b| / |a ∪ b|`, with two empty sets counted as identical (1.0).
pub fn jaccard<T: Eq + Hash>(a: &HashSet<T>, b: &HashSet<T>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JaccardMatrix {
    pub teacher_names: Vec<String>,
    /// Row-major, symmetric, unit diagonal.
    pub values: Vec<Vec<f64>>,
    pub top_n: usize,
    pub examples: usize,
    /// Example/teacher-pair combinations where both sides had no negatives.
    pub both_empty: usize,
}

/// Mean per-example Jaccard similarity between the first `top_n` negatives of each pair of runs.
pub fn jaccard_matrix(runs: &[TeacherRun], top_n: usize) -> Result<JaccardMatrix> {
    if runs.is_empty() {
        return Err(Error::Config("no runs to compare".into()));
    }
    if top_n == 0 {
        return Err(Error::Config("top_n must be at least 1".into()));
    }
    let aligned = align_runs(runs)?;
    let r = runs.len();
    let mut sums = vec![vec![0.0f64; r]; r];
    let mut both_empty = 0;
    for row in &aligned {
        let sets: Vec<HashSet<&str>> = row.iter().map(|ex| ex.negative_ids().take(top_n).collect()).collect();
        for i in 0..r {
            for j in i + 1..r {
                if sets[i].is_empty() && sets[j].is_empty() {
                    both_empty += 1;
                }
                sums[i][j] += jaccard(&sets[i], &sets[j]);
            }
        }
    }
    let n = aligned.len();
    let mut values = vec![vec![0.0f64; r]; r];
    for i in 0..r {
        values[i][i] = 1.0;
        for j in i + 1..r {
            let mean = if n == 0 { 1.0 } else { sums[i][j] / n as f64 };
            values[i][j] = mean;
            values[j][i] = mean;
        }
    }
    Ok(JaccardMatrix {
        teacher_names: runs.iter().map(|r| r.teacher_name.clone()).collect(),
        values,
        top_n,
        examples: n,
        both_empty,
    })
}

/// Contrastive cross-entropy of one positive against `neg_scores` at temperature `temperature`:
/// `-log(exp(pos/τ) / (exp(pos/τ) + Σ exp(neg/τ)))`, evaluated with the max logit subtracted.
pub fn infonce_loss(pos_score: f64, neg_scores: &[f64], temperature: f64) -> f64 {
    let pos = pos_score / temperature;
    let max = neg_scores.iter().map(|s| s / temperature).fold(pos, f64::max);
    let denom: f64 = (pos - max).exp() + neg_scores.iter().map(|s| (s / temperature - max).exp()).sum::<f64>();
    denom.ln() - (pos - max)
}

/// Largest loss possible when all `k` negatives score at most `threshold`.
pub fn infonce_bound(pos_score: f64, threshold: f64, k: usize, temperature: f64) -> f64 {
    (k as f64 * (-(pos_score - threshold) / temperature).exp()).ln_1p()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub name: String,
    /// `bins + 1` uniform edges; the last bin is closed on the right.
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub summary: Summary,
}

impl Histogram {
    /// Bins `values` uniformly over `range`, or over the data range when `None`.
    pub fn build(name: &str, values: &[f64], bins: usize, range: Option<(f64, f64)>) -> Self {
        let bins = bins.max(1);
        let summary = Summary::of(values);
        let (lo, hi) = range.unwrap_or(match (summary.min, summary.max) {
            (Some(lo), Some(hi)) if hi > lo => (lo, hi),
            (Some(v), _) => (v - 0.5, v + 0.5),
            _ => (0.0, 1.0),
        });
        let width = (hi - lo) / bins as f64;
        let mut bin_edges: Vec<f64> = (0..bins).map(|i| lo + i as f64 * width).collect();
        bin_edges.push(hi);
        let mut counts = vec![0u64; bins];
        for &v in values {
            // values outside a declared range land in the edge bins
            let idx = ((v - lo) / width).floor();
            let idx = if idx.is_nan() { 0 } else { (idx.max(0.0) as usize).min(bins - 1) };
            counts[idx] += 1;
        }
        Histogram {
            name: name.to_string(),
            bin_edges,
            counts,
            summary,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HistogramOptions {
    pub bins: usize,
    /// Temperature of the per-example loss.
    pub temperature: f64,
}

impl Default for HistogramOptions {
    fn default() -> Self {
        HistogramOptions {
            bins: DEFAULT_BINS,
            temperature: DEFAULT_LOSS_TEMPERATURE,
        }
    }
}

/// Distributions of a mined dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramReport {
    pub temperature: f64,
    pub bins: usize,
    pub examples: usize,
    pub positive_scores: Histogram,
    pub negative_scores: Histogram,
    /// Positive score minus negative score, for every (positive, negative) pair.
    pub differences: Histogram,
    pub losses: Histogram,
}

impl HistogramReport {
    pub fn series(&self) -> [&Histogram; 4] {
        [&self.positive_scores, &self.negative_scores, &self.differences, &self.losses]
    }
}

pub fn histogram_report(dataset: &[MinedExample], opts: &HistogramOptions) -> Result<HistogramReport> {
    if dataset.is_empty() {
        return Err(Error::Config("cannot build a report from an empty dataset".into()));
    }
    if !(opts.temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {}", opts.temperature)));
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    let mut diff = Vec::new();
    let mut loss = Vec::with_capacity(dataset.len());
    for ex in dataset {
        let negs: Vec<f64> = ex.negatives.iter().map(|n| n.score).collect();
        pos.extend(ex.positives.iter().map(|p| p.score));
        neg.extend_from_slice(&negs);
        for p in &ex.positives {
            diff.extend(negs.iter().map(|n| p.score - n));
        }
        loss.push(infonce_loss(ex.pos_score, &negs, opts.temperature));
    }
    Ok(HistogramReport {
        temperature: opts.temperature,
        bins: opts.bins,
        examples: dataset.len(),
        positive_scores: Histogram::build("positive_scores", &pos, opts.bins, None),
        negative_scores: Histogram::build("negative_scores", &neg, opts.bins, None),
        differences: Histogram::build("differences", &diff, opts.bins, None),
        losses: Histogram::build("losses", &loss, opts.bins, None),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Svg,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "svg" => Ok(ReportFormat::Svg),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::Config(format!("unknown report format {other:?}"))),
        }
    }
}

fn write_file(path: PathBuf, body: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(())
}

fn histogram_csv(h: &Histogram) -> String {
    let mut out = String::from("bin_start,bin_end,count\n");
    for (i, c) in h.counts.iter().enumerate() {
        writeln!(out, "{},{},{}", h.bin_edges[i], h.bin_edges[i + 1], c).unwrap();
    }
    out
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

fn histogram_svg(h: &Histogram, subtitle: &str) -> String {
    const W: f64 = 640.0;
    const H: f64 = 360.0;
    const LEFT: f64 = 50.0;
    const RIGHT: f64 = 20.0;
    const TOP: f64 = 40.0;
    const BOTTOM: f64 = 50.0;
    let plot_w = W - LEFT - RIGHT;
    let plot_h = H - TOP - BOTTOM;
    let max = h.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let bar_w = plot_w / h.counts.len() as f64;

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<text x="{LEFT}" y="20" font-family="sans-serif" font-size="14">{} ({})</text>"#,
        xml_escape(&h.name),
        xml_escape(subtitle)
    )
    .unwrap();
    for (i, &c) in h.counts.iter().enumerate() {
        let bh = c as f64 / max * plot_h;
        writeln!(
            s,
            r##"<rect x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="#4c72b0"><title>[{}, {}): {}</title></rect>"##,
            LEFT + i as f64 * bar_w,
            TOP + plot_h - bh,
            bar_w.max(0.5) * 0.95,
            bh,
            h.bin_edges[i],
            h.bin_edges[i + 1],
            c
        )
        .unwrap();
    }
    let axis_y = TOP + plot_h;
    writeln!(
        s,
        r#"<line x1="{LEFT}" y1="{axis_y}" x2="{}" y2="{axis_y}" stroke="black"/>"#,
        LEFT + plot_w
    )
    .unwrap();
    let first = h.bin_edges.first().copied().unwrap_or(0.0);
    let last = h.bin_edges.last().copied().unwrap_or(0.0);
    writeln!(
        s,
        r#"<text x="{LEFT}" y="{}" font-family="sans-serif" font-size="11">{first:.4}</text>"#,
        axis_y + 15.0
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">{last:.4}</text>"#,
        LEFT + plot_w,
        axis_y + 15.0
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="{LEFT}" y="{}" font-family="sans-serif" font-size="11">n={} mean={} p50={} p95={}</text>"#,
        axis_y + 35.0,
        h.summary.count,
        fmt_opt(h.summary.mean),
        fmt_opt(h.summary.p50),
        fmt_opt(h.summary.p95)
    )
    .unwrap();
    s.push_str("</svg>\n");
    s
}

#[derive(Serialize)]
struct SeriesSummary<'a> {
    range: [f64; 2],
    #[serde(flatten)]
    summary: &'a Summary,
}

#[derive(Serialize)]
struct ReportSummary<'a> {
    temperature: f64,
    bins: usize,
    examples: usize,
    positive_scores: SeriesSummary<'a>,
    negative_scores: SeriesSummary<'a>,
    differences: SeriesSummary<'a>,
    losses: SeriesSummary<'a>,
}

fn series_summary(h: &Histogram) -> SeriesSummary<'_> {
    SeriesSummary {
        range: [h.bin_edges[0], h.bin_edges[h.bin_edges.len() - 1]],
        summary: &h.summary,
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes `<series>.csv`, `<series>.svg` and `summary.json` as requested. Returns the written paths.
pub fn emit_report(report: &HistogramReport, out_dir: impl AsRef<Path>, formats: &[ReportFormat]) -> Result<Vec<PathBuf>> {
    let dir = out_dir.as_ref();
    ensure_dir(dir)?;
    let mut written = Vec::new();
    if formats.contains(&ReportFormat::Csv) {
        for h in report.series() {
            write_file(dir.join(format!("{}.csv", h.name)), &histogram_csv(h), &mut written)?;
        }
    }
    if formats.contains(&ReportFormat::Svg) {
        let subtitle = format!("{} examples, tau={}", report.examples, report.temperature);
        for h in report.series() {
            write_file(dir.join(format!("{}.svg", h.name)), &histogram_svg(h, &subtitle), &mut written)?;
        }
    }
    if formats.contains(&ReportFormat::Json) {
        let summary = ReportSummary {
            temperature: report.temperature,
            bins: report.bins,
            examples: report.examples,
            positive_scores: series_summary(&report.positive_scores),
            negative_scores: series_summary(&report.negative_scores),
            differences: series_summary(&report.differences),
            losses: series_summary(&report.losses),
        };
        let mut body = serde_json::to_string_pretty(&summary)?;
        body.push('\n');
        write_file(dir.join("summary.json"), &body, &mut written)?;
    }
    Ok(written)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn jaccard_svg(m: &JaccardMatrix) -> String {
    const CELL: f64 = 60.0;
    const LABEL: f64 = 160.0;
    let r = m.teacher_names.len() as f64;
    let w = LABEL + CELL * r + 10.0;
    let h = LABEL + CELL * r + 10.0;
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    for (i, name) in m.teacher_names.iter().enumerate() {
        let y = LABEL + CELL * (i as f64 + 0.5);
        writeln!(
            s,
            r#"<text x="{}" y="{y}" font-family="sans-serif" font-size="11" text-anchor="end">{}</text>"#,
            LABEL - 5.0,
            xml_escape(name)
        )
        .unwrap();
        let x = LABEL + CELL * (i as f64 + 0.5);
        writeln!(
            s,
            r#"<text x="{x}" y="{}" font-family="sans-serif" font-size="11" text-anchor="start" transform="rotate(-60 {x} {})">{}</text>"#,
            LABEL - 5.0,
            LABEL - 5.0,
            xml_escape(name)
        )
        .unwrap();
    }
    for (i, row) in m.values.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let shade = (255.0 - v.clamp(0.0, 1.0) * 200.0).round() as u8;
            let (x, y) = (LABEL + CELL * j as f64, LABEL + CELL * i as f64);
            writeln!(
                s,
                r#"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="rgb({shade},{shade},255)" stroke="white"/>"#
            )
            .unwrap();
            writeln!(
                s,
                r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">{v:.4}</text>"#,
                x + CELL / 2.0,
                y + CELL / 2.0 + 4.0
            )
            .unwrap();
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `jaccard.csv`, `jaccard.svg` and `jaccard.json` as requested.
pub fn emit_jaccard(matrix: &JaccardMatrix, out_dir: impl AsRef<Path>, formats: &[ReportFormat]) -> Result<Vec<PathBuf>> {
    let dir = out_dir.as_ref();
    ensure_dir(dir)?;
    let mut written = Vec::new();
    if formats.contains(&ReportFormat::Csv) {
        let mut body = String::from("teacher");
        for name in &matrix.teacher_names {
            body.push(',');
            body.push_str(&csv_field(name));
        }
        body.push('\n');
        for (name, row) in matrix.teacher_names.iter().zip(&matrix.values) {
            body.push_str(&csv_field(name));
            for v in row {
                write!(body, ",{v}").unwrap();
            }
            body.push('\n');
        }
        write_file(dir.join("jaccard.csv"), &body, &mut written)?;
    }
    if formats.contains(&ReportFormat::Svg) {
        write_file(dir.join("jaccard.svg"), &jaccard_svg(matrix), &mut written)?;
    }
    if formats.contains(&ReportFormat::Json) {
        let mut body = serde_json::to_string_pretty(matrix)?;
        body.push('\n');
        write_file(dir.join("jaccard.json"), &body, &mut written)?;
    }
    Ok(written)
}
