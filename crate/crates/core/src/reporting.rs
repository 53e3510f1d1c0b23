//! Run directories, the output manifest, tables, figures and the audit.
//!
//! Output tree:
//!
//! ```text
//! manifest.json
//! runs/<run_id>/{config.json, predictions.csv, weights.cbor, losses.csv, timing.json}
//! teachers/<teacher_id>/{weights.cbor, losses.csv}
//! summaries/<matrix>.{json, csv, md, svg}
//! splits/*.json
//! ```
//!
//! Every digest is SHA-256 over the exact file bytes. Timing files and the
//! manifest timestamps are informational and never compared.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::experiments::{
    sampler_deltas, sampler_deltas_csv, HypothesisState, HypothesisStatus, MatrixKind,
    MatrixResult, RunConfig, RunSummary,
};
use crate::losses::HintAdapter;
use crate::metrics::{summarize, MetricsReport};
use crate::model::{save_weights, Classifier, LateFusion};
use crate::nn::Parameterized;
use crate::trainer::{parse_predictions, LossTrajectory, RunResult};

pub const HASH_ALGORITHM: &str = "sha256";
const MANIFEST_FILE: &str = "manifest.json";
const RUN_FILES: [&str; 4] = [
    "config.json",
    "predictions.csv",
    "weights.cbor",
    "losses.csv",
];

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    Ok(sha256_hex(&bytes))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(format!("write {}", path.display()), e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(format!("read {}", path.display()), e))
}

/// Trained parameters of one run.
pub enum WeightsSource {
    Classifier(Box<Classifier>, Option<HintAdapter>),
    Fusion(LateFusion),
}

fn save_classifier(path: &Path, m: &Classifier, adapter: Option<&HintAdapter>) -> Result<()> {
    let arch = serde_json::json!({"kind": "classifier", "backbone": m.config, "flags": m.flags});
    let mut owners: Vec<(&str, &dyn Parameterized)> = vec![("model", m)];
    if let Some(a) = adapter {
        owners.push(("hint_adapter", a));
    }
    save_weights(path, arch, &owners)
}

impl WeightsSource {
    fn save(&self, path: &Path) -> Result<()> {
        match self {
            WeightsSource::Classifier(m, adapter) => save_classifier(path, m, adapter.as_ref()),
            WeightsSource::Fusion(m) => {
                let arch = serde_json::json!({"kind": "late_fusion", "input_size": m.input_size});
                save_weights(path, arch, &[("model", m)])
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifestEntry {
    pub run_id: String,
    pub path: String,
    pub seed: u64,
    pub config_digest: String,
    pub split_digest: String,
    pub data_digest: String,
    /// File digests keyed by file name within the run directory.
    pub files: BTreeMap<String, String>,
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputManifest {
    pub hash_algorithm: String,
    pub runs: BTreeMap<String, RunManifestEntry>,
}

impl Default for OutputManifest {
    fn default() -> Self {
        Self {
            hash_algorithm: HASH_ALGORITHM.to_string(),
            runs: BTreeMap::new(),
        }
    }
}

impl OutputManifest {
    pub fn read(root: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&read_text(
            &root.join(MANIFEST_FILE),
        )?)?)
    }

    fn read_or_default(root: &Path) -> Result<Self> {
        if root.join(MANIFEST_FILE).exists() {
            Self::read(root)
        } else {
            Ok(Self::default())
        }
    }

    fn write(&self, root: &Path) -> Result<()> {
        write_file(
            &root.join(MANIFEST_FILE),
            serde_json::to_string_pretty(self)? + "\n",
        )
    }
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn run_dir(root: &Path, run_id: &str) -> PathBuf {
    root.join("runs").join(run_id)
}

/// Writes one run directory and returns its manifest entry.
pub fn write_run(
    root: &Path,
    config: &RunConfig,
    result: &RunResult,
    losses: &LossTrajectory,
    weights: &WeightsSource,
) -> Result<RunManifestEntry> {
    let dir = run_dir(root, &config.run_id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
    write_file(
        &dir.join("config.json"),
        serde_json::to_string_pretty(config)? + "\n",
    )?;
    write_file(&dir.join("predictions.csv"), result.predictions_csv())?;
    write_file(&dir.join("losses.csv"), losses.to_csv())?;
    weights.save(&dir.join("weights.cbor"))?;
    write_file(
        &dir.join("timing.json"),
        serde_json::to_string(&serde_json::json!({"wall_time_s": result.wall_time_s}))? + "\n",
    )?;
    let files = RUN_FILES
        .iter()
        .map(|f| Ok((f.to_string(), file_digest(&dir.join(f))?)))
        .collect::<Result<_>>()?;
    Ok(RunManifestEntry {
        run_id: config.run_id.clone(),
        path: format!("runs/{}", config.run_id),
        seed: config.train.seed,
        config_digest: config.digest(),
        split_digest: config.split_digest.clone(),
        data_digest: config.data_digest.clone(),
        files,
        timestamp: now(),
    })
}

pub fn write_teacher(
    root: &Path,
    id: &str,
    model: &Classifier,
    losses: &LossTrajectory,
) -> Result<()> {
    let dir = root.join("teachers").join(id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
    write_file(&dir.join("losses.csv"), losses.to_csv())?;
    save_classifier(&dir.join("weights.cbor"), model, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableFormat {
    Delimited,
    Markdown,
}

impl TableFormat {
    pub fn extension(self) -> &'static str {
        match self {
            TableFormat::Delimited => "csv",
            TableFormat::Markdown => "md",
        }
    }
}

fn cell(mean: f64, std: f64) -> String {
    format!("{mean:.3} ± {std:.3}")
}

fn check_complete(result: &MatrixResult) -> Result<()> {
    if result.specs.is_empty() {
        return Err(Error::Empty(format!("matrix {} has no specs", result.name)));
    }
    if let Some(s) = result.specs.iter().find(|s| s.runs.is_empty()) {
        return Err(Error::Empty(format!(
            "spec '{}' of {} has no runs",
            s.spec.name, result.name
        )));
    }
    Ok(())
}

/// One row per spec: name, role, then mean ± std of every metric, under a
/// support banner.
pub fn export_table(result: &MatrixResult, format: TableFormat) -> Result<String> {
    check_complete(result)?;
    let mut out = String::new();
    match format {
        TableFormat::Delimited => {
            out.push_str(&format!("# {}\n", result.support));
            let mut w = csv::Writer::from_writer(Vec::new());
            let mut header = vec!["spec", "role"];
            header.extend(MetricsReport::NAMES);
            w.write_record(&header)?;
            for s in &result.specs {
                let mut row = vec![s.spec.name.clone(), s.role.clone()];
                let (m, d) = (s.summary.mean.values(), s.summary.std.values());
                row.extend((0..8).map(|k| cell(m[k], d[k])));
                w.write_record(&row)?;
            }
            let bytes = w
                .into_inner()
                .map_err(|e| Error::InvalidInput(e.to_string()))?;
            out.push_str(std::str::from_utf8(&bytes).expect("utf-8 fields"));
        }
        TableFormat::Markdown => {
            out.push_str(&format!(
                "{}\n\n| spec | role | {} |\n",
                result.support,
                MetricsReport::NAMES.join(" | ")
            ));
            out.push_str(&format!("|{}\n", "---|".repeat(10)));
            for s in &result.specs {
                let (m, d) = (s.summary.mean.values(), s.summary.std.values());
                let cells: Vec<String> = (0..8).map(|k| cell(m[k], d[k])).collect();
                out.push_str(&format!(
                    "| {} | {} | {} |\n",
                    s.spec.name,
                    s.role,
                    cells.join(" | ")
                ));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedRow {
    pub spec: String,
    pub role: String,
    /// (mean, std) per metric, in table column order.
    pub values: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedTable {
    pub support: String,
    pub metrics: Vec<String>,
    pub rows: Vec<ParsedRow>,
}

pub fn parse_delimited_table(text: &str) -> Result<ParsedTable> {
    let (banner, body) = text
        .split_once('\n')
        .ok_or_else(|| Error::InvalidInput("table has no body".into()))?;
    let support = banner
        .strip_prefix("# ")
        .ok_or_else(|| Error::InvalidInput("table has no support banner".into()))?
        .to_string();
    let mut r = csv::Reader::from_reader(body.as_bytes());
    let metrics: Vec<String> = r.headers()?.iter().skip(2).map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let values = rec
            .iter()
            .skip(2)
            .map(|c| {
                let (m, s) = c
                    .split_once(" ± ")
                    .ok_or_else(|| Error::InvalidInput(format!("bad cell '{c}'")))?;
                let p = |v: &str| {
                    v.parse::<f64>()
                        .map_err(|_| Error::InvalidInput(format!("bad number '{v}'")))
                };
                Ok((p(m)?, p(s)?))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(ParsedRow {
            spec: rec.get(0).unwrap_or_default().to_string(),
            role: rec.get(1).unwrap_or_default().to_string(),
            values,
        });
    }
    Ok(ParsedTable {
        support,
        metrics,
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FigureKind {
    BarsWithPoints,
    ResampleStrip,
    GridHeatmap,
}

impl FigureKind {
    pub fn for_matrix(kind: MatrixKind) -> Self {
        match kind {
            MatrixKind::Resampled => FigureKind::ResampleStrip,
            MatrixKind::Grid => FigureKind::GridHeatmap,
            _ => FigureKind::BarsWithPoints,
        }
    }

    fn accepts(self, kind: MatrixKind) -> bool {
        match self {
            FigureKind::ResampleStrip => kind == MatrixKind::Resampled,
            FigureKind::GridHeatmap => kind == MatrixKind::Grid,
            FigureKind::BarsWithPoints => !matches!(kind, MatrixKind::Resampled | MatrixKind::Grid),
        }
    }
}

const BAR_METRICS: [&str; 3] = ["accuracy", "macro_f1", "balanced_accuracy"];
const BAR_COLORS: [&str; 3] = ["#4c72b0", "#dd8452", "#55a868"];

fn svg_open(w: f64, h: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"11\">\n<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Vertical 0..1 axis with gridlines at every 0.25.
fn y_axis(svg: &mut String, x0: f64, x1: f64, top: f64, height: f64) {
    for k in 0..=4 {
        let v = k as f64 / 4.0;
        let y = top + height * (1.0 - v);
        let _ = writeln!(
            svg,
            "<line x1=\"{x0:.1}\" y1=\"{y:.1}\" x2=\"{x1:.1}\" y2=\"{y:.1}\" stroke=\"#ddd\"/><text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{v:.2}</text>",
            x0 - 4.0,
            y + 4.0
        );
    }
}

/// Deterministic SVG for a matrix.
pub fn export_figure(result: &MatrixResult, kind: FigureKind) -> Result<String> {
    check_complete(result)?;
    if !kind.accepts(result.kind) {
        return Err(Error::InvalidInput(format!(
            "figure {kind:?} does not apply to {:?} matrix {}",
            result.kind, result.name
        )));
    }
    Ok(match kind {
        FigureKind::BarsWithPoints => bars_with_points(result),
        FigureKind::ResampleStrip => resample_strip(result),
        FigureKind::GridHeatmap => grid_heatmap(result)?,
    })
}

fn bars_with_points(result: &MatrixResult) -> String {
    let (left, top, plot_h, group_w) = (50.0, 40.0, 220.0, 120.0);
    let width = left + group_w * result.specs.len() as f64 + 20.0;
    let height = top + plot_h + 90.0;
    let mut svg = svg_open(width, height);
    let _ = writeln!(
        svg,
        "<text x=\"{left}\" y=\"20\" font-size=\"13\">{}</text>",
        escape(&result.name)
    );
    y_axis(&mut svg, left, width - 20.0, top, plot_h);
    for (g, s) in result.specs.iter().enumerate() {
        let gx = left + group_w * g as f64;
        let _ = writeln!(
            svg,
            "<g class=\"group\" data-spec=\"{}\">",
            escape(&s.spec.name)
        );
        for (k, metric) in BAR_METRICS.iter().enumerate() {
            let x = gx + 15.0 + 30.0 * k as f64;
            let mean = s.summary.mean.get(metric).unwrap_or(0.0);
            let h = plot_h * mean.clamp(0.0, 1.0);
            let _ = writeln!(
                svg,
                "<rect class=\"bar\" x=\"{x:.1}\" y=\"{:.1}\" width=\"24\" height=\"{h:.1}\" fill=\"{}\" opacity=\"0.8\"/>",
                top + plot_h - h,
                BAR_COLORS[k]
            );
            for (r, run) in s.runs.iter().enumerate() {
                let v = run.metrics.get(metric).unwrap_or(0.0).clamp(0.0, 1.0);
                let jitter = (r as f64 - (s.runs.len() as f64 - 1.0) / 2.0) * 3.0;
                let _ = writeln!(
                    svg,
                    "<circle class=\"point\" cx=\"{:.1}\" cy=\"{:.1}\" r=\"2.5\" fill=\"black\"/>",
                    x + 12.0 + jitter,
                    top + plot_h * (1.0 - v)
                );
            }
        }
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" transform=\"rotate(-30 {:.1} {:.1})\">{}</text>\n</g>",
            gx + 60.0,
            top + plot_h + 16.0,
            gx + 60.0,
            top + plot_h + 16.0,
            escape(&s.spec.name)
        );
    }
    for (k, metric) in BAR_METRICS.iter().enumerate() {
        let x = width - 150.0;
        let y = 14.0 + 12.0 * k as f64;
        let _ = writeln!(
            svg,
            "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"9\" height=\"9\" fill=\"{}\"/><text x=\"{:.1}\" y=\"{y:.1}\">{metric}</text>",
            y - 8.0,
            BAR_COLORS[k],
            x + 13.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn resample_strip(result: &MatrixResult) -> String {
    let (left, top, row_h, plot_w) = (170.0, 40.0, 28.0, 400.0);
    let height = top + row_h * result.specs.len() as f64 + 40.0;
    let width = left + plot_w + 30.0;
    let mut svg = svg_open(width, height);
    let _ = writeln!(
        svg,
        "<text x=\"{left}\" y=\"20\" font-size=\"13\">{}: balanced accuracy per resample</text>",
        escape(&result.name)
    );
    let bottom = top + row_h * result.specs.len() as f64;
    for k in 0..=4 {
        let v = k as f64 / 4.0;
        let x = left + plot_w * v;
        let _ = writeln!(
            svg,
            "<line x1=\"{x:.1}\" y1=\"{top:.1}\" x2=\"{x:.1}\" y2=\"{bottom:.1}\" stroke=\"#ddd\"/><text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{v:.2}</text>",
            bottom + 14.0
        );
    }
    for (i, s) in result.specs.iter().enumerate() {
        let y = top + row_h * (i as f64 + 0.5);
        let _ = writeln!(
            svg,
            "<g class=\"row\" data-spec=\"{}\"><text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>",
            escape(&s.spec.name),
            left - 8.0,
            y + 4.0,
            escape(&s.spec.name)
        );
        for (r, run) in s.runs.iter().enumerate() {
            let v = run.metrics.balanced_accuracy.clamp(0.0, 1.0);
            let dy = (r as f64 - (s.runs.len() as f64 - 1.0) / 2.0) * 2.0;
            let _ = writeln!(
                svg,
                "<circle class=\"point\" cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"#4c72b0\" opacity=\"0.7\"><title>{}</title></circle>",
                left + plot_w * v,
                y + dy,
                escape(&run.split_id)
            );
        }
        let m = left + plot_w * s.summary.mean.balanced_accuracy.clamp(0.0, 1.0);
        let _ = writeln!(
            svg,
            "<line class=\"mean\" x1=\"{m:.1}\" y1=\"{:.1}\" x2=\"{m:.1}\" y2=\"{:.1}\" stroke=\"black\" stroke-width=\"2\"/></g>",
            y - 9.0,
            y + 9.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn grid_heatmap(result: &MatrixResult) -> Result<String> {
    let cells = result.grid_cells()?;
    let (left, top, size) = (90.0, 50.0, 70.0);
    let width = left + size * cells.alphas.len() as f64 + 30.0;
    let height = top + size * cells.temperatures.len() as f64 + 50.0;
    let mut svg = svg_open(width, height);
    let _ = writeln!(
        svg,
        "<text x=\"{left}\" y=\"20\" font-size=\"13\">macro-F1 over (temperature, alpha)</text>"
    );
    for (i, t) in cells.temperatures.iter().enumerate() {
        let y = top + size * i as f64;
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">T={t}</text>",
            left - 6.0,
            y + size / 2.0 + 4.0
        );
        for (j, v) in cells.macro_f1[i].iter().enumerate() {
            let x = left + size * j as f64;
            let shade = (255.0 * (1.0 - v.clamp(0.0, 1.0))).round() as u8;
            let _ = writeln!(
                svg,
                "<rect class=\"cell\" x=\"{x:.1}\" y=\"{y:.1}\" width=\"{size}\" height=\"{size}\" fill=\"rgb({shade},{shade},255)\" stroke=\"white\"/><text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{v:.3}</text>",
                x + size / 2.0,
                y + size / 2.0 + 4.0
            );
        }
    }
    let bottom = top + size * cells.temperatures.len() as f64;
    for (j, a) in cells.alphas.iter().enumerate() {
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">alpha={a}</text>",
            left + size * (j as f64 + 0.5),
            bottom + 16.0
        );
    }
    let _ = writeln!(
        svg,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">alpha</text><text x=\"14\" y=\"{:.1}\" transform=\"rotate(-90 14 {:.1})\" text-anchor=\"middle\">temperature</text>",
        left + size * cells.alphas.len() as f64 / 2.0,
        bottom + 36.0,
        top + size * 1.5,
        top + size * 1.5
    );
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn summary_files(root: &Path, name: &str) -> [(PathBuf, &'static str); 4] {
    let dir = root.join("summaries");
    [
        (dir.join(format!("{name}.json")), "json"),
        (dir.join(format!("{name}.csv")), "csv"),
        (dir.join(format!("{name}.md")), "md"),
        (dir.join(format!("{name}.svg")), "svg"),
    ]
}

/// Tables, figure and any matrix-specific extras, keyed by file name.
fn render_summaries(result: &MatrixResult) -> Result<BTreeMap<String, String>> {
    let mut files = BTreeMap::new();
    let n = &result.name;
    files.insert(
        format!("{n}.csv"),
        export_table(result, TableFormat::Delimited)?,
    );
    files.insert(
        format!("{n}.md"),
        export_table(result, TableFormat::Markdown)?,
    );
    files.insert(
        format!("{n}.svg"),
        export_figure(result, FigureKind::for_matrix(result.kind))?,
    );
    match result.kind {
        MatrixKind::Grid => {
            files.insert(format!("{n}_cells.csv"), result.grid_cells()?.to_csv());
        }
        MatrixKind::SamplerControl => {
            files.insert(
                format!("{n}_deltas.csv"),
                sampler_deltas_csv(&sampler_deltas(result)?),
            );
        }
        _ => {}
    }
    Ok(files)
}

/// Writes the summaries of `result` and merges `entries` into the manifest.
pub fn persist_matrix(
    root: &Path,
    result: &MatrixResult,
    entries: &[RunManifestEntry],
) -> Result<()> {
    let dir = root.join("summaries");
    write_file(
        &summary_files(root, &result.name)[0].0,
        serde_json::to_string_pretty(result)? + "\n",
    )?;
    for (name, body) in render_summaries(result)? {
        write_file(&dir.join(name), body)?;
    }
    let mut manifest = OutputManifest::read_or_default(root)?;
    for e in entries {
        manifest.runs.insert(e.run_id.clone(), e.clone());
    }
    manifest.write(root)
}

/// Regenerates tables and figures from persisted summaries.
pub fn regenerate_reports(root: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for result in load_summaries(root)? {
        for (name, body) in render_summaries(&result)? {
            let p = root.join("summaries").join(name);
            write_file(&p, body)?;
            written.push(p);
        }
    }
    Ok(written)
}

pub fn load_summaries(root: &Path) -> Result<Vec<MatrixResult>> {
    let dir = root.join("summaries");
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Error::io(format!("list {}", dir.display()), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json") && !p.ends_with("hypotheses.json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| Ok(serde_json::from_str(&read_text(p)?)?))
        .collect()
}

pub fn hypotheses_markdown(statuses: &[HypothesisStatus]) -> String {
    let mut out = String::from(
        "Decision rules compare means; a tie never counts as support.\n\n| id | question | status | evidence |\n|---|---|---|---|\n",
    );
    for h in statuses {
        let status = match h.status {
            HypothesisState::TentativeFixedSplitOnly => "tentative (fixed split only)",
            HypothesisState::NotSupported => "not supported",
            HypothesisState::Supported => "supported",
        };
        let ev: Vec<String> = h
            .evidence
            .iter()
            .map(|c| {
                format!(
                    "{} ({:.3} vs {:.3}: {})",
                    c.description,
                    c.left,
                    c.right,
                    if c.holds { "yes" } else { "no" }
                )
            })
            .collect();
        out.push_str(&format!(
            "| {} | {} | {status} | {} |\n",
            h.id,
            h.question,
            ev.join("; ")
        ));
    }
    out
}

pub fn write_hypotheses(root: &Path, statuses: &[HypothesisStatus]) -> Result<()> {
    let dir = root.join("summaries");
    write_file(
        &dir.join("hypotheses.json"),
        serde_json::to_string_pretty(statuses)? + "\n",
    )?;
    write_file(&dir.join("hypotheses.md"), hypotheses_markdown(statuses))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct AuditReport {
    pub runs_checked: usize,
    pub summaries_checked: usize,
    pub failures: Vec<String>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Recomputes every digest, per-run metric, summary statistic and rendered
/// summary file under `root` and compares them with what is on disk.
pub fn audit(root: &Path) -> Result<AuditReport> {
    let mut report = AuditReport::default();
    let manifest = match OutputManifest::read(root) {
        Ok(m) => m,
        Err(_) => {
            report
                .failures
                .push(format!("missing {}", root.join(MANIFEST_FILE).display()));
            return Ok(report);
        }
    };
    if manifest.hash_algorithm != HASH_ALGORITHM {
        report.failures.push(format!(
            "unsupported hash algorithm {}",
            manifest.hash_algorithm
        ));
    }
    for (id, entry) in &manifest.runs {
        report.runs_checked += 1;
        let dir = root.join(&entry.path);
        for (file, want) in &entry.files {
            let p = dir.join(file);
            match file_digest(&p) {
                Ok(d) if &d == want => {}
                Ok(_) => report
                    .failures
                    .push(format!("run {id}: {file} digest mismatch")),
                Err(_) => report
                    .failures
                    .push(format!("run {id}: missing {}", p.display())),
            }
        }
        match read_text(&dir.join("config.json"))
            .and_then(|t| Ok(serde_json::from_str::<RunConfig>(&t)?))
        {
            Ok(c) if c.digest() == entry.config_digest && c.split_digest == entry.split_digest => {}
            Ok(_) => report
                .failures
                .push(format!("run {id}: config snapshot disagrees with manifest")),
            Err(e) => report
                .failures
                .push(format!("run {id}: unreadable config ({e})")),
        }
    }

    let summaries = match load_summaries(root) {
        Ok(s) => s,
        Err(e) => {
            report.failures.push(format!("unreadable summaries: {e}"));
            return Ok(report);
        }
    };
    for result in &summaries {
        report.summaries_checked += 1;
        audit_matrix(root, &manifest, result, &mut report.failures);
    }
    Ok(report)
}

fn audit_matrix(
    root: &Path,
    manifest: &OutputManifest,
    result: &MatrixResult,
    failures: &mut Vec<String>,
) {
    for s in &result.specs {
        let mut reports = Vec::new();
        for run in &s.runs {
            if !manifest.runs.contains_key(&run.run_id) {
                failures.push(format!(
                    "{}: run {} is not in the manifest",
                    result.name, run.run_id
                ));
                continue;
            }
            match recompute_run(root, run) {
                Ok(r) if r == *run => reports.push(r.metrics),
                Ok(_) => failures.push(format!(
                    "run {}: metrics differ from predictions",
                    run.run_id
                )),
                Err(e) => failures.push(format!("run {}: {e}", run.run_id)),
            }
        }
        match summarize(&reports) {
            Ok(sum) if reports.len() == s.runs.len() && sum == s.summary => {}
            Ok(_) => failures.push(format!(
                "{}: summary of '{}' is not reproduced",
                result.name, s.spec.name
            )),
            Err(e) => failures.push(format!("{}: '{}' {e}", result.name, s.spec.name)),
        }
    }
    match render_summaries(result) {
        Ok(files) => {
            for (name, want) in files {
                let p = root.join("summaries").join(&name);
                match fs::read(&p) {
                    Ok(bytes) if bytes == want.as_bytes() => {}
                    Ok(_) => failures.push(format!(
                        "{}: {name} differs from its regeneration",
                        result.name
                    )),
                    Err(_) => failures.push(format!("{}: missing {}", result.name, p.display())),
                }
            }
        }
        Err(e) => failures.push(format!("{}: cannot render ({e})", result.name)),
    }
}

fn recompute_run(root: &Path, run: &RunSummary) -> Result<RunSummary> {
    let text = read_text(&run_dir(root, &run.run_id).join("predictions.csv"))?;
    let rows = parse_predictions(&text)?;
    let result = RunResult {
        run_id: run.run_id.clone(),
        config_hash: String::new(),
        seed: run.seed,
        split_id: run.split_id.clone(),
        rows,
        wall_time_s: 0.0,
    };
    RunSummary::from_predictions(&run.run_id, &run.split_id, run.seed, &result)
}
