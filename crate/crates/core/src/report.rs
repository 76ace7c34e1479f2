//! Run reports: the JSON written after training, and the Markdown, CSV and
//! SVG views built from one or more of them.

use std::fmt::Write as _;
use std::path::Path;

use plotters::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::partition::PartitionSummary;
use crate::trainer::{EvalReport, RunOutcome, StepRecord, Timing, Trainer, ViewMetrics};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub psnr: f64,
    pub ssim: f64,
    pub depth_mae: Option<f64>,
    pub srocc: Option<f64>,
}

impl From<&EvalReport> for Metrics {
    fn from(e: &EvalReport) -> Self {
        Self {
            psnr: e.psnr,
            ssim: e.ssim,
            depth_mae: e.depth_mae,
            srocc: e.srocc,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionReport {
    #[serde(flatten)]
    pub summary: PartitionSummary,
    pub in_range: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub schema_version: u32,
    pub config: RunConfig,
    pub iterations: usize,
    pub gaussians: usize,
    /// Per-iteration loss terms.
    pub losses: Vec<StepRecord>,
    /// Eval views at the end of training.
    pub final_metrics: Metrics,
    /// Eval views before the first step.
    pub initial_metrics: Metrics,
    /// Training views at the end of training.
    pub train_metrics: Metrics,
    pub eval_views: Vec<ViewMetrics>,
    /// Eval-view metrics over time.
    pub evals: Vec<EvalReport>,
    pub partition: Option<PartitionReport>,
    /// Absent in deterministic mode.
    pub timing: Option<Timing>,
}

impl RunReport {
    pub fn new(trainer: &Trainer, outcome: &RunOutcome) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            config: trainer.cfg.clone(),
            iterations: trainer.state.iteration,
            gaussians: trainer.state.scene.len(),
            losses: trainer.state.history.clone(),
            final_metrics: (&outcome.final_eval).into(),
            initial_metrics: (&outcome.initial_eval).into(),
            train_metrics: (&outcome.final_train).into(),
            eval_views: outcome.final_eval.views.clone(),
            evals: outcome.evals.clone(),
            partition: trainer.state.grouping.as_ref().map(|g| PartitionReport {
                summary: g.partition.summary(),
                in_range: g.in_range,
            }),
            timing: outcome.timing.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        validate_schema(&v).map_err(|m| Error::format(path, m))?;
        crate::config::from_value(v)
    }
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "bool",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

/// Structural check against the documented report schema. Returns the first
/// violation.
pub fn validate_schema(v: &Value) -> std::result::Result<(), String> {
    fn need<'a>(v: &'a Value, key: &str, want: &[&str], at: &str) -> std::result::Result<&'a Value, String> {
        let x = v.get(key).ok_or_else(|| format!("{at}: missing `{key}`"))?;
        if !want.contains(&kind(x)) {
            return Err(format!("{at}.{key}: expected {}, found {}", want.join(" or "), kind(x)));
        }
        Ok(x)
    }
    fn metrics(v: &Value, at: &str) -> std::result::Result<(), String> {
        need(v, "psnr", &["number"], at)?;
        need(v, "ssim", &["number"], at)?;
        need(v, "depth_mae", &["number", "null"], at)?;
        need(v, "srocc", &["number", "null"], at)?;
        Ok(())
    }
    if kind(v) != "object" {
        return Err("report must be a JSON object".into());
    }
    let ver = need(v, "schema_version", &["number"], "report")?;
    if ver.as_u64() != Some(REPORT_SCHEMA_VERSION as u64) {
        return Err(format!(
            "report.schema_version: expected {REPORT_SCHEMA_VERSION}, found {ver}"
        ));
    }
    need(v, "config", &["object"], "report")?;
    need(v, "iterations", &["number"], "report")?;
    need(v, "gaussians", &["number"], "report")?;
    for (i, rec) in need(v, "losses", &["array"], "report")?.as_array().unwrap().iter().enumerate() {
        let at = format!("report.losses[{i}]");
        for k in ["iteration", "view", "total", "l1", "ssim", "gaussians"] {
            need(rec, k, &["number"], &at)?;
        }
        need(rec, "pos", &["number", "null"], &at)?;
        need(rec, "mask", &["number", "null"], &at)?;
    }
    for k in ["final_metrics", "initial_metrics", "train_metrics"] {
        metrics(need(v, k, &["object"], "report")?, &format!("report.{k}"))?;
    }
    for (i, m) in need(v, "eval_views", &["array"], "report")?.as_array().unwrap().iter().enumerate() {
        let at = format!("report.eval_views[{i}]");
        need(m, "name", &["string"], &at)?;
        metrics(m, &at)?;
    }
    need(v, "evals", &["array"], "report")?;
    let p = need(v, "partition", &["object", "null"], "report")?;
    if p.is_object() {
        need(p, "G", &["number"], "report.partition")?;
        need(p, "sizes", &["array"], "report.partition")?;
        need(p, "energy", &["number"], "report.partition")?;
        need(p, "mu", &["number"], "report.partition")?;
        need(p, "in_range", &["bool"], "report.partition")?;
    }
    let t = need(v, "timing", &["object", "null"], "report")?;
    if t.is_object() {
        for k in ["total_secs", "grouping_secs", "per_iteration_ms"] {
            need(t, k, &["number"], "report.timing")?;
        }
    }
    Ok(())
}

fn opt(v: Option<f64>, prec: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.prec$}"))
}

/// One row per run.
pub fn markdown_table(runs: &[(String, RunReport)]) -> String {
    let mut s = String::new();
    s.push_str("| run | iters | N | G | PSNR | SSIM | depth MAE | SROCC | train PSNR | PSNR @0 |\n");
    s.push_str("|---|---:|---:|---:|---:|---:|---:|---:|---:|---:|\n");
    for (name, r) in runs {
        let m = &r.final_metrics;
        let _ = writeln!(
            s,
            "| {name} | {} | {} | {} | {:.2} | {:.4} | {} | {} | {:.2} | {:.2} |",
            r.iterations,
            r.gaussians,
            r.partition.as_ref().map_or("-".into(), |p| p.summary.groups.to_string()),
            m.psnr,
            m.ssim,
            opt(m.depth_mae, 4),
            opt(m.srocc, 4),
            r.train_metrics.psnr,
            r.initial_metrics.psnr,
        );
    }
    s
}

pub fn metrics_csv(runs: &[(String, RunReport)]) -> String {
    let mut s = String::from("run,iterations,gaussians,groups,psnr,ssim,depth_mae,srocc,train_psnr,initial_psnr\n");
    for (name, r) in runs {
        let m = &r.final_metrics;
        let _ = writeln!(
            s,
            "{name},{},{},{},{},{},{},{},{},{}",
            r.iterations,
            r.gaussians,
            r.partition.as_ref().map_or(String::new(), |p| p.summary.groups.to_string()),
            m.psnr,
            m.ssim,
            m.depth_mae.map_or(String::new(), |x| x.to_string()),
            m.srocc.map_or(String::new(), |x| x.to_string()),
            r.train_metrics.psnr,
            r.initial_metrics.psnr,
        );
    }
    s
}

/// Per-iteration losses of one run.
pub fn losses_csv(r: &RunReport) -> String {
    let mut s = String::from("iteration,view,total,l1,ssim,pos,mask,gaussians\n");
    for h in &r.losses {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            h.iteration,
            h.view,
            h.total,
            h.l1,
            h.ssim,
            h.pos.map_or(String::new(), |x| x.to_string()),
            h.mask.map_or(String::new(), |x| x.to_string()),
            h.gaussians
        );
    }
    s
}

/// Moving average over `w` steps, for readable loss curves.
fn smooth(v: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    let mut out = Vec::with_capacity(v.len());
    let mut acc = 0.0;
    for i in 0..v.len() {
        acc += v[i];
        if i >= w {
            acc -= v[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

fn plot_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::format(path, format!("plot: {e}"))
}

/// Total loss (log10, smoothed) against iteration, one line per run.
pub fn plot_losses(runs: &[(String, RunReport)], path: &Path) -> Result<()> {
    let series: Vec<(String, Vec<(f64, f64)>)> = runs
        .iter()
        .map(|(name, r)| {
            let total: Vec<f64> = r.losses.iter().map(|h| h.total.max(1e-12)).collect();
            let pts = smooth(&total, 25)
                .into_iter()
                .zip(&r.losses)
                .map(|(v, h)| (h.iteration as f64, v.log10()))
                .collect();
            (name.clone(), pts)
        })
        .collect();
    line_plot(path, "training loss", "iteration", "log10 total loss", &series)
}

/// Eval PSNR over time, one line per run.
pub fn plot_psnr(runs: &[(String, RunReport)], path: &Path) -> Result<()> {
    let series: Vec<(String, Vec<(f64, f64)>)> = runs
        .iter()
        .map(|(name, r)| (name.clone(), r.evals.iter().map(|e| (e.iteration as f64, e.psnr)).collect()))
        .collect();
    line_plot(path, "eval PSNR", "iteration", "PSNR (dB)", &series)
}

fn line_plot(path: &Path, title: &str, xl: &str, yl: &str, series: &[(String, Vec<(f64, f64)>)]) -> Result<()> {
    let all = series.iter().flat_map(|(_, s)| s.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return Err(Error::invalid("plot: no data"));
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-3);
    let root = SVGBackend::new(path, (720, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(x0..x1, (y0 - pad)..(y1 + pad))
        .map_err(|e| plot_err(path, e))?;
    chart
        .configure_mesh()
        .x_desc(xl)
        .y_desc(yl)
        .draw()
        .map_err(|e| plot_err(path, e))?;
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(|e| plot_err(path, e))?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))
}
