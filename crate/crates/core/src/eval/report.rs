//! Comparison tables and plots across evaluation runs.

use std::path::{Path, PathBuf};

use plotters::prelude::*;

use super::{MetricsTable, METRICS_FILE};
use crate::error::{Error, Result};
use crate::trainer::LogRecord;

pub const COMPARISON_FILE: &str = "comparison.csv";
pub const MAE_PLOT_FILE: &str = "mae_by_group.svg";
pub const LOSS_PLOT_FILE: &str = "loss_curves.svg";

/// What [`report`] wrote.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportSummary {
    pub runs: Vec<String>,
    pub logs: Vec<String>,
    pub files: Vec<PathBuf>,
}

/// Reads a JSON-lines training log.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::json(path, e)))
        .collect()
}

fn run_name(dir: &Path, taken: &[String]) -> String {
    let base = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    let mut name = base.clone();
    let mut k = 2;
    while taken.contains(&name) {
        name = format!("{base}-{k}");
        k += 1;
    }
    name
}

fn log_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "jsonl") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Collects `metrics.csv` tables and `*.jsonl` training logs from each input
/// directory and writes a comparison table plus plots into `out`.
pub fn report(inputs: &[PathBuf], out: &Path) -> Result<ReportSummary> {
    let mut runs: Vec<(String, MetricsTable)> = Vec::new();
    let mut logs: Vec<(String, Vec<LogRecord>)> = Vec::new();
    for dir in inputs {
        if !dir.is_dir() {
            return Err(Error::Invalid(format!("{} is not a directory", dir.display())));
        }
        if dir.join(METRICS_FILE).exists() {
            let names: Vec<String> = runs.iter().map(|r| r.0.clone()).collect();
            runs.push((run_name(dir, &names), MetricsTable::load(dir)?));
        }
        for path in log_files(dir)? {
            let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            logs.push((stem, read_log(&path)?));
        }
    }
    if runs.is_empty() && logs.is_empty() {
        return Err(Error::Invalid("no metrics tables or training logs found in the inputs".into()));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut files = Vec::new();
    if !runs.is_empty() {
        let path = out.join(COMPARISON_FILE);
        std::fs::write(&path, comparison_csv(&runs)).map_err(|e| Error::io(&path, e))?;
        files.push(path);
        let path = out.join(MAE_PLOT_FILE);
        plot_mae(&runs, &path)?;
        files.push(path);
    }
    if !logs.is_empty() {
        let path = out.join(LOSS_PLOT_FILE);
        plot_losses(&logs, &path)?;
        files.push(path);
    }
    Ok(ReportSummary {
        runs: runs.into_iter().map(|r| r.0).collect(),
        logs: logs.into_iter().map(|l| l.0).collect(),
        files,
    })
}

fn comparison_csv(runs: &[(String, MetricsTable)]) -> String {
    let mut out = String::from("run,group,n,mae,rmse\n");
    for (name, table) in runs {
        for line in table.to_csv().lines().skip(1) {
            out.push_str(&format!("{name},{line}\n"));
        }
    }
    out
}

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Plot(e.to_string())
}

fn plot_mae(runs: &[(String, MetricsTable)], path: &Path) -> Result<()> {
    let groups: Vec<String> = runs[0].1.rows.iter().map(|r| r.group.clone()).collect();
    let top = runs
        .iter()
        .flat_map(|(_, t)| t.rows.iter().filter_map(|r| r.mae))
        .fold(0.0f64, f64::max)
        .max(1e-3)
        * 1.15;
    let root = SVGBackend::new(path, (800, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("MAE by weather group", ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(0f64..groups.len() as f64, 0f64..top)
        .map_err(plot_err)?;
    let labels = groups.clone();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(groups.len() * 2 + 1)
        .x_label_formatter(&move |x| {
            let centre = x - x.floor();
            if (centre - 0.5).abs() < 1e-6 {
                labels.get(x.floor() as usize).cloned().unwrap_or_default()
            } else {
                String::new()
            }
        })
        .y_desc("MAE")
        .draw()
        .map_err(plot_err)?;
    let width = 0.8 / runs.len() as f64;
    for (k, (name, table)) in runs.iter().enumerate() {
        let colour = Palette99::pick(k).to_rgba();
        let bars = groups.iter().enumerate().filter_map(|(g, group)| {
            let mae = table.row(group)?.mae?;
            let left = g as f64 + 0.1 + k as f64 * width;
            Some(Rectangle::new([(left, 0.0), (left + width, mae)], colour.filled()))
        });
        chart
            .draw_series(bars)
            .map_err(plot_err)?
            .label(name.as_str())
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], colour.filled()));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

fn plot_losses(logs: &[(String, Vec<LogRecord>)], path: &Path) -> Result<()> {
    let max_step = logs.iter().flat_map(|(_, l)| l.iter().map(|r| r.step)).max().unwrap_or(0).max(1);
    let finite = logs.iter().flat_map(|(_, l)| l.iter().map(|r| r.total)).filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let (lo, hi) = if lo.is_finite() { (lo.min(0.0), hi.max(lo + 1e-3) * 1.05) } else { (0.0, 1.0) };
    let root = SVGBackend::new(path, (800, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Training loss", ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(0f64..max_step as f64, lo..hi)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("step").y_desc("total loss").draw().map_err(plot_err)?;
    for (k, (name, records)) in logs.iter().enumerate() {
        let colour = Palette99::pick(k).to_rgba();
        let points = records.iter().filter(|r| r.total.is_finite()).map(|r| (r.step as f64, r.total));
        chart
            .draw_series(LineSeries::new(points, colour.stroke_width(2)))
            .map_err(plot_err)?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new([(x, y), (x + 14, y)], colour.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}
