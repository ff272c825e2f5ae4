use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::run::RunRecord;
use crate::error::{Error, Result};

pub const METRICS_HEADER: [&str; 8] = ["run_id", "domain", "accuracy", "L_orth", "L_HSIC", "L_OT", "L_total", "seed"];
pub const BACKTEST_DOMAIN: &str = "source_backtest";

#[derive(Serialize)]
struct MetricsRow<'a> {
    run_id: &'a str,
    domain: &'a str,
    accuracy: f64,
    #[serde(rename = "L_orth")]
    l_orth: Option<f64>,
    #[serde(rename = "L_HSIC")]
    l_hsic: Option<f64>,
    #[serde(rename = "L_OT")]
    l_ot: Option<f64>,
    #[serde(rename = "L_total")]
    l_total: Option<f64>,
    seed: u64,
}

/// Renders `metrics.csv`: one row per domain per run, then one
/// `source_backtest` row per run with empty loss columns.
pub fn metrics_csv(records: &[RunRecord]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(METRICS_HEADER)?;
    for r in records {
        for d in &r.domains {
            w.serialize(MetricsRow {
                run_id: &r.run_id,
                domain: &d.name,
                accuracy: d.accuracy,
                l_orth: Some(d.l_orth),
                l_hsic: Some(d.l_hsic),
                l_ot: Some(d.l_ot),
                l_total: Some(d.l_total),
                seed: r.seed,
            })?;
        }
        w.serialize(MetricsRow {
            run_id: &r.run_id,
            domain: BACKTEST_DOMAIN,
            accuracy: r.source_accuracy_after,
            l_orth: None,
            l_hsic: None,
            l_ot: None,
            l_total: None,
            seed: r.seed,
        })?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidState(format!("csv buffer: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::InvalidState(format!("csv encoding: {e}")))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];

/// A minimal SVG line chart.
pub fn line_plot_svg(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (w, h, m) = (640.0, 400.0, 56.0);
    let pts = series.iter().flat_map(|(_, p)| p.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<line x1="{m}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{m}" y1="{m}" x2="{m}" y2="{b}" stroke="black"/>"#,
        b = h - m,
        r = w - m
    );
    for (v, y) in [(y0, h - m), (y1, m)] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{y}" text-anchor="end" font-family="sans-serif" font-size="11">{v:.3}</text>"#,
            m - 4.0
        );
    }
    for (v, x) in [(x0, m), (x1, w - m)] {
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">{v:.0}</text>"#,
            h - m + 16.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">{}</text>"#,
        w / 2.0,
        h - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 14 {})">{}</text>"#,
        h / 2.0,
        h / 2.0,
        escape(y_label)
    );
    for (k, (name, points)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let path: Vec<String> = points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        if !path.is_empty() {
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                path.join(" ")
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" fill="{color}">{}</text>"#,
            w - m + 4.0 - 120.0,
            m + 14.0 * k as f64,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Accuracy per domain index, one line per run.
pub fn accuracy_plot(records: &[RunRecord]) -> String {
    let series: Vec<_> = records
        .iter()
        .map(|r| {
            let pts = r.domains.iter().enumerate().map(|(i, d)| (i as f64, d.accuracy)).collect();
            (r.run_id.clone(), pts)
        })
        .collect();
    line_plot_svg("Accuracy per domain", "domain index", "accuracy", &series)
}

/// Total test-time loss per step, one line per run.
pub fn loss_plot(records: &[RunRecord]) -> String {
    let series: Vec<_> = records
        .iter()
        .map(|r| {
            let pts = r.steps.iter().map(|m| (m.step as f64, m.l_total)).collect();
            (r.run_id.clone(), pts)
        })
        .collect();
    line_plot_svg("Test-time loss", "step", "L_total", &series)
}

pub fn run_json_path(dir: &Path, run_id: &str) -> PathBuf {
    dir.join(format!("run_{run_id}.json"))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `metrics.csv`, `run_<id>.json` per record and `plots/*.svg` under `dir`.
pub fn emit_report(records: &[RunRecord], dir: &Path) -> Result<Vec<PathBuf>> {
    let plots = dir.join("plots");
    std::fs::create_dir_all(&plots).map_err(|e| Error::io(&plots, e))?;
    let mut written = Vec::new();
    let csv_path = dir.join("metrics.csv");
    write(&csv_path, &metrics_csv(records)?)?;
    written.push(csv_path);
    for r in records {
        let p = run_json_path(dir, &r.run_id);
        write(&p, &serde_json::to_string_pretty(r)?)?;
        written.push(p);
    }
    for (name, svg) in [("accuracy.svg", accuracy_plot(records)), ("loss.svg", loss_plot(records))] {
        let p = plots.join(name);
        write(&p, &svg)?;
        written.push(p);
    }
    Ok(written)
}

/// Reads every `run_*.json` in `dir`, sorted by file name.
pub fn load_records(dir: &Path) -> Result<Vec<RunRecord>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("run_") && n.ends_with(".json"))
        })
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Ok(serde_json::from_str(&text)?)
        })
        .collect()
}
