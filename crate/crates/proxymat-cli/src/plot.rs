//! Report aggregation: a markdown comparison table plus static SVG loss
//! plots, built from the trace files of optimization bundles.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use proxymat::error::{Error, Result};
use proxymat::optimize::{PipelineReport, TraceRecord};
use proxymat::util::atomic_write;

struct RunData {
    name: String,
    report: PipelineReport,
    trace: Vec<TraceRecord>,
}

fn load_run(dir: &Path) -> Result<RunData> {
    let report: PipelineReport = proxymat::util::read_json(&dir.join("report.json"))?;
    let mut trace = Vec::new();
    for stage in 1..=3u8 {
        let path = dir.join(format!("traces/stage{stage}.jsonl"));
        if !path.exists() {
            continue;
        }
        let text =
            std::fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        for line in text.lines() {
            trace.push(serde_json::from_str(line)?);
        }
    }
    Ok(RunData {
        name: dir
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or("run")
            .to_string(),
        report,
        trace,
    })
}

pub fn write_report(runs: &[PathBuf], out: &Path) -> Result<()> {
    let data: Vec<RunData> = runs.iter().map(|d| load_run(d)).collect::<Result<_>>()?;

    // markdown comparison table: initial/final feature and style losses
    let mut md = String::new();
    let _ = writeln!(md, "# Optimization runs\n");
    let _ = writeln!(
        md,
        "| run | stage1 style (init → final) | stage2 eq5 (init → final) | stage3 style (init → final) | best eq5 | stage1 skipped |"
    );
    let _ = writeln!(md, "|---|---|---|---|---|---|");
    for r in &data {
        let s = &r.report.stages;
        let fmt_pair = |a: f64, b: f64| format!("{a:.5} → {b:.5}");
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {:.5} | {} |",
            r.name,
            fmt_pair(s[0].initial_style, s[0].final_style),
            fmt_pair(s[1].initial_eq5, s[1].final_eq5),
            fmt_pair(s[2].initial_style, s[2].final_style),
            r.report.best.eq5,
            s[0].skipped,
        );
    }
    let _ = writeln!(md, "\nPer-run feature/style losses (final stage):\n");
    let _ = writeln!(md, "| run | feature | style |");
    let _ = writeln!(md, "|---|---|---|");
    for r in &data {
        let last = r.report.stages.last().unwrap();
        let _ = writeln!(md, "| {} | {:.5} | {:.5} |", r.name, last.final_feat, last.final_style);
    }
    atomic_write(&out.join("report.md"), md.as_bytes())?;

    // SVG plot of eq5 over the concatenated step axis, one polyline per run
    let series: Vec<(String, Vec<f64>)> = data
        .iter()
        .map(|r| {
            (
                r.name.clone(),
                r.trace.iter().map(|t| t.eq5).collect::<Vec<f64>>(),
            )
        })
        .collect();
    atomic_write(
        &out.join("loss_eq5.svg"),
        line_plot("combined loss (feat + α·style)", &series).as_bytes(),
    )?;
    let series_style: Vec<(String, Vec<f64>)> = data
        .iter()
        .map(|r| (r.name.clone(), r.trace.iter().map(|t| t.style).collect()))
        .collect();
    atomic_write(
        &out.join("loss_style.svg"),
        line_plot("style loss", &series_style).as_bytes(),
    )?;
    Ok(())
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Minimal standalone SVG line plot (log-free, linear axes).
pub fn line_plot(title: &str, series: &[(String, Vec<f64>)]) -> String {
    let (w, h, ml, mb) = (720.0, 380.0, 60.0, 40.0);
    let max_len = series.iter().map(|(_, v)| v.len()).max().unwrap_or(1).max(2);
    let max_v = series
        .iter()
        .flat_map(|(_, v)| v.iter().cloned())
        .fold(1e-12f64, f64::max);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">"
    );
    let _ = writeln!(svg, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">{title}</text>",
        ml
    );
    // axes
    let _ = writeln!(
        svg,
        "<line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
        h - mb,
        w - 10.0,
        h - mb
    );
    let _ = writeln!(
        svg,
        "<line x1=\"{ml}\" y1=\"30\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>",
        h - mb
    );
    let _ = writeln!(
        svg,
        "<text x=\"8\" y=\"36\" font-family=\"sans-serif\" font-size=\"11\">{max_v:.4}</text>"
    );
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">step</text>",
        w - 44.0,
        h - 12.0
    );
    for (si, (name, vals)) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let mut points = String::new();
        for (i, v) in vals.iter().enumerate() {
            let x = ml + (w - ml - 20.0) * i as f64 / (max_len - 1) as f64;
            let y = (h - mb) - (h - mb - 40.0) * (v / max_v).clamp(0.0, 1.0);
            let _ = write!(points, "{x:.1},{y:.1} ");
        }
        let _ = writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{points}\"/>"
        );
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"{color}\">{name}</text>",
            w - 200.0,
            40.0 + 16.0 * si as f64
        );
    }
    svg.push_str("</svg>\n");
    svg
}
