//! Result files: pretty-JSON metric reports, per-figure CSV plot data, and
//! small static SVG charts rendered from the same numbers.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use crate::train::{GroupImprovement, GroupMetrics, MetricsReport, SweepPoint};

pub fn report_json(report: &MetricsReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

pub fn write_report_json(path: &Path, report: &MetricsReport) -> io::Result<()> {
    fs::write(path, report_json(report))
}

fn metric_row(label: &str, m: &GroupMetrics) -> String {
    format!(
        "{label},{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
        m.rows, m.hr1, m.hr5, m.hr10, m.ndcg5, m.ndcg10
    )
}

/// Per-group metric table, sparsest group first, overall last.
pub fn group_csv(report: &MetricsReport) -> String {
    let mut s = String::from("group,rows,hr1,hr5,hr10,ndcg5,ndcg10\n");
    for (g, m) in report.groups.iter().enumerate() {
        s += &metric_row(&g.to_string(), m);
    }
    s += &metric_row("overall", &report.overall);
    s
}

pub fn write_group_csv(path: &Path, report: &MetricsReport) -> io::Result<()> {
    fs::write(path, group_csv(report))
}

/// Per-group relative changes of one run against a baseline.
pub fn improvement_csv(imps: &[GroupImprovement]) -> String {
    let mut s = String::from("group,hr1,hr5,hr10,ndcg5,ndcg10\n");
    for i in imps {
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            i.group, i.hr1, i.hr5, i.hr10, i.ndcg5, i.ndcg10
        );
    }
    s
}

pub fn write_improvement_csv(path: &Path, imps: &[GroupImprovement]) -> io::Result<()> {
    fs::write(path, improvement_csv(imps))
}

/// Metric curve over one hyperparameter grid.
pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut s = String::from("value,hr5,ndcg5\n");
    for p in points {
        let _ = writeln!(s, "{},{:.6},{:.6}", p.value, p.hr5, p.ndcg5);
    }
    s
}

pub fn write_sweep_csv(path: &Path, points: &[SweepPoint]) -> io::Result<()> {
    fs::write(path, sweep_csv(points))
}

// ---- static charts ----

const PALETTE: [&str; 5] = ["#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2"];
const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 620.0;
const TOP: f64 = 52.0;
const BOTTOM: f64 = 368.0;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn tick_label(v: f64) -> String {
    if v != 0.0 && v.abs() < 0.01 {
        format!("{v:.1e}")
    } else {
        format!("{v:.3}")
    }
}

/// Minimal grouped bar / line chart. Bars grow from the zero line, so
/// negative values (relative losses) hang downward. Non-finite values are
/// skipped rather than drawn.
fn svg_chart(title: &str, labels: &[String], series: &[(String, Vec<f64>)], line: bool) -> String {
    let finite: Vec<f64> = series
        .iter()
        .flat_map(|(_, vs)| vs.iter().copied())
        .filter(|v| v.is_finite())
        .collect();
    let mut lo = finite.iter().copied().fold(0.0_f64, f64::min);
    let mut hi = finite.iter().copied().fold(0.0_f64, f64::max);
    if hi == lo {
        hi = lo + 1.0;
    }
    let span = hi - lo;
    hi += span * 0.08;
    if lo < 0.0 {
        lo -= span * 0.08;
    }
    let y = |v: f64| BOTTOM - (v - lo) / (hi - lo) * (BOTTOM - TOP);

    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">"
    );
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>",
        WIDTH / 2.0,
        esc(title)
    );
    // axes and ticks
    let _ = writeln!(
        s,
        "<line x1=\"{LEFT}\" y1=\"{TOP}\" x2=\"{LEFT}\" y2=\"{BOTTOM}\" stroke=\"#333\"/>"
    );
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let yy = y(v);
        let _ = writeln!(
            s,
            "<line x1=\"{LEFT}\" y1=\"{yy:.1}\" x2=\"{RIGHT}\" y2=\"{yy:.1}\" \
             stroke=\"#ddd\"/><text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>",
            LEFT - 6.0,
            yy + 4.0,
            tick_label(v)
        );
    }
    let y0 = y(0.0);
    let _ = writeln!(
        s,
        "<line x1=\"{LEFT}\" y1=\"{y0:.1}\" x2=\"{RIGHT}\" y2=\"{y0:.1}\" stroke=\"#333\"/>"
    );

    let n = labels.len().max(1);
    let slot = (RIGHT - LEFT) / n as f64;
    for (i, lab) in labels.iter().enumerate() {
        let x = LEFT + slot * (i as f64 + 0.5);
        let _ = writeln!(
            s,
            "<text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
            BOTTOM + 18.0,
            esc(lab)
        );
    }

    for (si, (name, values)) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        if line {
            let pts: Vec<String> = values
                .iter()
                .enumerate()
                .filter(|(_, v)| v.is_finite())
                .map(|(i, &v)| format!("{:.1},{:.1}", LEFT + slot * (i as f64 + 0.5), y(v)))
                .collect();
            let _ = writeln!(
                s,
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>",
                pts.join(" ")
            );
            for p in &pts {
                let (px, py) = p.split_once(',').unwrap();
                let _ = writeln!(s, "<circle cx=\"{px}\" cy=\"{py}\" r=\"3\" fill=\"{color}\"/>");
            }
        } else {
            let bw = slot * 0.8 / series.len() as f64;
            for (i, &v) in values.iter().enumerate() {
                if !v.is_finite() {
                    continue;
                }
                let x = LEFT + slot * i as f64 + slot * 0.1 + bw * si as f64;
                let (top, h) = if v >= 0.0 { (y(v), y0 - y(v)) } else { (y0, y(v) - y0) };
                let _ = writeln!(
                    s,
                    "<rect x=\"{x:.1}\" y=\"{top:.1}\" width=\"{bw:.1}\" height=\"{h:.1}\" \
                     fill=\"{color}\"/>"
                );
            }
        }
        // legend swatch
        let lx = RIGHT - 110.0;
        let ly = TOP + 18.0 * si as f64;
        let _ = writeln!(
            s,
            "<rect x=\"{lx:.1}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{color}\"/>\
             <text x=\"{:.1}\" y=\"{:.1}\">{}</text>",
            ly - 9.0,
            lx + 14.0,
            ly,
            esc(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn group_chart(report: &MetricsReport) -> String {
    let labels: Vec<String> = (0..report.groups.len()).map(|g| format!("g{g}")).collect();
    let series = vec![
        ("hr10".to_string(), report.groups.iter().map(|m| m.hr10).collect()),
        ("ndcg5".to_string(), report.groups.iter().map(|m| m.ndcg5).collect()),
    ];
    svg_chart("Metrics by search-sparsity group", &labels, &series, false)
}

pub fn write_group_chart(path: &Path, report: &MetricsReport) -> io::Result<()> {
    fs::write(path, group_chart(report))
}

pub fn improvement_chart(imps: &[GroupImprovement]) -> String {
    let labels: Vec<String> = imps.iter().map(|i| format!("g{}", i.group)).collect();
    let series = vec![
        ("hr10".to_string(), imps.iter().map(|i| i.hr10).collect()),
        ("ndcg5".to_string(), imps.iter().map(|i| i.ndcg5).collect()),
    ];
    svg_chart("Relative change vs baseline by group", &labels, &series, false)
}

pub fn write_improvement_chart(path: &Path, imps: &[GroupImprovement]) -> io::Result<()> {
    fs::write(path, improvement_chart(imps))
}

pub fn sweep_chart(param: &str, points: &[SweepPoint]) -> String {
    let labels: Vec<String> = points.iter().map(|p| format!("{}", p.value)).collect();
    let series = vec![
        ("hr5".to_string(), points.iter().map(|p| p.hr5).collect()),
        ("ndcg5".to_string(), points.iter().map(|p| p.ndcg5).collect()),
    ];
    svg_chart(&format!("Sensitivity to {param}"), &labels, &series, true)
}

pub fn write_sweep_chart(path: &Path, param: &str, points: &[SweepPoint]) -> io::Result<()> {
    fs::write(path, sweep_chart(param, points))
}
