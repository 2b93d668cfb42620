//! CSV tables and SVG line plots.

use std::fmt::Write as _;
use std::path::Path;

use unisiam_core::diagnostics::SpectrumReport;
use unisiam_core::fewshot::Summary;
use unisiam_core::mi::MIBenchResult;
use unisiam_core::trainer::TrainLog;

use crate::error::Result;
use crate::io;

fn table(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| csv::Error::from(e.into_error()).into())
}

pub const TRAIN_LOG_HEADER: [&str; 7] = ["epoch", "total", "alignment", "uniformity", "lr", "effective_rank", "wall_time"];

pub fn train_log_csv(log: &TrainLog) -> Result<Vec<u8>> {
    table(
        &TRAIN_LOG_HEADER,
        log.rows.iter().map(|r| {
            vec![
                r.epoch.to_string(),
                r.total.to_string(),
                r.alignment.to_string(),
                r.uniformity.to_string(),
                r.lr.to_string(),
                r.effective_rank.map(|e| e.to_string()).unwrap_or_default(),
                format!("{:.3}", r.wall_time),
            ]
        }),
    )
}

pub fn episodes_csv(accuracies: &[f64]) -> Result<Vec<u8>> {
    table(&["episode", "accuracy"], accuracies.iter().enumerate().map(|(i, a)| vec![i.to_string(), a.to_string()]))
}

/// `mean,ci95,n`.
pub fn summary_line(s: &Summary) -> String {
    format!("{},{},{}", s.mean, s.ci95, s.n)
}

pub const MI_HEADER: [&str; 7] = ["rho", "true_mi", "est_nce", "est_mine", "batch", "steps", "seed"];

/// Diverged cells keep their row with NaN estimates.
pub fn mi_csv(rows: &[MIBenchResult]) -> Result<Vec<u8>> {
    table(
        &MI_HEADER,
        rows.iter().map(|r| {
            vec![
                r.rho.to_string(),
                r.true_mi.to_string(),
                r.est_nce.to_string(),
                r.est_mine.to_string(),
                r.batch.to_string(),
                r.steps.to_string(),
                r.seed.to_string(),
            ]
        }),
    )
}

pub fn spectrum_csv(report: &SpectrumReport) -> Result<Vec<u8>> {
    let rel = report.relative();
    table(
        &["k", "sigma", "log10_sigma", "sigma_rel"],
        (0..report.sigma.len()).map(|k| {
            vec![(k + 1).to_string(), report.sigma[k].to_string(), report.log10_sigma[k].to_string(), rel[k].to_string()]
        }),
    )
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    io::write_atomic(path, bytes)
}

/// One named polyline.
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Minimal SVG line chart with axis labels, extents and a legend. Non-finite
/// points are skipped.
pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h, left, right, top, bottom) = (640.0, 420.0, 70.0, 20.0, 40.0, 50.0);
    let finite: Vec<(f64, f64)> =
        series.iter().flat_map(|s| s.points.iter().copied()).filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
    let bounds = |f: fn(&(f64, f64)) -> f64| {
        let lo = finite.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = finite.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        match (lo.is_finite(), hi > lo) {
            (false, _) => (0.0, 1.0),
            (true, false) => (lo - 0.5, lo + 0.5),
            (true, true) => (lo, hi),
        }
    };
    let (x0, x1) = bounds(|p| p.0);
    let (y0, y1) = bounds(|p| p.1);
    let px = |x: f64| left + (x - x0) / (x1 - x0) * (w - left - right);
    let py = |y: f64| h - bottom - (y - y0) / (y1 - y0) * (h - top - bottom);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<polyline points="{left},{top} {left},{} {},{}" fill="none" stroke="black"/>"#,
        h - bottom,
        w - right,
        h - bottom
    );
    for (v, anchor, x, y) in [
        (x0, "start", left, h - bottom + 16.0),
        (x1, "end", w - right, h - bottom + 16.0),
        (y0, "end", left - 6.0, h - bottom),
        (y1, "end", left - 6.0, top + 4.0),
    ] {
        let _ = writeln!(s, r#"<text x="{x}" y="{y}" text-anchor="{anchor}">{}</text>"#, tick(v));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (left + w - right) / 2.0, h - 12.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">{}</text>"#,
        (top + h - bottom) / 2.0,
        (top + h - bottom) / 2.0,
        escape(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = ser
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, pts.join(" "));
        let ly = top + 16.0 * (i as f64 + 1.0);
        let _ = writeln!(s, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, w - 150.0, w - 130.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, w - 125.0, ly + 4.0, escape(&ser.name));
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{:.2e}", v)
    } else {
        format!("{:.3}", v)
    }
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
