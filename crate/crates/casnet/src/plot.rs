//! SVG learning curves and normalized-score bar charts.
//!
//! Each chart's root element carries its axis ranges as `data-xmin`,
//! `data-xmax`, `data-ymin` and `data-ymax` attributes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{HarnessError, Result};
use crate::eval::{read_scores, Score};
use crate::metrics::{read_metrics, MetricsRow};

pub const WIDTH: f64 = 640.0;
pub const HEIGHT: f64 = 400.0;
/// Plot area as (left, top, right, bottom) in pixels.
pub const PLOT_AREA: (f64, f64, f64, f64) = (70.0, 30.0, 620.0, 350.0);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisRange {
    pub min: f64,
    pub max: f64,
}

impl AxisRange {
    /// Data range with a 5% margin; a single value gets a unit-scale margin.
    pub fn covering(values: impl IntoIterator<Item = f64>) -> Self {
        let (lo, hi) = values.into_iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        if !lo.is_finite() {
            return Self { min: 0.0, max: 1.0 };
        }
        let pad = if hi > lo { 0.05 * (hi - lo) } else { (0.05 * lo.abs()).max(0.5) };
        Self { min: lo - pad, max: hi + pad }
    }

    fn to_pixel(self, v: f64, p0: f64, p1: f64) -> f64 {
        p0 + (v - self.min) / (self.max - self.min) * (p1 - p0)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn svg_open(out: &mut String, x: AxisRange, y: AxisRange, title: &str) {
    let (l, t, r, b) = PLOT_AREA;
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" data-xmin="{}" data-xmax="{}" data-ymin="{}" data-ymax="{}">"#,
        x.min, x.max, y.min, y.max
    );
    let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, (l + r) / 2.0, escape(title));
    let _ = writeln!(out, r#"<path d="M{l},{t} V{b} H{r}" fill="none" stroke="black"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end" font-size="11">{:.3}</text>"#, l - 4.0, b, y.min);
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end" font-size="11">{:.3}</text>"#, l - 4.0, t + 10.0, y.max);
}

/// Mean return against cumulative env steps for one environment. Rows
/// without a finished episode are skipped.
pub fn learning_curve_svg(env_name: &str, rows: &[&MetricsRow]) -> String {
    let points: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.mean_return.is_finite())
        .map(|r| (r.cumulative_env_steps as f64, r.mean_return))
        .collect();
    let x = AxisRange::covering(points.iter().map(|p| p.0));
    let y = AxisRange::covering(points.iter().map(|p| p.1));
    let (l, t, r, b) = PLOT_AREA;
    let mut out = String::new();
    svg_open(&mut out, x, y, &format!("{env_name}: mean return"));
    let _ = writeln!(out, r#"<text x="{l}" y="{}" font-size="11">{:.0}</text>"#, b + 16.0, x.min);
    let _ = writeln!(out, r#"<text x="{r}" y="{}" text-anchor="end" font-size="11">{:.0}</text>"#, b + 16.0, x.max);
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">env steps</text>"#, (l + r) / 2.0, b + 32.0);
    let px: Vec<(f64, f64)> = points.iter().map(|&(a, v)| (x.to_pixel(a, l, r), y.to_pixel(v, b, t))).collect();
    if px.is_empty() {
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">no finished episodes</text>"#, (l + r) / 2.0, (t + b) / 2.0);
    } else {
        let coords: Vec<String> = px.iter().map(|(a, v)| format!("{a:.2},{v:.2}")).collect();
        let _ = writeln!(out, r#"<polyline fill="none" stroke="steelblue" stroke-width="1.5" points="{}"/>"#, coords.join(" "));
        for (a, v) in &px {
            let _ = writeln!(out, r#"<circle cx="{a:.2}" cy="{v:.2}" r="2" fill="steelblue"/>"#);
        }
    }
    out.push_str("</svg>\n");
    out
}

/// One bar per environment with a dashed line at the expert level (100%).
pub fn score_bars_svg(scores: &[Score]) -> String {
    let y = AxisRange::covering(scores.iter().map(|s| s.percent).chain([0.0, 100.0]));
    let x = AxisRange { min: 0.0, max: scores.len().max(1) as f64 };
    let (l, t, r, b) = PLOT_AREA;
    let mut out = String::new();
    svg_open(&mut out, x, y, "normalized score (%)");
    let zero = y.to_pixel(0.0, b, t);
    let expert = y.to_pixel(100.0, b, t);
    let _ = writeln!(out, r#"<line x1="{l}" y1="{zero:.2}" x2="{r}" y2="{zero:.2}" stroke="gray"/>"#);
    let _ = writeln!(out, r#"<line x1="{l}" y1="{expert:.2}" x2="{r}" y2="{expert:.2}" stroke="gray" stroke-dasharray="4 3"/>"#);
    for (i, s) in scores.iter().enumerate() {
        let x0 = x.to_pixel(i as f64 + 0.15, l, r);
        let x1 = x.to_pixel(i as f64 + 0.85, l, r);
        let top = y.to_pixel(s.percent, b, t);
        let (y0, h) = if top < zero { (top, zero - top) } else { (zero, top - zero) };
        let _ = writeln!(
            out,
            r#"<rect x="{x0:.2}" y="{y0:.2}" width="{:.2}" height="{h:.2}" fill="darkorange"><title>{}: {:.1}%</title></rect>"#,
            x1 - x0,
            escape(&s.env_name),
            s.percent
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{}" text-anchor="middle" font-size="11">{}</text>"#,
            (x0 + x1) / 2.0,
            b + 16.0,
            escape(&s.env_name)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn file_stem(env_name: &str) -> String {
    env_name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// Write `curve_<env>.svg` for every environment in the metrics file and,
/// given a scores CSV, `scores.svg`. Nothing is written if any input is
/// empty or malformed.
pub fn emit_plots(metrics_csv: &Path, out_dir: &Path, scores_csv: Option<&Path>) -> Result<Vec<PathBuf>> {
    let rows = read_metrics(metrics_csv)?;
    if rows.is_empty() {
        return Err(HarnessError::Parse { path: metrics_csv.to_path_buf(), line: 2, message: "no metrics rows".into() });
    }
    let mut envs: Vec<&str> = Vec::new();
    for r in &rows {
        if !envs.contains(&r.env_name.as_str()) {
            envs.push(&r.env_name);
        }
    }
    let mut files: Vec<(PathBuf, String)> = envs
        .iter()
        .map(|env| {
            let mine: Vec<&MetricsRow> = rows.iter().filter(|r| r.env_name == *env).collect();
            (out_dir.join(format!("curve_{}.svg", file_stem(env))), learning_curve_svg(env, &mine))
        })
        .collect();
    if let Some(path) = scores_csv {
        let scores = read_scores(path)?;
        if scores.is_empty() {
            return Err(HarnessError::Parse { path: path.to_path_buf(), line: 2, message: "no score rows".into() });
        }
        files.push((out_dir.join("scores.svg"), score_bars_svg(&scores)));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| HarnessError::io(out_dir, e))?;
    for (path, svg) in &files {
        std::fs::write(path, svg).map_err(|e| HarnessError::io(path, e))?;
    }
    Ok(files.into_iter().map(|(p, _)| p).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_cover_data() {
        let r = AxisRange::covering([3.0, -1.0, 2.0]);
        assert!(r.min < -1.0 && r.max > 3.0);
        let flat = AxisRange::covering([-7.0]);
        assert!(flat.min < -7.0 && flat.max > -7.0);
        assert_eq!(AxisRange::covering([]), AxisRange { min: 0.0, max: 1.0 });
    }

    #[test]
    fn escapes_names() {
        let s = Score { env_name: "a<b".into(), r_general: 0.0, r_random: -1.0, r_expert: 1.0, percent: 50.0 };
        assert!(score_bars_svg(&[s]).contains("a&lt;b"));
    }
}
