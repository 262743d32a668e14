//! Minimal self-contained SVG line plots.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Values at or below zero are drawn at this floor on a log axis.
pub const LOG_FLOOR: f64 = 1e-16;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 190.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Axes {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_y: bool,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-300 {
        let pad = if lo.abs() > 0.0 { lo.abs() * 0.5 } else { 1.0 };
        return (lo - pad, hi + pad);
    }
    (lo, hi)
}

fn tick_label(v: f64, log: bool) -> String {
    if log {
        format!("1e{}", v.round() as i64)
    } else if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else {
        format!("{v:.3}")
    }
}

/// Renders the series to SVG text. On a log axis, series containing values
/// `≤ 0` are clipped at [`LOG_FLOOR`] and marked "(clipped)" in the legend.
pub fn render_plot_svg(series: &[Series], axes: &Axes) -> Result<String> {
    if series.is_empty() || series.iter().all(|s| s.points.is_empty()) {
        return Err(Error::InvalidArgument("nothing to plot".into()));
    }
    let transform = |y: f64| if axes.log_y { y.max(LOG_FLOOR).log10() } else { y };
    let (x0, x1) = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y0, y1) = range(series.iter().flat_map(|s| s.points.iter().map(|p| transform(p.1))));
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let px = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut svg = String::new();
    let w = &mut svg;
    writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(w, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#).unwrap();
    writeln!(
        w,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        LEFT + pw / 2.0,
        escape(&axes.title)
    )
    .unwrap();
    writeln!(
        w,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    )
    .unwrap();

    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let xv = x0 + f * (x1 - x0);
        let x = px(xv);
        writeln!(
            w,
            r#"<line x1="{x:.2}" y1="{b:.2}" x2="{x:.2}" y2="{t:.2}" stroke="black"/><text x="{x:.2}" y="{l:.2}" text-anchor="middle">{}</text>"#,
            tick_label(xv, false),
            b = TOP + ph,
            t = TOP + ph + 5.0,
            l = TOP + ph + 20.0,
        )
        .unwrap();
        let yv = y0 + f * (y1 - y0);
        let y = py(yv);
        writeln!(
            w,
            r#"<line x1="{a:.2}" y1="{y:.2}" x2="{LEFT}" y2="{y:.2}" stroke="black"/><text x="{t:.2}" y="{ty:.2}" text-anchor="end">{}</text>"#,
            tick_label(yv, axes.log_y),
            a = LEFT - 5.0,
            t = LEFT - 8.0,
            ty = y + 4.0,
        )
        .unwrap();
    }
    writeln!(
        w,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 15.0,
        escape(&axes.x_label)
    )
    .unwrap();
    let y_label = if axes.log_y {
        format!("{} (log)", axes.y_label)
    } else {
        axes.y_label.clone()
    };
    writeln!(
        w,
        r#"<text x="20" y="{cy}" text-anchor="middle" transform="rotate(-90 20 {cy})">{}</text>"#,
        escape(&y_label),
        cy = TOP + ph / 2.0
    )
    .unwrap();

    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let clipped = axes.log_y && s.points.iter().any(|p| p.1 <= 0.0);
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.0.is_finite() && transform(p.1).is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(transform(y))))
            .collect();
        writeln!(
            w,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        )
        .unwrap();
        let label = if clipped {
            format!("{} (clipped)", s.label)
        } else {
            s.label.clone()
        };
        let ly = TOP + 10.0 + 18.0 * k as f64;
        let lx = WIDTH - RIGHT + 15.0;
        writeln!(
            w,
            r#"<line class="legend" x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(&label)
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

pub fn render_plot(series: &[Series], axes: &Axes, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let svg = render_plot_svg(series, axes)?;
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}
