//! Vector-graphic report figures.
//!
//! One panel per data source (ground truth first, then variants), each
//! stacking three mini-plots: PPF and RFTN dose traces (y-axis dose/10sec)
//! and the simulated BIS response (dimensionless). Panels are written
//! directly as SVG with fixed-precision coordinates, so regenerating a
//! report from the same inputs is byte-identical.

use std::fmt::Write as _;

/// Traces for one panel; outer Vec = samples, inner = time series.
#[derive(Clone, Debug)]
pub struct Panel {
    pub title: String,
    pub ppf: Vec<Vec<f64>>,
    pub rftn: Vec<Vec<f64>>,
    pub bis: Vec<Vec<f64>>,
}

const PANEL_WIDTH: f64 = 380.0;
const PANEL_HEIGHT: f64 = 330.0;
const SUBPLOT_HEIGHT: f64 = 92.0;
const MARGIN_LEFT: f64 = 52.0;
const MARGIN_RIGHT: f64 = 12.0;
const MARGIN_TOP: f64 = 26.0;
const SUBPLOT_GAP: f64 = 8.0;
const COLUMNS: usize = 3;

const TRACE_COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn fmt(v: f64) -> String {
    format!("{v:.3}")
}

fn polyline(
    out: &mut String,
    series: &[f64],
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
    max: f64,
    color: &str,
) {
    if series.is_empty() {
        return;
    }
    let n = series.len().max(2);
    let mut points = String::new();
    for (i, v) in series.iter().enumerate() {
        let x = x0 + w * i as f64 / (n - 1) as f64;
        let frac = if max > 0.0 { (v / max).clamp(0.0, 1.0) } else { 0.0 };
        let y = y0 + h * (1.0 - frac);
        if i > 0 {
            points.push(' ');
        }
        let _ = write!(points, "{},{}", fmt(x), fmt(y));
    }
    let _ = writeln!(
        out,
        r##"<polyline points="{points}" fill="none" stroke="{color}" stroke-width="1.1"/>"##
    );
}

fn subplot(
    out: &mut String,
    traces: &[Vec<f64>],
    label: &str,
    panel_x: f64,
    panel_y: f64,
    index: usize,
) {
    let x0 = panel_x + MARGIN_LEFT;
    let y0 = panel_y + MARGIN_TOP + index as f64 * (SUBPLOT_HEIGHT + SUBPLOT_GAP);
    let w = PANEL_WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let h = SUBPLOT_HEIGHT;
    let max = traces
        .iter()
        .flat_map(|t| t.iter().copied())
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let _ = writeln!(
        out,
        r##"<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="#888" stroke-width="0.6"/>"##,
        fmt(x0),
        fmt(y0),
        fmt(w),
        fmt(h)
    );
    for (i, t) in traces.iter().enumerate() {
        polyline(out, t, x0, y0, w, h, max, TRACE_COLORS[i % TRACE_COLORS.len()]);
    }
    // Axis annotations: the series maximum at the top, zero at the bottom.
    let _ = writeln!(
        out,
        r##"<text x="{}" y="{}" font-size="8" text-anchor="end" fill="#444">{}</text>"##,
        fmt(x0 - 3.0),
        fmt(y0 + 8.0),
        fmt(max)
    );
    let _ = writeln!(
        out,
        r##"<text x="{}" y="{}" font-size="8" text-anchor="end" fill="#444">0</text>"##,
        fmt(x0 - 3.0),
        fmt(y0 + h)
    );
    let _ = writeln!(
        out,
        r##"<text x="{}" y="{}" font-size="9" text-anchor="middle" fill="#222" transform="rotate(-90 {} {})">{label}</text>"##,
        fmt(panel_x + 14.0),
        fmt(y0 + h / 2.0),
        fmt(panel_x + 14.0),
        fmt(y0 + h / 2.0)
    );
}

/// Render the full multi-panel figure.
pub fn render_figure(panels: &[Panel]) -> String {
    let columns = COLUMNS.min(panels.len().max(1));
    let rows = panels.len().div_ceil(columns);
    let width = columns as f64 * (PANEL_WIDTH + 10.0) + 10.0;
    let height = rows as f64 * (PANEL_HEIGHT + 34.0) + 10.0;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}">"##,
        fmt(width),
        fmt(height),
        fmt(width),
        fmt(height)
    );
    let _ = writeln!(out, r##"<rect width="100%" height="100%" fill="white"/>"##);
    for (i, panel) in panels.iter().enumerate() {
        let col = i % columns;
        let row = i / columns;
        let panel_x = 10.0 + col as f64 * (PANEL_WIDTH + 10.0);
        let panel_y = 10.0 + row as f64 * (PANEL_HEIGHT + 34.0);
        let tag = (b'a' + (i % 26) as u8) as char;
        subplot(&mut out, &panel.ppf, "PPF (dose/10sec)", panel_x, panel_y, 0);
        subplot(&mut out, &panel.rftn, "RFTN (dose/10sec)", panel_x, panel_y, 1);
        subplot(&mut out, &panel.bis, "BIS (dimensionless)", panel_x, panel_y, 2);
        let _ = writeln!(
            out,
            r##"<text x="{}" y="{}" font-size="12" text-anchor="middle" fill="#000">({tag}) {}</text>"##,
            fmt(panel_x + PANEL_WIDTH / 2.0),
            fmt(panel_y + PANEL_HEIGHT + 18.0),
            panel.title
        );
        let _ = writeln!(
            out,
            r##"<text x="{}" y="{}" font-size="9" text-anchor="middle" fill="#555">time (10 s steps)</text>"##,
            fmt(panel_x + MARGIN_LEFT + (PANEL_WIDTH - MARGIN_LEFT - MARGIN_RIGHT) / 2.0),
            fmt(panel_y + PANEL_HEIGHT - 2.0)
        );
    }
    out.push_str("</svg>\n");
    out
}
