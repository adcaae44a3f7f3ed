//! Standalone SVG line charts of per-session metrics.
//!
//! Output depends only on the inputs: coordinates are printed with fixed
//! precision and nothing time- or environment-dependent is embedded.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::sessions::SessionMetrics;

pub const PLOT_METRICS: [&str; 6] = [
    "train_acc",
    "train_loss",
    "val_acc",
    "val_err",
    "base_acc",
    "new_acc",
];

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 180.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

/// Extracts `(session, value)` points for `metric`; sessions without a value
/// (new-class accuracy at session 0) are skipped.
pub fn metric_points(rows: &[SessionMetrics], metric: &str) -> Result<Vec<(usize, f64)>> {
    let get: fn(&SessionMetrics) -> Option<f64> = match metric {
        "train_acc" => |s| Some(s.train_acc),
        "train_loss" => |s| Some(s.train_loss),
        "val_acc" => |s| Some(s.val_acc),
        "val_err" => |s| Some(s.val_err),
        "base_acc" => |s| Some(s.base_acc),
        "new_acc" => |s| s.new_acc,
        other => {
            return Err(Error::Config(format!(
                "unknown metric `{other}` (expected one of {})",
                PLOT_METRICS.join(", ")
            )))
        }
    };
    Ok(rows
        .iter()
        .filter_map(|s| get(s).map(|v| (s.session, v)))
        .collect())
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// One polyline and legend entry per series; x is the session index.
pub fn render_svg(series: &[(String, Vec<(usize, f64)>)], metric: &str) -> Result<String> {
    if series.is_empty() {
        return Err(Error::Config("plot needs at least one input".into()));
    }
    if series
        .iter()
        .flat_map(|(_, p)| p)
        .any(|(_, v)| !v.is_finite())
    {
        return Err(Error::Numeric("plot values must be finite".into()));
    }
    let max_session = series
        .iter()
        .flat_map(|(_, p)| p.iter().map(|(s, _)| *s))
        .max()
        .unwrap_or(0)
        .max(1);
    let (y_min, y_max) = if metric == "train_loss" {
        let hi = series
            .iter()
            .flat_map(|(_, p)| p.iter().map(|(_, v)| *v))
            .fold(0.0f64, f64::max);
        (0.0, if hi > 0.0 { hi * 1.1 } else { 1.0 })
    } else {
        (0.0, 100.0)
    };
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let sx = |s: usize| LEFT + plot_w * s as f64 / max_session as f64;
    let sy = |v: f64| TOP + plot_h * (1.0 - (v - y_min) / (y_max - y_min));

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        out,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="24" text-anchor="middle" font-size="14">{} per session</text>"#,
        LEFT + plot_w / 2.0,
        escape(metric)
    );
    let _ = writeln!(
        out,
        r#"<g class="axes" stroke="black"><line x1="{LEFT}" y1="{:.2}" x2="{:.2}" y2="{:.2}"/><line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{:.2}"/></g>"#,
        TOP + plot_h,
        LEFT + plot_w,
        TOP + plot_h,
        TOP + plot_h
    );
    for s in 0..=max_session {
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{s}</text>"#,
            sx(s),
            TOP + plot_h + 18.0
        );
    }
    for k in 0..=5 {
        let v = y_min + (y_max - y_min) * k as f64 / 5.0;
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{v:.1}</text>"#,
            LEFT - 6.0,
            sy(v) + 4.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">session</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 12.0
    );
    for (i, (label, points)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let coords: Vec<String> = points
            .iter()
            .map(|(s, v)| format!("{:.2},{:.2}", sx(*s), sy(*v)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            coords.join(" ")
        );
        let ly = TOP + 10.0 + 20.0 * i as f64;
        let lx = WIDTH - RIGHT + 15.0;
        let _ = writeln!(
            out,
            r#"<g class="legend"><line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{}</text></g>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(label)
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}
