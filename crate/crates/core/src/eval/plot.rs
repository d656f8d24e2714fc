//! Standalone SVG 1.1 line plots of a horizon series: truth and prediction
//! polylines over dated axes, no external assets.

use std::path::Path;

use super::{EvalError, EvalResult, HorizonSeries};
use crate::util::atomic_write;

const WIDTH: f64 = 960.0;
const HEIGHT: f64 = 540.0;
const MARGIN_LEFT: f64 = 80.0;
const MARGIN_RIGHT: f64 = 24.0;
const MARGIN_TOP: f64 = 48.0;
const MARGIN_BOTTOM: f64 = 64.0;
const TRUTH_COLOR: &str = "#2b6cb0";
const PRED_COLOR: &str = "#c53030";

/// Escapes text for XML text nodes and attribute values.
fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn format_value(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if a >= 100_000.0 {
        format!("{v:.3e}")
    } else if a >= 100.0 {
        format!("{v:.0}")
    } else {
        let s = format!("{v:.2}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

struct Frame {
    n: usize,
    lo: f64,
    hi: f64,
}

impl Frame {
    fn x(&self, i: usize) -> f64 {
        let span = (self.n - 1).max(1) as f64;
        MARGIN_LEFT + (WIDTH - MARGIN_LEFT - MARGIN_RIGHT) * i as f64 / span
    }

    fn y(&self, v: f64) -> f64 {
        let t = (v - self.lo) / (self.hi - self.lo);
        MARGIN_TOP + (HEIGHT - MARGIN_TOP - MARGIN_BOTTOM) * (1.0 - t)
    }
}

fn polyline(frame: &Frame, values: &[f64], color: &str) -> String {
    let points: Vec<String> = values
        .iter()
        .enumerate()
        .map(|(i, v)| format!("{:.2},{:.2}", frame.x(i), frame.y(*v)))
        .collect();
    format!(
        "  <polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
        points.join(" ")
    )
}

/// Renders the series to a self-contained SVG file. `config_echo`, when
/// given, is embedded verbatim (escaped) in a metadata element so the plot
/// carries its provenance.
pub fn emit_plot(
    series: &HorizonSeries,
    title: &str,
    config_echo: Option<&str>,
    path: &Path,
) -> EvalResult<()> {
    let n = series.dates.len();
    if n == 0 {
        return Err(EvalError::Empty("plot over an empty series".into()));
    }
    if series.predictions.len() != n || series.truths.len() != n {
        return Err(EvalError::Shape(format!(
            "{} dates, {} predictions, {} truths",
            n,
            series.predictions.len(),
            series.truths.len()
        )));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in series.predictions.iter().chain(&series.truths) {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 1.0 };
    let frame = Frame {
        n,
        lo: lo - pad,
        hi: hi + pad,
    };

    let mut svg = String::new();
    svg.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    if let Some(echo) = config_echo {
        svg.push_str(&format!("  <metadata>{}</metadata>\n", xml_escape(echo)));
    }
    svg.push_str("  <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "  <text x=\"{:.0}\" y=\"28\" font-family=\"sans-serif\" font-size=\"18\" text-anchor=\"middle\">{}</text>\n",
        WIDTH / 2.0,
        xml_escape(title)
    ));

    // Axes.
    let x0 = MARGIN_LEFT;
    let x1 = WIDTH - MARGIN_RIGHT;
    let y0 = HEIGHT - MARGIN_BOTTOM;
    let y1 = MARGIN_TOP;
    svg.push_str(&format!(
        "  <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n"
    ));
    svg.push_str(&format!(
        "  <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>\n"
    ));

    // Y ticks and horizontal grid.
    let y_ticks = 5usize;
    for i in 0..=y_ticks {
        let v = frame.lo + (frame.hi - frame.lo) * i as f64 / y_ticks as f64;
        let y = frame.y(v);
        svg.push_str(&format!(
            "  <line x1=\"{x0}\" y1=\"{y:.2}\" x2=\"{x1}\" y2=\"{y:.2}\" stroke=\"#dddddd\" stroke-width=\"0.5\"/>\n"
        ));
        svg.push_str(&format!(
            "  <text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{}</text>\n",
            x0 - 6.0,
            y + 4.0,
            format_value(v)
        ));
    }

    // X ticks: up to six evenly spaced dates.
    let tick_count = n.min(6);
    for j in 0..tick_count {
        let i = if tick_count == 1 {
            0
        } else {
            j * (n - 1) / (tick_count - 1)
        };
        let x = frame.x(i);
        svg.push_str(&format!(
            "  <line x1=\"{x:.2}\" y1=\"{y0}\" x2=\"{x:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
            y0 + 5.0
        ));
        svg.push_str(&format!(
            "  <text x=\"{x:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
            y0 + 20.0,
            series.dates[i]
        ));
    }

    // Axis labels.
    svg.push_str(&format!(
        "  <text x=\"{:.0}\" y=\"{:.0}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\">date</text>\n",
        (x0 + x1) / 2.0,
        HEIGHT - 16.0
    ));
    svg.push_str(&format!(
        "  <text x=\"20\" y=\"{:.0}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 20 {:.0})\">value</text>\n",
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    ));

    // Data: truth first, prediction on top.
    svg.push_str(&polyline(&frame, &series.truths, TRUTH_COLOR));
    svg.push_str(&polyline(&frame, &series.predictions, PRED_COLOR));

    // Legend.
    let lx = x1 - 150.0;
    for (row, (label, color)) in [("actual", TRUTH_COLOR), ("predicted", PRED_COLOR)]
        .iter()
        .enumerate()
    {
        let ly = y1 + 14.0 + row as f64 * 18.0;
        svg.push_str(&format!(
            "  <line x1=\"{lx}\" y1=\"{ly}\" x2=\"{:.0}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            lx + 24.0
        ));
        svg.push_str(&format!(
            "  <text x=\"{:.0}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"12\">{label}</text>\n",
            lx + 30.0,
            ly + 4.0
        ));
    }

    svg.push_str("</svg>\n");
    atomic_write(path, svg.as_bytes()).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}
