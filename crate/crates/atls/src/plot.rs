//! Minimal SVG line plots: one curve per series with a shaded
//! inter-quartile band, enough to eyeball a robustness sweep without
//! external tooling.

use std::path::Path;

use crate::error::{AtlsError, Result};

/// One plotted curve: per x position a (lower, median, upper) triple,
/// typically the quartiles over repeats.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub xs: Vec<f64>,
    pub stats: Vec<(f64, f64, f64)>,
}

/// (q1, median, q3) by linear interpolation between order statistics, the
/// same convention as numpy's default percentile. Input need not be sorted.
pub fn quartiles(values: &[f64]) -> Option<(f64, f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("no NaN in plotted values"));
    let at = |p: f64| {
        let h = (v.len() - 1) as f64 * p;
        let i = h.floor() as usize;
        let frac = h - i as f64;
        if i + 1 < v.len() {
            v[i] * (1.0 - frac) + v[i + 1] * frac
        } else {
            v[i]
        }
    };
    Some((at(0.25), at(0.5), at(0.75)))
}

const PALETTE: &[&str] = &[
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

const W: f64 = 640.0;
const H: f64 = 420.0;
const ML: f64 = 72.0;
const MR: f64 = 24.0;
const MT: f64 = 46.0;
const MB: f64 = 56.0;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn tick_label(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let a = v.abs();
    let s = if a >= 100.0 {
        format!("{v:.0}")
    } else if a >= 1.0 {
        format!("{v:.2}")
    } else {
        format!("{v:.3}")
    };
    let s = s.trim_end_matches('0').trim_end_matches('.').to_string();
    if s.is_empty() || s == "-" {
        "0".to_string()
    } else {
        s
    }
}

/// Render the series to a standalone SVG document.
pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let mut xs_all = Vec::new();
    let mut ys_all = Vec::new();
    for s in series {
        assert_eq!(s.xs.len(), s.stats.len(), "series {} misaligned", s.label);
        xs_all.extend_from_slice(&s.xs);
        for &(lo, med, hi) in &s.stats {
            ys_all.extend_from_slice(&[lo, med, hi]);
        }
    }
    let (x0, x1) = padded_range(&xs_all);
    let (y0, y1) = padded_range(&ys_all);
    let px = |x: f64| ML + (x - x0) / (x1 - x0) * (W - ML - MR);
    let py = |y: f64| H - MB - (y - y0) / (y1 - y0) * (H - MT - MB);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\">\n"
    ));
    svg.push_str(&format!(
        "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        W / 2.0,
        esc(title)
    ));

    // Axes and ticks.
    svg.push_str(&format!(
        "<line x1=\"{ML}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        H - MB,
        W - MR,
        H - MB
    ));
    svg.push_str(&format!(
        "<line x1=\"{ML}\" y1=\"{MT}\" x2=\"{ML}\" y2=\"{}\" stroke=\"black\"/>\n",
        H - MB
    ));
    for k in 0..=4 {
        let fx = x0 + (x1 - x0) * k as f64 / 4.0;
        let fy = y0 + (y1 - y0) * k as f64 / 4.0;
        let gx = px(fx);
        let gy = py(fy);
        svg.push_str(&format!(
            "<line x1=\"{gx}\" y1=\"{}\" x2=\"{gx}\" y2=\"{}\" stroke=\"black\"/>\n",
            H - MB,
            H - MB + 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{gx}\" y=\"{}\" text-anchor=\"middle\" font-size=\"11\">{}</text>\n",
            H - MB + 18.0,
            tick_label(fx)
        ));
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{gy}\" x2=\"{ML}\" y2=\"{gy}\" stroke=\"black\"/>\n",
            ML - 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-size=\"11\">{}</text>\n",
            ML - 8.0,
            gy + 4.0,
            tick_label(fy)
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"13\">{}</text>\n",
        (ML + W - MR) / 2.0,
        H - 14.0,
        esc(x_label)
    ));
    svg.push_str(&format!(
        "<text x=\"18\" y=\"{}\" text-anchor=\"middle\" font-size=\"13\" \
         transform=\"rotate(-90 18 {})\">{}</text>\n",
        (MT + H - MB) / 2.0,
        (MT + H - MB) / 2.0,
        esc(y_label)
    ));

    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        if s.xs.is_empty() {
            continue;
        }
        // IQR band: upper edge forward, lower edge back.
        let mut pts = String::new();
        for (x, &(_, _, hi)) in s.xs.iter().zip(&s.stats) {
            pts.push_str(&format!("{:.2},{:.2} ", px(*x), py(hi)));
        }
        for (x, &(lo, _, _)) in s.xs.iter().zip(&s.stats).rev() {
            pts.push_str(&format!("{:.2},{:.2} ", px(*x), py(lo)));
        }
        svg.push_str(&format!(
            "<polygon points=\"{}\" fill=\"{color}\" fill-opacity=\"0.18\" stroke=\"none\"/>\n",
            pts.trim_end()
        ));
        let mut line = String::new();
        for (x, &(_, med, _)) in s.xs.iter().zip(&s.stats) {
            line.push_str(&format!("{:.2},{:.2} ", px(*x), py(med)));
        }
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            line.trim_end()
        ));
        for (x, &(_, med, _)) in s.xs.iter().zip(&s.stats) {
            svg.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>\n",
                px(*x),
                py(med)
            ));
        }
        // Legend entry.
        let ly = MT + 16.0 * si as f64;
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            W - MR - 150.0,
            W - MR - 126.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\">{}</text>\n",
            W - MR - 120.0,
            ly + 4.0,
            esc(&s.label)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn padded_range(vals: &[f64]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in vals {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if lo == hi {
        let pad = lo.abs().max(1.0) * 0.1;
        return (lo - pad, hi + pad);
    }
    let pad = (hi - lo) * 0.05;
    (lo - pad, hi + pad)
}

pub fn write_plot(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
) -> Result<()> {
    let svg = line_plot(title, x_label, y_label, series);
    std::fs::write(path, svg).map_err(|e| AtlsError::io(path.display().to_string(), e))
}
