//! Minimal SVG line charts and histograms.

use std::fmt::Write as _;

use crate::error::{Error, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(label: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self {
            label: label.into(),
            points,
        }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn bounds(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return None;
    }
    if hi - lo < 1e-300 {
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.5 };
        return Some((lo - pad, hi + pad));
    }
    Some((lo, hi))
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN - (y - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - 2.0 * MARGIN)
    }

    fn axes(&self, out: &mut String, title: &str, x_label: &str, y_label: &str) {
        let (l, r, t, b) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
        let _ = writeln!(out, r##"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"##);
        let _ = writeln!(out, r##"<path d="M{l},{t} L{l},{b} L{r},{b}" stroke="#333" fill="none"/>"##);
        for k in 0..=4 {
            let f = k as f64 / 4.0;
            let xv = self.x.0 + f * (self.x.1 - self.x.0);
            let yv = self.y.0 + f * (self.y.1 - self.y.0);
            let (xp, yp) = (self.px(xv), self.py(yv));
            let _ = writeln!(out, r##"<text x="{xp:.1}" y="{:.1}" font-size="11" text-anchor="middle">{}</text>"##, b + 16.0, tick(xv));
            let _ = writeln!(out, r##"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end">{}</text>"##, l - 6.0, yp + 4.0, tick(yv));
        }
        let _ = writeln!(out, r##"<text x="{:.1}" y="24" font-size="15" text-anchor="middle">{}</text>"##, WIDTH / 2.0, escape(title));
        let _ = writeln!(out, r##"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">{}</text>"##, WIDTH / 2.0, HEIGHT - 14.0, escape(x_label));
        let _ = writeln!(
            out,
            r##"<text x="16" y="{:.1}" font-size="12" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"##,
            HEIGHT / 2.0,
            HEIGHT / 2.0,
            escape(y_label)
        );
    }
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.1e}")
    } else {
        format!("{v:.3}")
    }
}

fn open_svg() -> String {
    format!(r##"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"##) + "\n"
}

/// Line chart of one or more series.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<String> {
    let all = || series.iter().flat_map(|s| s.points.iter());
    let x = bounds(all().map(|p| p.0));
    let y = bounds(all().map(|p| p.1));
    let (Some(x), Some(y)) = (x, y) else {
        return Err(Error::validation("series", "nothing finite to plot"));
    };
    let frame = Frame { x, y };
    let mut out = open_svg();
    frame.axes(&mut out, title, x_label, y_label);
    for (k, s) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let mut d = String::new();
        let mut pen_up = true;
        for &(px, py) in &s.points {
            if !(px.is_finite() && py.is_finite()) {
                pen_up = true;
                continue;
            }
            let _ = write!(d, "{}{:.2},{:.2} ", if pen_up { "M" } else { "L" }, frame.px(px), frame.py(py));
            pen_up = false;
        }
        let _ = writeln!(out, r##"<path d="{}" stroke="{color}" stroke-width="1.5" fill="none"/>"##, d.trim_end());
        let ly = MARGIN + 14.0 * k as f64;
        let _ = writeln!(
            out,
            r##"<text x="{:.1}" y="{ly:.1}" font-size="11" fill="{color}" text-anchor="end">{}</text>"##,
            WIDTH - MARGIN,
            escape(&s.label)
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Bin counts over `[lo, hi]`; the last bin is closed.
pub fn histogram_counts(values: &[f64], bins: usize, lo: f64, hi: f64) -> Vec<usize> {
    let mut counts = vec![0; bins];
    for &v in values.iter().filter(|v| v.is_finite()) {
        let f = if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
        let k = ((f * bins as f64).floor().max(0.0) as usize).min(bins - 1);
        counts[k] += 1;
    }
    counts
}

pub fn histogram(title: &str, x_label: &str, values: &[f64], bins: usize) -> Result<String> {
    if bins == 0 {
        return Err(Error::validation("bins", "must be positive"));
    }
    let Some((lo, hi)) = bounds(values.iter().copied()) else {
        return Err(Error::validation("values", "nothing finite to plot"));
    };
    let lo = lo.min(0.0);
    let counts = histogram_counts(values, bins, lo, hi);
    let top = *counts.iter().max().unwrap_or(&1) as f64;
    let frame = Frame {
        x: (lo, hi),
        y: (0.0, top.max(1.0)),
    };
    let mut out = open_svg();
    frame.axes(&mut out, title, x_label, "count");
    let w = (hi - lo) / bins as f64;
    for (k, &c) in counts.iter().enumerate() {
        let x0 = frame.px(lo + k as f64 * w);
        let x1 = frame.px(lo + (k + 1) as f64 * w);
        let y = frame.py(c as f64);
        let _ = writeln!(
            out,
            r##"<rect x="{x0:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="{}" stroke="white"/>"##,
            (x1 - x0).max(0.0),
            (frame.py(0.0) - y).max(0.0),
            COLORS[0]
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_counts_every_finite_value() {
        let v = [0.0, 0.1, 0.2, 0.3, 1.0, f64::NAN];
        let c = histogram_counts(&v, 4, 0.0, 1.0);
        assert_eq!(c, vec![3, 1, 0, 1]);
        assert_eq!(c.iter().sum::<usize>(), 5);
    }

    #[test]
    fn charts_are_svg() {
        let s = line_chart("loss", "step", "value", &[Series::new("a<b", vec![(0.0, 1.0), (1.0, 0.5), (2.0, f64::NAN), (3.0, 0.1)])]).unwrap();
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert!(s.contains("a&lt;b"));
        // Axis frame plus two pen strokes split at the NaN.
        assert_eq!(s.matches(" M").count() + s.matches("\"M").count(), 3);
        let h = histogram("d", "m", &[0.01, 0.02, 0.5], 5).unwrap();
        assert_eq!(h.matches("<rect").count(), 6);
        assert!(line_chart("x", "", "", &[Series::new("e", vec![])]).is_err());
    }
}
