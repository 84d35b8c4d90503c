use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed-width bin counts. Values outside the range land in the first or last bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub const DEFAULT_RANGE: (f64, f64) = (-30.0, 30.0);
    pub const DEFAULT_WIDTH: f64 = 2.0;

    pub fn new(values: &[f64], width: f64, range: (f64, f64)) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("histogram of no values"));
        }
        let (lo, hi) = range;
        if !(width > 0.0) || !(hi > lo) {
            return Err(Error::invalid(format!("bad histogram layout: width {width}, range {lo}..{hi}")));
        }
        let bins = ((hi - lo) / width).round() as usize;
        if bins == 0 || ((hi - lo) - bins as f64 * width).abs() > 1e-9 * width.max(1.0) {
            return Err(Error::invalid(format!("range {lo}..{hi} is not a whole number of {width} dB bins")));
        }
        let edges: Vec<f64> = (0..=bins).map(|i| lo + i as f64 * width).collect();
        let mut counts = vec![0usize; bins];
        for &v in values {
            let idx = if v.is_nan() {
                return Err(Error::invalid("histogram value is NaN"));
            } else {
                (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1)
            };
            counts[idx] += 1;
        }
        Ok(Self { edges, counts })
    }

    pub fn with_defaults(values: &[f64]) -> Result<Self> {
        Self::new(values, Self::DEFAULT_WIDTH, Self::DEFAULT_RANGE)
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("lower,upper,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let _ = writeln!(out, "{},{},{}", self.edges[i], self.edges[i + 1], c);
        }
        out
    }
}

/// Bar chart of a histogram as a standalone SVG document.
pub fn histogram_svg(hist: &Histogram, title: &str) -> String {
    let (w, h, pad) = (640.0, 360.0, 48.0);
    let bins = hist.counts.len().max(1) as f64;
    let peak = hist.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let bar_w = (w - 2.0 * pad) / bins;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(title));
    for (i, &c) in hist.counts.iter().enumerate() {
        let bh = (h - 2.0 * pad) * c as f64 / peak;
        let x = pad + i as f64 * bar_w;
        let y = h - pad - bh;
        let _ = writeln!(
            svg,
            r##"<rect x="{x:.2}" y="{y:.2}" width="{:.2}" height="{bh:.2}" fill="#4a78b5" stroke="white" stroke-width="0.5"/>"##,
            bar_w
        );
    }
    let _ = writeln!(svg, r#"<line x1="{pad}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/>"#, h - pad, w - pad);
    let _ = writeln!(svg, r#"<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{}" stroke="black"/>"#, h - pad);
    let step = (hist.edges.len() / 6).max(1);
    for (i, e) in hist.edges.iter().enumerate().step_by(step) {
        let x = pad + i as f64 * bar_w;
        let _ = writeln!(svg, r#"<text x="{x:.2}" y="{}" text-anchor="middle">{e}</text>"#, h - pad + 16.0);
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">SI-SNRi (dB)</text>"#, w / 2.0, h - 8.0);
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, pad - 4.0, pad + 4.0, peak as usize);
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
