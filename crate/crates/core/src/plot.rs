//! Portable pixel-map heatmaps and SVG/CSV metric curves.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::GridSpec;
use crate::nn::Tensor;
use crate::sim::Box3D;

/// An 8-bit RGB raster.
#[derive(Clone, Debug, PartialEq)]
pub struct Rgb {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Rgb {
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }

    fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        if x < self.width && y < self.height {
            let k = 3 * (y * self.width + x);
            self.data[k..k + 3].copy_from_slice(&rgb);
        }
    }
}

/// Objectness (max class score) of a `(1, rows, cols, classes)` score map in
/// red on black, forward pointing up and left to the left. Ground-truth
/// centers are marked in green.
pub fn objectness_heatmap(scores: &Tensor, grid: &GridSpec, gt: &[Box3D]) -> Result<Rgb> {
    let (rows, cols) = grid.dims(grid.scale)?;
    let [n, h, w, _] = scores.shape();
    if (n, h, w) != (1, rows, cols) {
        return Err(Error::Shape(format!("score map {:?} does not match grid {rows}x{cols}", scores.shape())));
    }
    let mut img = Rgb {
        width: cols,
        height: rows,
        data: vec![0; rows * cols * 3],
    };
    for i in 0..rows {
        for j in 0..cols {
            let s = scores.pixel(0, i, j).iter().fold(0.0f32, |a, &b| a.max(b));
            let red = (s.clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put(cols - 1 - j, rows - 1 - i, [red, 0, 0]);
        }
    }
    for b in gt {
        if let Some((i, j)) = grid.index(b.center, grid.scale).inside() {
            img.put(cols - 1 - j, rows - 1 - i, [0, 255, 0]);
        }
    }
    Ok(img)
}

/// One labelled polyline; `None` values leave a gap.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, Option<f64>)>,
}

pub fn curves_csv(series: &[Series]) -> String {
    let mut out = String::from("label,x,y\n");
    for s in series {
        for (x, y) in &s.points {
            let y = y.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{x},{y}", s.label.replace(',', ";"));
        }
    }
    out
}

const PALETTE: [&str; 6] = ["#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// A line chart with linear axes spanning the data (y from 0).
pub fn curves_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h, m) = (640.0, 400.0, 56.0);
    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
    let (x0, x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    let (x0, x1) = if x0.is_finite() && x1 > x0 { (x0, x1) } else { (0.0, 1.0) };
    let y1 = series
        .iter()
        .flat_map(|s| s.points.iter().filter_map(|p| p.1))
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let px = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let py = |y: f64| h - m - y / y1 * (h - 2.0 * m);
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, xml_escape(title));
    let _ = writeln!(
        svg,
        r#"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="black"/><line x1="{m}" y1="{m}" x2="{m}" y2="{}" stroke="black"/>"#,
        h - m,
        w - m,
        h - m,
        h - m
    );
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, w / 2.0, h - 16.0, xml_escape(x_label));
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        h / 2.0,
        h / 2.0,
        xml_escape(y_label)
    );
    for k in 0..=4 {
        let (xv, yv) = (x0 + (x1 - x0) * k as f64 / 4.0, y1 * k as f64 / 4.0);
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{}" text-anchor="middle">{xv:.3}</text>"#, px(xv), h - m + 16.0);
        let _ = writeln!(svg, r#"<text x="{}" y="{:.1}" text-anchor="end">{yv:.3}</text>"#, m - 4.0, py(yv) + 4.0);
    }
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        // split at gaps
        let mut runs: Vec<Vec<(f64, f64)>> = vec![Vec::new()];
        for &(x, y) in &s.points {
            match y {
                Some(y) => runs.last_mut().expect("non-empty").push((px(x), py(y))),
                None => runs.push(Vec::new()),
            }
        }
        for run in runs.iter().filter(|r| !r.is_empty()) {
            let pts: Vec<String> = run.iter().map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
            let _ = writeln!(svg, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, pts.join(" "));
            for (x, y) in run {
                let _ = writeln!(svg, r#"<circle cx="{x:.1}" cy="{y:.1}" r="3" fill="{color}"/>"#);
            }
        }
        let ly = m + 16.0 * k as f64;
        let _ = writeln!(
            svg,
            r#"<rect x="{}" y="{}" width="10" height="10" fill="{color}"/><text x="{}" y="{}">{}</text>"#,
            w - m - 110.0,
            ly - 9.0,
            w - m - 95.0,
            ly,
            xml_escape(&s.label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}
