//! Minimal line charts: axes, light grid and one polyline per series.
//! Labels live in the accompanying text report.

use std::path::Path;

use anyhow::{Context, Result};
use image::{Rgb, RgbImage};

const W: u32 = 480;
const H: u32 = 300;
const MARGIN: u32 = 24;

const PALETTE: [([u8; 3], &str); 6] = [
    ([31, 119, 180], "blue"),
    ([214, 39, 40], "red"),
    ([44, 160, 44], "green"),
    ([255, 127, 14], "orange"),
    ([148, 103, 189], "purple"),
    ([23, 190, 207], "cyan"),
];

pub struct Series {
    pub label: String,
    pub color: usize,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(label: &str, color: usize, points: Vec<(f64, f64)>) -> Self {
        Self { label: label.into(), color: color % PALETTE.len(), points }
    }

    pub fn color_name(&self) -> &'static str {
        PALETTE[self.color].1
    }
}

fn bounds(series: &[Series]) -> (f64, f64, f64, f64) {
    let pts = || series.iter().flat_map(|s| s.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64, f64::NEG_INFINITY);
    for &(x, y) in pts() {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    (x0, x1, y0, y1 * 1.05)
}

fn line(img: &mut RgbImage, (ax, ay): (f64, f64), (bx, by): (f64, f64), c: Rgb<u8>) {
    let n = (bx - ax).abs().max((by - ay).abs()).ceil().max(1.0) as usize;
    for i in 0..=n {
        let t = i as f64 / n as f64;
        let (x, y) = (ax + t * (bx - ax), ay + t * (by - ay));
        for (dx, dy) in [(0, 0), (1, 0), (0, 1)] {
            let (px, py) = (x.round() as i64 + dx, y.round() as i64 + dy);
            if px >= 0 && py >= 0 && (px as u32) < W && (py as u32) < H {
                img.put_pixel(px as u32, py as u32, c);
            }
        }
    }
}

pub fn line_chart(series: &[Series], path: &Path) -> Result<()> {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let (x0, x1, y0, y1) = bounds(series);
    let (l, r, t, b) = (MARGIN as f64, (W - MARGIN) as f64, MARGIN as f64, (H - MARGIN) as f64);
    let to_px = |x: f64, y: f64| (l + (x - x0) / (x1 - x0) * (r - l), b - (y - y0) / (y1 - y0) * (b - t));
    let grid = Rgb([225, 225, 225]);
    for k in 1..5 {
        let y = t + (b - t) * k as f64 / 5.0;
        line(&mut img, (l, y), (r, y), grid);
    }
    let axis = Rgb([60, 60, 60]);
    line(&mut img, (l, b), (r, b), axis);
    line(&mut img, (l, t), (l, b), axis);
    for s in series {
        let c = Rgb(PALETTE[s.color].0);
        let pts: Vec<(f64, f64)> = s.points.iter().filter(|p| p.0.is_finite() && p.1.is_finite()).map(|&(x, y)| to_px(x, y)).collect();
        for w in pts.windows(2) {
            line(&mut img, w[0], w[1], c);
        }
        if pts.len() == 1 {
            line(&mut img, pts[0], pts[0], c);
        }
    }
    img.save(path).with_context(|| format!("writing {}", path.display()))
}
