//! Aligned RoI average pooling: each output bin averages bilinear samples
//! on a regular `sampling × sampling` grid inside the bin. The sampling
//! taps depend only on the box, so the backward pass scatters through the
//! same taps.

use crate::geometry::BBox;
use crate::tensor::Tensor3;

#[derive(Clone, Debug)]
pub struct RoiAlign {
    pub output: usize,
    pub sampling: usize,
    pub spatial_scale: f64,
}

/// Flat-plane taps `(index, weight)` per output bin for one box.
#[derive(Clone, Debug)]
pub struct RoiTaps {
    bins: Vec<Vec<(u32, f64)>>,
}

impl RoiAlign {
    pub fn new(output: usize, sampling: usize, spatial_scale: f64) -> Self {
        Self { output, sampling, spatial_scale }
    }

    pub fn bins(&self) -> usize {
        self.output * self.output
    }

    pub fn taps(&self, bbox: &BBox, h: usize, w: usize) -> RoiTaps {
        let x1 = bbox.x1 * self.spatial_scale - 0.5;
        let y1 = bbox.y1 * self.spatial_scale - 0.5;
        let bw = (bbox.x2 - bbox.x1) * self.spatial_scale / self.output as f64;
        let bh = (bbox.y2 - bbox.y1) * self.spatial_scale / self.output as f64;
        let s = self.sampling;
        let norm = 1.0 / (s * s) as f64;
        let mut bins = Vec::with_capacity(self.bins());
        for py in 0..self.output {
            for px in 0..self.output {
                let mut taps: Vec<(u32, f64)> = Vec::with_capacity(4 * s * s);
                for iy in 0..s {
                    let y = y1 + py as f64 * bh + (iy as f64 + 0.5) * bh / s as f64;
                    for ix in 0..s {
                        let x = x1 + px as f64 * bw + (ix as f64 + 0.5) * bw / s as f64;
                        bilinear_taps(y, x, h, w, norm, &mut taps);
                    }
                }
                bins.push(taps);
            }
        }
        RoiTaps { bins }
    }

    /// Pooled features, `c × output²` per box, concatenated row-major.
    pub fn forward(&self, fmap: &Tensor3, boxes: &[BBox]) -> (Vec<f64>, Vec<RoiTaps>) {
        let nb = self.bins();
        let dim = fmap.c * nb;
        let mut out = vec![0.0; boxes.len() * dim];
        let taps: Vec<RoiTaps> = boxes.iter().map(|b| self.taps(b, fmap.h, fmap.w)).collect();
        for (r, t) in taps.iter().enumerate() {
            let row = &mut out[r * dim..(r + 1) * dim];
            for c in 0..fmap.c {
                let plane = fmap.plane(c);
                for (bin, list) in t.bins.iter().enumerate() {
                    row[c * nb + bin] = list.iter().map(|&(i, wt)| wt * plane[i as usize]).sum();
                }
            }
        }
        (out, taps)
    }

    pub fn backward(&self, taps: &[RoiTaps], d_pooled: &[f64], dfmap: &mut Tensor3) {
        let nb = self.bins();
        let dim = dfmap.c * nb;
        for (r, t) in taps.iter().enumerate() {
            let row = &d_pooled[r * dim..(r + 1) * dim];
            for c in 0..dfmap.c {
                let plane = dfmap.plane_mut(c);
                for (bin, list) in t.bins.iter().enumerate() {
                    let g = row[c * nb + bin];
                    if g == 0.0 {
                        continue;
                    }
                    for &(i, wt) in list {
                        plane[i as usize] += wt * g;
                    }
                }
            }
        }
    }
}

fn bilinear_taps(y: f64, x: f64, h: usize, w: usize, scale: f64, out: &mut Vec<(u32, f64)>) {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return;
    }
    let y = y.max(0.0);
    let x = x.max(0.0);
    let (y0, y1, ly) = corner(y, h);
    let (x0, x1, lx) = corner(x, w);
    let hy = 1.0 - ly;
    let hx = 1.0 - lx;
    out.push(((y0 * w + x0) as u32, scale * hy * hx));
    out.push(((y0 * w + x1) as u32, scale * hy * lx));
    out.push(((y1 * w + x0) as u32, scale * ly * hx));
    out.push(((y1 * w + x1) as u32, scale * ly * lx));
}

fn corner(v: f64, n: usize) -> (usize, usize, f64) {
    let lo = v.floor() as usize;
    if lo >= n - 1 {
        (n - 1, n - 1, 0.0)
    } else {
        (lo, lo + 1, v - lo as f64)
    }
}
