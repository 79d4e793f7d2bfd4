use serde::{Deserialize, Serialize};

/// Planar `C×H×W` array of `f64`. Used both for images (C = 3, values in
/// `[0, 1]`) and for intermediate feature maps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w, data: vec![0.0; c * h * w] }
    }

    pub fn filled(c: usize, h: usize, w: usize, value: f64) -> Self {
        Self { c, h, w, data: vec![value; c * h * w] }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor data length mismatch");
        Self { c, h, w, data }
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.h + y) * self.w + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.idx(c, y, x);
        self.data[i] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.h * self.w;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.h * self.w;
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Bilinear sample at continuous pixel-index coordinates (pixel `k`
    /// has its centre at index `k`); coordinates are clamped to the
    /// valid range.
    pub fn sample_bilinear(&self, c: usize, y: f64, x: f64) -> f64 {
        let y = y.clamp(0.0, (self.h - 1) as f64);
        let x = x.clamp(0.0, (self.w - 1) as f64);
        let y0 = y.floor() as usize;
        let x0 = x.floor() as usize;
        let y1 = (y0 + 1).min(self.h - 1);
        let x1 = (x0 + 1).min(self.w - 1);
        let ly = y - y0 as f64;
        let lx = x - x0 as f64;
        let p = self.plane(c);
        let v00 = p[y0 * self.w + x0];
        let v01 = p[y0 * self.w + x1];
        let v10 = p[y1 * self.w + x0];
        let v11 = p[y1 * self.w + x1];
        (1.0 - ly) * ((1.0 - lx) * v00 + lx * v01) + ly * ((1.0 - lx) * v10 + lx * v11)
    }

    /// Resample the continuous region `[x1, x2) × [y1, y2)` (image
    /// coordinates, pixel `k` spans `[k, k+1)`) to `out_h × out_w`.
    pub fn resample_region(&self, x1: f64, y1: f64, x2: f64, y2: f64, out_h: usize, out_w: usize) -> Tensor3 {
        let mut out = Tensor3::zeros(self.c, out_h, out_w);
        let sy = (y2 - y1) / out_h as f64;
        let sx = (x2 - x1) / out_w as f64;
        for c in 0..self.c {
            for oy in 0..out_h {
                let y = y1 + (oy as f64 + 0.5) * sy - 0.5;
                for ox in 0..out_w {
                    let x = x1 + (ox as f64 + 0.5) * sx - 0.5;
                    let v = self.sample_bilinear(c, y, x);
                    out.set(c, oy, ox, v);
                }
            }
        }
        out
    }

    pub fn map_inplace(&mut self, f: impl Fn(f64) -> f64) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor3) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_resample_is_exact() {
        let data: Vec<f64> = (0..3 * 4 * 5).map(|i| i as f64 / 60.0).collect();
        let t = Tensor3::from_vec(3, 4, 5, data);
        let r = t.resample_region(0.0, 0.0, 5.0, 4.0, 4, 5);
        assert_eq!(r, t);
    }

    #[test]
    fn bilinear_midpoint() {
        let t = Tensor3::from_vec(1, 1, 2, vec![0.0, 1.0]);
        assert!((t.sample_bilinear(0, 0.0, 0.5) - 0.5).abs() < 1e-12);
    }
}
