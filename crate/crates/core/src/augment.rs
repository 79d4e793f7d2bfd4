//! Weak and strong views for consistency training. The geometric part of
//! either view is a per-axis affine map, so boxes move between frames
//! exactly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::BBox;
use crate::tensor::Tensor3;

/// `x' = sx·x + tx`, `y' = sy·y + ty`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxTransform {
    pub sx: f64,
    pub tx: f64,
    pub sy: f64,
    pub ty: f64,
}

impl BoxTransform {
    pub const IDENTITY: BoxTransform = BoxTransform { sx: 1.0, tx: 0.0, sy: 1.0, ty: 0.0 };

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    pub fn hflip(width: f64) -> Self {
        BoxTransform { sx: -1.0, tx: width, sy: 1.0, ty: 0.0 }
    }

    /// Isotropic scaling about the image centre.
    pub fn scale_about(factor: f64, width: f64, height: f64) -> Self {
        BoxTransform { sx: factor, tx: 0.5 * width * (1.0 - factor), sy: factor, ty: 0.5 * height * (1.0 - factor) }
    }

    /// `self` after `first`.
    pub fn compose(&self, first: &BoxTransform) -> BoxTransform {
        BoxTransform { sx: self.sx * first.sx, tx: self.sx * first.tx + self.tx, sy: self.sy * first.sy, ty: self.sy * first.ty + self.ty }
    }

    pub fn inverse(&self) -> BoxTransform {
        BoxTransform { sx: 1.0 / self.sx, tx: -self.tx / self.sx, sy: 1.0 / self.sy, ty: -self.ty / self.sy }
    }

    pub fn apply_point(&self, x: f64, y: f64) -> (f64, f64) {
        (self.sx * x + self.tx, self.sy * y + self.ty)
    }

    pub fn apply(&self, b: &BBox) -> BBox {
        let (ax, ay) = self.apply_point(b.x1, b.y1);
        let (bx, by) = self.apply_point(b.x2, b.y2);
        BBox { x1: ax.min(bx), y1: ay.min(by), x2: ax.max(bx), y2: ay.max(by) }
    }

    /// Warp `img` so that content at `p` lands at `self(p)`; the output has
    /// the input's size and borders replicate edge pixels.
    pub fn warp(&self, img: &Tensor3) -> Tensor3 {
        if self.is_identity() {
            return img.clone();
        }
        let inv = self.inverse();
        let mut out = Tensor3::zeros(img.c, img.h, img.w);
        for y in 0..img.h {
            for x in 0..img.w {
                let (u, v) = inv.apply_point(x as f64 + 0.5, y as f64 + 0.5);
                for c in 0..img.c {
                    out.set(c, y, x, img.sample_bilinear(c, v - 0.5, u - 0.5));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Scale factor drawn from `[1 - s, 1 + s]`.
    pub scale_jitter: f64,
    pub color_jitter: f64,
    pub blur_prob: f64,
    pub blur_sigma: (f64, f64),
    pub cutout_prob: f64,
    pub cutout_max: usize,
    pub cutout_size: (usize, usize),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            scale_jitter: 0.1,
            color_jitter: 0.2,
            blur_prob: 0.5,
            blur_sigma: (0.3, 1.0),
            cutout_prob: 0.7,
            cutout_max: 3,
            cutout_size: (3, 8),
        }
    }
}

impl AugmentConfig {
    /// Every draw is the identity.
    pub fn none() -> Self {
        Self { flip_prob: 0.0, scale_jitter: 0.0, color_jitter: 0.0, blur_prob: 0.0, cutout_prob: 0.0, ..Self::default() }
    }
}

fn geometric(img: &Tensor3, cfg: &AugmentConfig, rng: &mut impl Rng) -> (Tensor3, BoxTransform) {
    let (w, h) = (img.w as f64, img.h as f64);
    let mut t = BoxTransform::IDENTITY;
    if cfg.flip_prob > 0.0 && rng.gen_bool(cfg.flip_prob) {
        t = BoxTransform::hflip(w);
    }
    if cfg.scale_jitter > 0.0 {
        let s = rng.gen_range(1.0 - cfg.scale_jitter..=1.0 + cfg.scale_jitter);
        t = BoxTransform::scale_about(s, w, h).compose(&t);
    }
    (t.warp(img), t)
}

pub fn weak_augment(img: &Tensor3, cfg: &AugmentConfig, rng: &mut impl Rng) -> (Tensor3, BoxTransform) {
    geometric(img, cfg, rng)
}

/// Weak geometry plus colour jitter, Gaussian blur and cutout.
pub fn strong_augment(img: &Tensor3, cfg: &AugmentConfig, rng: &mut impl Rng) -> (Tensor3, BoxTransform) {
    let (mut out, t) = geometric(img, cfg, rng);
    if cfg.color_jitter > 0.0 {
        let j = cfg.color_jitter;
        let brightness = rng.gen_range(-j..j) * 0.5;
        let contrast = 1.0 + rng.gen_range(-j..j);
        let gains: Vec<f64> = (0..out.c).map(|_| 1.0 + rng.gen_range(-j..j) * 0.5).collect();
        let mean = out.data.iter().sum::<f64>() / out.data.len() as f64;
        for c in 0..out.c {
            for v in out.plane_mut(c) {
                *v = (((*v - mean) * contrast + mean) * gains[c] + brightness).clamp(0.0, 1.0);
            }
        }
    }
    if cfg.blur_prob > 0.0 && rng.gen_bool(cfg.blur_prob) {
        let sigma = rng.gen_range(cfg.blur_sigma.0..=cfg.blur_sigma.1);
        out = gaussian_blur(&out, sigma);
    }
    if cfg.cutout_prob > 0.0 && cfg.cutout_max > 0 && rng.gen_bool(cfg.cutout_prob) {
        let n = rng.gen_range(1..=cfg.cutout_max);
        for _ in 0..n {
            let s = rng.gen_range(cfg.cutout_size.0..=cfg.cutout_size.1);
            let x0 = rng.gen_range(0..out.w.saturating_sub(s).max(1));
            let y0 = rng.gen_range(0..out.h.saturating_sub(s).max(1));
            let fill = rng.gen_range(0.0..1.0);
            for c in 0..out.c {
                for y in y0..(y0 + s).min(out.h) {
                    for x in x0..(x0 + s).min(out.w) {
                        out.set(c, y, x, fill);
                    }
                }
            }
        }
    }
    (out, t)
}

/// Separable blur with a kernel truncated at 3σ and edge replication.
pub fn gaussian_blur(img: &Tensor3, sigma: f64) -> Tensor3 {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    let (h, w) = (img.h as isize, img.w as isize);
    let mut tmp = Tensor3::zeros(img.c, img.h, img.w);
    let mut out = Tensor3::zeros(img.c, img.h, img.w);
    for c in 0..img.c {
        for y in 0..h {
            for x in 0..w {
                let v: f64 = k.iter().enumerate().map(|(i, kv)| kv * img.get(c, y as usize, (x + i as isize - r).clamp(0, w - 1) as usize)).sum();
                tmp.set(c, y as usize, x as usize, v);
            }
        }
        for y in 0..h {
            for x in 0..w {
                let v: f64 = k.iter().enumerate().map(|(i, kv)| kv * tmp.get(c, (y + i as isize - r).clamp(0, h - 1) as usize, x as usize)).sum();
                out.set(c, y as usize, x as usize, v);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng as ChaCha;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn ramp() -> Tensor3 {
        let mut t = Tensor3::zeros(3, 16, 16);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = (i % 97) as f64 / 97.0;
        }
        t
    }

    #[test]
    fn identity_draw_is_noop() {
        let img = ramp();
        let mut rng = ChaCha::seed_from_u64(0);
        for f in [weak_augment, strong_augment] {
            let (out, t) = f(&img, &AugmentConfig::none(), &mut rng);
            assert!(t.is_identity());
            assert_eq!(out, img);
        }
    }

    #[test]
    fn flip_reflects_boxes_and_pixels() {
        let t = BoxTransform::hflip(64.0);
        let b = t.apply(&BBox::new(3.0, 5.0, 20.0, 30.0).unwrap());
        assert_eq!(b, BBox::new(44.0, 5.0, 61.0, 30.0).unwrap());
        let img = ramp();
        let f = BoxTransform::hflip(16.0).warp(&img);
        for y in 0..16 {
            for x in 0..16 {
                assert!((f.get(1, y, x) - img.get(1, y, 15 - x)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn flip_draws_under_both_augmentations() {
        let cfg = AugmentConfig { flip_prob: 1.0, ..AugmentConfig::none() };
        let mut rng = ChaCha::seed_from_u64(1);
        for f in [weak_augment, strong_augment] {
            let (_, t) = f(&ramp(), &cfg, &mut rng);
            let b = t.apply(&BBox::new(1.0, 2.0, 5.0, 9.0).unwrap());
            assert_eq!(b, BBox::new(11.0, 2.0, 15.0, 9.0).unwrap());
        }
    }

    #[test]
    fn round_trip_on_random_boxes() {
        let mut rng = ChaCha::seed_from_u64(2);
        let cfg = AugmentConfig::default();
        for _ in 0..100 {
            let (_, weak) = weak_augment(&ramp(), &cfg, &mut rng);
            let (_, strong) = strong_augment(&ramp(), &cfg, &mut rng);
            let x1 = rng.gen_range(0.0..50.0);
            let y1 = rng.gen_range(0.0..50.0);
            let b = BBox::new(x1, y1, x1 + rng.gen_range(1.0..14.0), y1 + rng.gen_range(1.0..14.0)).unwrap();
            for t in [weak, strong] {
                let back = t.inverse().apply(&t.apply(&b));
                for (a, c) in back.coords().iter().zip(b.coords()) {
                    assert!((a - c).abs() < 1e-6);
                }
            }
            // weak frame to strong frame and back
            let w2s = strong.compose(&weak.inverse());
            let back = w2s.inverse().apply(&w2s.apply(&b));
            for (a, c) in back.coords().iter().zip(b.coords()) {
                assert!((a - c).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn scaling_moves_content_with_boxes() {
        let mut img = Tensor3::zeros(1, 32, 32);
        for y in 8..12 {
            for x in 20..24 {
                img.set(0, y, x, 1.0);
            }
        }
        let t = BoxTransform::scale_about(1.1, 32.0, 32.0);
        let out = t.warp(&img);
        let b = t.apply(&BBox::new(20.0, 8.0, 24.0, 12.0).unwrap());
        let (cx, cy) = b.center();
        assert!(out.get(0, cy as usize, cx as usize) > 0.9);
    }

    #[test]
    fn blur_preserves_constant_image() {
        let img = Tensor3::filled(3, 10, 10, 0.4);
        assert!(gaussian_blur(&img, 0.8).max_abs_diff(&img) < 1e-12);
    }

    proptest! {
        #[test]
        fn compose_with_inverse_is_identity(sx in 0.5f64..2.0, tx in -10.0f64..10.0, sy in 0.5f64..2.0, ty in -10.0f64..10.0, flip in any::<bool>()) {
            let t = BoxTransform { sx: if flip { -sx } else { sx }, tx, sy, ty };
            let id = t.compose(&t.inverse());
            prop_assert!((id.sx - 1.0).abs() < 1e-12 && id.tx.abs() < 1e-9 && (id.sy - 1.0).abs() < 1e-12 && id.ty.abs() < 1e-9);
        }
    }
}
