//! Deterministic shapes-on-texture scenes.
//!
//! Every image is rendered from its own ChaCha stream keyed by the master
//! seed, the split and the image index, so splits can be generated in any
//! order (or in parallel) with identical bytes. Object boxes come from the
//! analytic shape geometry, not from the rasterised mask.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{quantize, Dataset, HiddenGt, ImageRecord, Split};
use crate::error::{Error, Result};
use crate::geometry::{crop, iou, Annotation, BBox};
use crate::rng::{stream_rng, streams};
use crate::tensor::Tensor3;
use crate::vocab::Vocabulary;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Star,
    Cross,
}

impl ShapeKind {
    /// Index into [`Vocabulary::shapes`].
    pub fn from_category(id: usize) -> ShapeKind {
        match id {
            0 => ShapeKind::Circle,
            1 => ShapeKind::Square,
            2 => ShapeKind::Triangle,
            3 => ShapeKind::Star,
            4 => ShapeKind::Cross,
            _ => panic!("no shape for category {id}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_object_size: f64,
    pub max_object_size: f64,
    /// Probability that an object in an unlabeled or test image is novel.
    pub novel_rate: f64,
    /// Probability that an object in a labeled image is novel. Such objects
    /// are rendered but left unannotated.
    pub labeled_novel_rate: f64,
    /// Upper bound on distractor blobs per image.
    pub clutter: usize,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_test: usize,
    pub crops_per_class: usize,
    pub crops_heldout_per_class: usize,
    pub crop_size: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            min_objects: 1,
            max_objects: 4,
            min_object_size: 12.0,
            max_object_size: 22.0,
            novel_rate: 0.4,
            labeled_novel_rate: 0.4,
            clutter: 3,
            n_labeled: 200,
            n_unlabeled: 300,
            n_test: 100,
            crops_per_class: 200,
            crops_heldout_per_class: 50,
            crop_size: 24,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::Config("object count range must satisfy 1 <= min <= max".into()));
        }
        if !(self.min_object_size > 2.0 && self.min_object_size <= self.max_object_size) {
            return Err(Error::Config("object size range invalid".into()));
        }
        if self.max_object_size + 2.0 > self.image_size as f64 {
            return Err(Error::Config("objects do not fit in the image".into()));
        }
        if !(0.0..=1.0).contains(&self.novel_rate) {
            return Err(Error::Config("novel_rate must be in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.labeled_novel_rate) {
            return Err(Error::Config("labeled_novel_rate must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Analytic description of one rendered object.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeInstance {
    pub kind: ShapeKind,
    pub cx: f64,
    pub cy: f64,
    /// Nominal extent: diameter for circles, circumscribed diameter otherwise.
    pub size: f64,
    pub angle: f64,
    pub color: [f64; 3],
}

impl ShapeInstance {
    fn polygon(&self) -> Option<Vec<(f64, f64)>> {
        let r = 0.5 * self.size;
        let pts: Vec<(f64, f64)> = match self.kind {
            ShapeKind::Circle => return None,
            ShapeKind::Square => (0..4).map(|i| polar(r, PI / 4.0 + i as f64 * PI / 2.0)).collect(),
            ShapeKind::Triangle => (0..3).map(|i| polar(r, -PI / 2.0 + i as f64 * 2.0 * PI / 3.0)).collect(),
            ShapeKind::Star => (0..10)
                .map(|i| polar(if i % 2 == 0 { r } else { 0.42 * r }, -PI / 2.0 + i as f64 * PI / 5.0))
                .collect(),
            ShapeKind::Cross => {
                let a = 0.2 * self.size;
                let b = r;
                vec![(-a, -b), (a, -b), (a, -a), (b, -a), (b, a), (a, a), (a, b), (-a, b), (-a, a), (-b, a), (-b, -a), (-a, -a)]
            }
        };
        let (s, c) = self.angle.sin_cos();
        Some(pts.into_iter().map(|(x, y)| (self.cx + c * x - s * y, self.cy + s * x + c * y)).collect())
    }

    pub fn bbox(&self) -> BBox {
        match self.polygon() {
            None => {
                let r = 0.5 * self.size;
                BBox { x1: self.cx - r, y1: self.cy - r, x2: self.cx + r, y2: self.cy + r }
            }
            Some(poly) => {
                let (mut x1, mut y1, mut x2, mut y2) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
                for (x, y) in poly {
                    x1 = x1.min(x);
                    y1 = y1.min(y);
                    x2 = x2.max(x);
                    y2 = y2.max(y);
                }
                BBox { x1, y1, x2, y2 }
            }
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        match self.polygon() {
            None => (x - self.cx).powi(2) + (y - self.cy).powi(2) <= (0.5 * self.size).powi(2),
            Some(poly) => point_in_polygon(&poly, x, y),
        }
    }
}

fn polar(r: f64, a: f64) -> (f64, f64) {
    (r * a.cos(), r * a.sin())
}

fn point_in_polygon(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

const SUPERSAMPLE: usize = 4;

/// Paint `shape` with 4×4 supersampled coverage.
fn paint_shape(img: &mut Tensor3, shape: &ShapeInstance) {
    let b = shape.bbox();
    let x0 = b.x1.floor().max(0.0) as usize;
    let y0 = b.y1.floor().max(0.0) as usize;
    let x1 = (b.x2.ceil() as usize).min(img.w);
    let y1 = (b.y2.ceil() as usize).min(img.h);
    let step = 1.0 / SUPERSAMPLE as f64;
    for py in y0..y1 {
        for px in x0..x1 {
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = px as f64 + (sx as f64 + 0.5) * step;
                    let y = py as f64 + (sy as f64 + 0.5) * step;
                    if shape.contains(x, y) {
                        hits += 1;
                    }
                }
            }
            if hits > 0 {
                let a = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
                for c in 0..3 {
                    let v = img.get(c, py, px);
                    img.set(c, py, px, (1.0 - a) * v + a * shape.color[c]);
                }
            }
        }
    }
}

fn background(size: usize, rng: &mut impl Rng) -> Tensor3 {
    let base = [rng.gen_range(0.15..0.35), rng.gen_range(0.2..0.4), rng.gen_range(0.15..0.3)];
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| (rng.gen_range(0.05..0.3), rng.gen_range(0.05..0.3), rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.02..0.06)))
        .collect();
    let mut img = Tensor3::zeros(3, size, size);
    for y in 0..size {
        for x in 0..size {
            let tex: f64 = waves.iter().map(|(fx, fy, ph, amp)| amp * (fx * x as f64 + fy * y as f64 + ph).sin()).sum();
            for (c, b) in base.iter().enumerate() {
                img.set(c, y, x, b + tex + rng.gen_range(-0.03..0.03));
            }
        }
    }
    img
}

/// Low-contrast elongated blobs and strokes.
fn paint_distractor(img: &mut Tensor3, rng: &mut impl Rng) {
    let size = img.w as f64;
    let cx = rng.gen_range(0.0..size);
    let cy = rng.gen_range(0.0..size);
    let major: f64 = rng.gen_range(6.0..26.0);
    let minor: f64 = rng.gen_range(1.5..6.0);
    let angle = rng.gen_range(0.0..PI);
    let shift: f64 = rng.gen_range(0.08..0.22) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let (s, c) = angle.sin_cos();
    let reach = major.ceil() as isize + 1;
    for dy in -reach..=reach {
        for dx in -reach..=reach {
            let px = cx as isize + dx;
            let py = cy as isize + dy;
            if px < 0 || py < 0 || px >= img.w as isize || py >= img.h as isize {
                continue;
            }
            let rx = px as f64 + 0.5 - cx;
            let ry = py as f64 + 0.5 - cy;
            let u = c * rx + s * ry;
            let v = -s * rx + c * ry;
            let d = (u / major).powi(2) + (v / minor).powi(2);
            if d <= 1.0 {
                let a = 1.0 - d;
                for ch in 0..3 {
                    let val = img.get(ch, py as usize, px as usize);
                    img.set(ch, py as usize, px as usize, val + a * shift);
                }
            }
        }
    }
}

fn object_color(rng: &mut impl Rng) -> [f64; 3] {
    let hi = rng.gen_range(0.7..1.0);
    let lo = rng.gen_range(0.35..0.65);
    let mut col = [hi, rng.gen_range(lo..hi), lo];
    // random channel permutation
    for i in (1..3).rev() {
        let j = rng.gen_range(0..=i);
        col.swap(i, j);
    }
    col
}

fn draw_instance(kind: ShapeKind, cfg: &SceneConfig, placed: &[BBox], rng: &mut impl Rng) -> Option<ShapeInstance> {
    let size = cfg.image_size as f64;
    for _ in 0..50 {
        let s = rng.gen_range(cfg.min_object_size..=cfg.max_object_size);
        let angle = match kind {
            ShapeKind::Circle => 0.0,
            _ => rng.gen_range(-0.25..0.25),
        };
        let inst = ShapeInstance { kind, cx: 0.0, cy: 0.0, size: s, angle, color: object_color(rng) };
        let b = inst.bbox();
        let (hw, hh) = (0.5 * b.width(), 0.5 * b.height());
        let cx = rng.gen_range(hw + 1.0..size - hw - 1.0);
        let cy = rng.gen_range(hh + 1.0..size - hh - 1.0);
        let inst = ShapeInstance { cx, cy, ..inst };
        let nb = inst.bbox();
        let grown = nb.scale_about_center(1.2);
        if placed.iter().all(|p| iou(&grown, p) == 0.0) {
            return Some(inst);
        }
    }
    None
}

/// One scene. `categories(rng)` draws the category of each object.
pub fn render_scene(cfg: &SceneConfig, rng: &mut impl Rng, mut category: impl FnMut(&mut dyn rand::RngCore) -> usize) -> (Tensor3, Vec<(ShapeInstance, usize)>) {
    let mut img = background(cfg.image_size, rng);
    let n_clutter = rng.gen_range(0..=cfg.clutter);
    for _ in 0..n_clutter {
        paint_distractor(&mut img, rng);
    }
    let n_obj = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut placed = Vec::new();
    let mut objects = Vec::new();
    for _ in 0..n_obj {
        let cat = category(rng);
        if let Some(inst) = draw_instance(ShapeKind::from_category(cat), cfg, &placed, rng) {
            placed.push(inst.bbox());
            paint_shape(&mut img, &inst);
            objects.push((inst, cat));
        }
    }
    img.map_inplace(quantize);
    (img, objects)
}

fn pick(ids: &[usize], rng: &mut dyn rand::RngCore) -> usize {
    ids[rng.gen_range(0..ids.len())]
}

#[derive(Clone, Debug)]
pub struct SyntheticBenchmark {
    pub vocab: Vocabulary,
    pub labeled: Dataset,
    /// Training-visible unlabeled split: no annotations.
    pub unlabeled: Dataset,
    pub hidden_gt: HiddenGt,
    pub test: Dataset,
}

fn split_code(split: Split) -> u64 {
    match split {
        Split::Labeled => 1,
        Split::Unlabeled => 2,
        Split::Test => 3,
    }
}

fn generate_split(cfg: &SceneConfig, vocab: &Vocabulary, split: Split, n: usize) -> Vec<(ImageRecord, Vec<Annotation>)> {
    let prefix = match split {
        Split::Labeled => "lab",
        Split::Unlabeled => "unl",
        Split::Test => "test",
    };
    (0..n)
        .map(|i| {
            let mut rng = stream_rng(cfg.seed, streams::SCENE, (split_code(split) << 32) | i as u64);
            let base = vocab.base_ids().to_vec();
            let novel = vocab.novel_ids().to_vec();
            let rate = if split == Split::Labeled { cfg.labeled_novel_rate } else { cfg.novel_rate };
            let (pixels, objects) = render_scene(cfg, &mut rng, |r| {
                if !novel.is_empty() && r.gen_bool(rate) {
                    pick(&novel, r)
                } else {
                    pick(&base, r)
                }
            });
            let gt: Vec<Annotation> = objects.iter().map(|(s, c)| Annotation::ground_truth(s.bbox(), *c)).collect();
            let visible = match split {
                Split::Unlabeled => Vec::new(),
                Split::Labeled => gt.iter().filter(|a| !vocab.is_novel(a.category)).cloned().collect(),
                Split::Test => gt.clone(),
            };
            (ImageRecord { image_id: format!("{prefix}-{i:05}"), pixels, annotations: visible, split }, gt)
        })
        .collect()
}

pub fn generate_dataset(cfg: &SceneConfig, vocab: &Vocabulary) -> Result<SyntheticBenchmark> {
    cfg.validate()?;
    let labeled: Vec<ImageRecord> = generate_split(cfg, vocab, Split::Labeled, cfg.n_labeled).into_iter().map(|(r, _)| r).collect();
    let mut hidden_gt = HiddenGt::new();
    let unlabeled: Vec<ImageRecord> = generate_split(cfg, vocab, Split::Unlabeled, cfg.n_unlabeled)
        .into_iter()
        .map(|(r, gt)| {
            hidden_gt.insert(r.image_id.clone(), gt);
            r
        })
        .collect();
    let test: Vec<ImageRecord> = generate_split(cfg, vocab, Split::Test, cfg.n_test).into_iter().map(|(r, _)| r).collect();
    Ok(SyntheticBenchmark {
        vocab: vocab.clone(),
        labeled: Dataset { split: Split::Labeled, records: labeled },
        unlabeled: Dataset { split: Split::Unlabeled, records: unlabeled },
        hidden_gt,
        test: Dataset { split: Split::Test, records: test },
    })
}

impl SyntheticBenchmark {
    /// Keep the first `fraction` of the labeled split (at least one image).
    pub fn with_label_fraction(&self, fraction: f64) -> Self {
        let mut out = self.clone();
        out.labeled = self.labeled.fraction(fraction);
        out
    }
}

#[derive(Clone, Debug)]
pub struct CropSample {
    pub crop_id: String,
    pub pixels: Tensor3,
    pub category: usize,
}

#[derive(Clone, Debug)]
pub struct CropCorpus {
    pub train: Vec<CropSample>,
    pub heldout: Vec<CropSample>,
}

/// Crop expand ratio applied before encoding, shared with the external
/// teacher's inference path.
pub const CROP_EXPAND: f64 = 0.1;

/// Balanced single-object crops with imperfect (jittered) boxes, from a
/// seed stream disjoint from the detection splits.
pub fn generate_crop_corpus(cfg: &SceneConfig, vocab: &Vocabulary) -> Result<CropCorpus> {
    cfg.validate()?;
    let per_class = cfg.crops_per_class + cfg.crops_heldout_per_class;
    let mut train = Vec::new();
    let mut heldout = Vec::new();
    for i in 0..per_class * vocab.len() {
        let category = i % vocab.len();
        let mut rng = stream_rng(cfg.seed, streams::CROP_CORPUS, i as u64);
        let one = SceneConfig { min_objects: 1, max_objects: 1, ..cfg.clone() };
        let (pixels, objects) = render_scene(&one, &mut rng, |_| category);
        let Some((inst, _)) = objects.first() else { continue };
        let b = inst.bbox();
        let (cx, cy) = b.center();
        let scale = rng.gen_range(0.9..1.2);
        let jx = rng.gen_range(-0.1..0.1) * b.width();
        let jy = rng.gen_range(-0.1..0.1) * b.height();
        let jb = BBox::from_center(cx + jx, cy + jy, b.width() * scale, b.height() * scale)?;
        let c = crop(&pixels, &jb, CROP_EXPAND, cfg.crop_size)?;
        let sample = CropSample { crop_id: format!("crop-{i:06}"), pixels: c, category };
        if i / vocab.len() < cfg.crops_per_class {
            train.push(sample);
        } else {
            heldout.push(sample);
        }
    }
    Ok(CropCorpus { train, heldout })
}
