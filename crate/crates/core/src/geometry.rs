//! Axis-aligned boxes in continuous corner form, IoU, greedy NMS and
//! region cropping.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let valid = [x1, y1, x2, y2].iter().all(|v| v.is_finite()) && x1 < x2 && y1 < y2;
        if valid {
            Ok(Self { x1, y1, x2, y2 })
        } else {
            Err(Error::InvalidBox { x1, y1, x2, y2 })
        }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    /// Clip to `[0, width] × [0, height]`; `None` when nothing remains.
    pub fn clip(&self, width: f64, height: f64) -> Option<BBox> {
        BBox::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
        .ok()
    }

    /// Scale side lengths by `factor` about the centre.
    pub fn scale_about_center(&self, factor: f64) -> BBox {
        let (cx, cy) = self.center();
        let hw = 0.5 * self.width() * factor;
        let hh = 0.5 * self.height() * factor;
        BBox { x1: cx - hw, y1: cy - hh, x2: cx + hw, y2: cy + hh }
    }

    fn lex_cmp(&self, other: &BBox) -> Ordering {
        self.coords()
            .iter()
            .zip(other.coords().iter())
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(c: [f64; 4]) -> Result<Self> {
        BBox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.coords()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    GroundTruth,
    TeacherPseudo,
    ExternalPseudo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    #[serde(rename = "bbox")]
    pub bbox: BBox,
    pub category: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    pub provenance: Provenance,
}

impl Annotation {
    pub fn ground_truth(bbox: BBox, category: usize) -> Self {
        Self { bbox, category, score: None, provenance: Provenance::GroundTruth }
    }

    pub fn pseudo(bbox: BBox, category: usize, score: f64, provenance: Provenance) -> Self {
        debug_assert!(provenance != Provenance::GroundTruth);
        Self { bbox, category, score: Some(score), provenance }
    }

    /// Score present exactly when the label is not ground truth.
    pub fn is_consistent(&self) -> bool {
        self.score.is_some() == (self.provenance != Provenance::GroundTruth)
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Descending score; equal scores broken by lexicographic `(x1, y1, x2, y2)`.
pub fn score_order(a: &(BBox, f64), b: &(BBox, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.lex_cmp(&b.0))
}

/// Indices kept by greedy NMS over `dets`, in output (descending score) order.
pub fn nms_indices(dets: &[(BBox, f64)], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| score_order(&dets[i], &dets[j]));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| iou(&dets[k].0, &dets[i].0) < iou_thresh) {
            keep.push(i);
        }
    }
    keep
}

pub fn nms(dets: &[(BBox, f64)], iou_thresh: f64) -> Vec<(BBox, f64)> {
    nms_indices(dets, iou_thresh).into_iter().map(|i| dets[i]).collect()
}

/// Crop `bbox` enlarged by `(1 + expand)` about its centre, clipped to the
/// image, and resample it to `out_size × out_size` bilinearly.
pub fn crop(image: &Tensor3, bbox: &BBox, expand: f64, out_size: usize) -> Result<Tensor3> {
    let region = bbox
        .scale_about_center(1.0 + expand)
        .clip(image.w as f64, image.h as f64)
        .ok_or(Error::EmptyCrop)?;
    Ok(image.resample_region(region.x1, region.y1, region.x2, region.y2, out_size, out_size))
}
