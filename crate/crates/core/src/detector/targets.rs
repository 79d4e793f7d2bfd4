use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{iou, BBox};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub rpn_pos_iou: f64,
    pub rpn_neg_iou: f64,
    pub rpn_batch: usize,
    pub rpn_pos_fraction: f64,
    pub roi_fg_iou: f64,
    pub roi_batch: usize,
    pub roi_fg_fraction: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            rpn_pos_iou: 0.5,
            rpn_neg_iou: 0.3,
            rpn_batch: 32,
            rpn_pos_fraction: 0.5,
            roi_fg_iou: 0.5,
            roi_batch: 32,
            roi_fg_fraction: 0.25,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnchorAssignment {
    pub anchor: usize,
    /// Matched ground-truth index for positives.
    pub gt: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiAssignment {
    pub bbox: BBox,
    /// Matched ground-truth index for foreground regions.
    pub gt: Option<usize>,
    pub iou: f64,
}

fn best_match(b: &BBox, gts: &[BBox]) -> (Option<usize>, f64) {
    let mut best = (None, 0.0);
    for (j, g) in gts.iter().enumerate() {
        let v = iou(b, g);
        if v > best.1 {
            best = (Some(j), v);
        }
    }
    best
}

fn sample<T: Copy>(mut pos: Vec<T>, mut neg: Vec<T>, batch: usize, pos_fraction: f64, rng: &mut impl Rng) -> (Vec<T>, Vec<T>) {
    let max_pos = ((batch as f64) * pos_fraction).round() as usize;
    let n_pos = pos.len().min(max_pos);
    pos.partial_shuffle(rng, n_pos);
    pos.truncate(n_pos);
    let n_neg = neg.len().min(batch - n_pos);
    neg.partial_shuffle(rng, n_neg);
    neg.truncate(n_neg);
    (pos, neg)
}

/// Positives: IoU ≥ `rpn_pos_iou`, plus the best anchor of every ground
/// truth. Negatives: IoU < `rpn_neg_iou`. Sampled to `rpn_batch`.
pub fn assign_anchors(anchors: &[BBox], gts: &[BBox], cfg: &SamplingConfig, rng: &mut impl Rng) -> Vec<AnchorAssignment> {
    let mut matched: Vec<(Option<usize>, f64)> = anchors.iter().map(|a| best_match(a, gts)).collect();
    for (j, g) in gts.iter().enumerate() {
        let mut best = (usize::MAX, 0.0);
        for (i, a) in anchors.iter().enumerate() {
            let v = iou(a, g);
            if v > best.1 {
                best = (i, v);
            }
        }
        if best.0 != usize::MAX && best.1 > 0.0 {
            matched[best.0] = (Some(j), best.1.max(cfg.rpn_pos_iou));
        }
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (i, (gt, v)) in matched.iter().enumerate() {
        if *v >= cfg.rpn_pos_iou {
            pos.push(AnchorAssignment { anchor: i, gt: *gt });
        } else if *v < cfg.rpn_neg_iou {
            neg.push(AnchorAssignment { anchor: i, gt: None });
        }
    }
    let (mut p, n) = sample(pos, neg, cfg.rpn_batch, cfg.rpn_pos_fraction, rng);
    p.extend(n);
    p
}

/// Ground truth boxes join the candidate pool; foreground at IoU ≥
/// `roi_fg_iou`, background otherwise. Sampled to `roi_batch`.
pub fn assign_rois(proposals: &[BBox], gts: &[BBox], cfg: &SamplingConfig, rng: &mut impl Rng) -> Vec<RoiAssignment> {
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for b in proposals.iter().chain(gts) {
        let (gt, v) = best_match(b, gts);
        if v >= cfg.roi_fg_iou {
            fg.push(RoiAssignment { bbox: *b, gt, iou: v });
        } else {
            bg.push(RoiAssignment { bbox: *b, gt: None, iou: v });
        }
    }
    let (mut f, b) = sample(fg, bg, cfg.roi_batch, cfg.roi_fg_fraction, rng);
    f.extend(b);
    f
}
