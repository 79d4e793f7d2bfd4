//! Per-flow training targets. Builders emit unit weights; the batch
//! normalisers then turn them into the averaging weights of each flow.

use rand::Rng;

use crate::augment::BoxTransform;
use crate::detector::{
    assign_anchors, assign_rois, AnchorTarget, BoxCoder, Detector, DetectorParams, ImageTargets, RoiTarget, SamplingConfig,
};
use crate::geometry::BBox;
use crate::tensor::Tensor3;
use crate::vocab::EmbeddingTable;

/// Boxes mapped into a view and clipped; slivers are dropped.
pub fn to_view(boxes: &[(BBox, usize)], t: &BoxTransform, size: f64, min_size: f64) -> Vec<(BBox, usize)> {
    boxes
        .iter()
        .filter_map(|(b, c)| {
            let m = t.apply(b).clip(size, size)?;
            (m.width() >= min_size && m.height() >= min_size).then_some((m, *c))
        })
        .collect()
}

fn rpn_targets(det: &Detector, gts: &[BBox], cfg: &SamplingConfig, with_delta: bool, rng: &mut impl Rng) -> Vec<AnchorTarget> {
    assign_anchors(det.anchors(), gts, cfg, rng)
        .into_iter()
        .map(|a| {
            let anchor = &det.anchors()[a.anchor];
            AnchorTarget {
                anchor: a.anchor,
                objectness: Some((if a.gt.is_some() { 1.0 } else { 0.0 }, 1.0)),
                delta: if with_delta { a.gt.map(|j| (BoxCoder::RPN.encode(anchor, &gts[j]), 1.0)) } else { None },
            }
        })
        .collect()
}

/// Labeled image: RPN objectness and deltas, RoI classes over `C + 1`
/// and deltas on foreground regions.
pub fn supervised_plan(det: &Detector, proposals: &[BBox], gts: &[(BBox, usize)], n_classes: usize, cfg: &SamplingConfig, rng: &mut impl Rng) -> ImageTargets {
    let boxes: Vec<BBox> = gts.iter().map(|g| g.0).collect();
    let anchors = rpn_targets(det, &boxes, cfg, true, rng);
    let rois = assign_rois(proposals, &boxes, cfg, rng)
        .into_iter()
        .map(|r| RoiTarget {
            bbox: r.bbox,
            class: Some((r.gt.map_or(n_classes, |j| gts[j].1), 1.0)),
            delta: r.gt.map(|j| (BoxCoder::ROI.encode(&r.bbox, &boxes[j]), 1.0)),
        })
        .collect();
    ImageTargets { anchors, rois }
}

/// Unlabeled strong view. The RPN learns from confident detections, plus
/// the selected boxes when `rpn_selected` is set. Classification regions are assigned to the
/// teacher's confident detections; background regions carry the teacher's
/// background probability as their raw weight. Regression regions are
/// assigned to the selected boxes.
#[allow(clippy::too_many_arguments)]
pub fn unsupervised_plan(
    det: &Detector,
    teacher: &DetectorParams,
    teacher_fmap: &Tensor3,
    strong_to_weak: &BoxTransform,
    proposals: &[BBox],
    targets: &[(BBox, usize)],
    selected: &[BBox],
    rpn_selected: bool,
    emb: &EmbeddingTable,
    cfg: &SamplingConfig,
    rng: &mut impl Rng,
) -> ImageTargets {
    let n_classes = emb.len();
    let boxes: Vec<BBox> = targets.iter().map(|g| g.0).collect();
    let extra: &[BBox] = if rpn_selected { selected } else { &[] };
    let objects: Vec<BBox> = boxes.iter().chain(extra).copied().collect();
    let anchors = rpn_targets(det, &objects, cfg, true, rng);
    let assigned = assign_rois(proposals, &boxes, cfg, rng);
    let bg: Vec<BBox> = assigned.iter().filter(|r| r.gt.is_none()).map(|r| strong_to_weak.apply(&r.bbox)).collect();
    let p_bg: Vec<f64> = det.predict_rois(teacher, teacher_fmap, &bg, emb).iter().map(|p| p.probs[n_classes]).collect();
    let mut bg_iter = p_bg.into_iter();
    let mut rois: Vec<RoiTarget> = assigned
        .iter()
        .map(|r| {
            let class = match r.gt {
                Some(j) => (targets[j].1, 1.0),
                None => (n_classes, bg_iter.next().expect("one weight per background region")),
            };
            RoiTarget { bbox: r.bbox, class: Some(class), delta: None }
        })
        .collect();
    if !selected.is_empty() {
        for r in assign_rois(proposals, selected, cfg, rng) {
            if let Some(j) = r.gt {
                rois.push(RoiTarget { bbox: r.bbox, class: None, delta: Some((BoxCoder::ROI.encode(&r.bbox, &selected[j]), 1.0)) });
            }
        }
    }
    ImageTargets { anchors, rois }
}

/// Queue image: RoI classification only. Unmatched RoIs become background
/// targets only when `background` is set.
pub fn queue_plan(proposals: &[BBox], labels: &[(BBox, usize)], n_classes: usize, background: bool, cfg: &SamplingConfig, rng: &mut impl Rng) -> ImageTargets {
    let boxes: Vec<BBox> = labels.iter().map(|g| g.0).collect();
    let rois = assign_rois(proposals, &boxes, cfg, rng)
        .into_iter()
        .filter(|r| background || r.gt.is_some())
        .map(|r| RoiTarget { bbox: r.bbox, class: Some((r.gt.map_or(n_classes, |j| labels[j].1), 1.0)), delta: None })
        .collect();
    ImageTargets { anchors: Vec::new(), rois }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FlowCounts {
    /// Classified regions.
    pub n_b: usize,
    pub n_fg: usize,
    pub n_bg: usize,
}

/// Anything carrying a plan, so normalisers work on bare plans and on
/// plans paired with their view.
pub trait HasTargets {
    fn targets(&self) -> &ImageTargets;
    fn targets_mut(&mut self) -> &mut ImageTargets;
}

impl HasTargets for ImageTargets {
    fn targets(&self) -> &ImageTargets {
        self
    }
    fn targets_mut(&mut self) -> &mut ImageTargets {
        self
    }
}

fn scale_weights<'a>(it: impl Iterator<Item = &'a mut f64>, n: usize) {
    if n > 0 {
        let w = 1.0 / n as f64;
        for v in it {
            *v = w;
        }
    }
}

fn rpn_normalise<T: HasTargets>(plans: &mut [T]) {
    let n_obj = plans.iter().flat_map(|p| &p.targets().anchors).filter(|a| a.objectness.is_some()).count();
    let n_pos = plans.iter().flat_map(|p| &p.targets().anchors).filter(|a| a.delta.is_some()).count();
    scale_weights(plans.iter_mut().flat_map(|p| p.targets_mut().anchors.iter_mut()).filter_map(|a| a.objectness.as_mut().map(|o| &mut o.1)), n_obj);
    scale_weights(plans.iter_mut().flat_map(|p| p.targets_mut().anchors.iter_mut()).filter_map(|a| a.delta.as_mut().map(|o| &mut o.1)), n_pos);
}

fn count<T: HasTargets>(plans: &[T], n_classes: usize) -> FlowCounts {
    let cls = || plans.iter().flat_map(|p| &p.targets().rois).filter_map(|r| r.class);
    let n_b = cls().count();
    let n_bg = cls().filter(|c| c.0 == n_classes).count();
    FlowCounts { n_b, n_fg: n_b - n_bg, n_bg }
}

/// `1/N_b` on every classified region and `1/N_fg` on every regressed one,
/// plus the matching RPN averages.
pub fn normalise_supervised<T: HasTargets>(plans: &mut [T], n_classes: usize) -> FlowCounts {
    rpn_normalise(plans);
    let c = count(plans, n_classes);
    let n_reg = plans.iter().flat_map(|p| &p.targets().rois).filter(|r| r.delta.is_some()).count();
    scale_weights(plans.iter_mut().flat_map(|p| p.targets_mut().rois.iter_mut()).filter_map(|r| r.class.as_mut().map(|x| &mut x.1)), c.n_b);
    scale_weights(plans.iter_mut().flat_map(|p| p.targets_mut().rois.iter_mut()).filter_map(|r| r.delta.as_mut().map(|x| &mut x.1)), n_reg);
    c
}

/// Foreground classes weigh `1/N_fg`; background weights become
/// `w_j = p_bg(j) / Σ_k p_bg(k)`; regression averages over its own
/// foreground set.
pub fn normalise_unsupervised<T: HasTargets>(plans: &mut [T], n_classes: usize) -> FlowCounts {
    rpn_normalise(plans);
    let c = count(plans, n_classes);
    let n_reg = plans.iter().flat_map(|p| &p.targets().rois).filter(|r| r.delta.is_some()).count();
    let bg_sum: f64 = plans.iter().flat_map(|p| &p.targets().rois).filter_map(|r| r.class).filter(|x| x.0 == n_classes).map(|x| x.1).sum();
    for r in plans.iter_mut().flat_map(|p| p.targets_mut().rois.iter_mut()) {
        if let Some((col, w)) = r.class.as_mut() {
            if *col == n_classes {
                *w = if bg_sum > 0.0 { *w / bg_sum } else { 1.0 / c.n_bg as f64 };
            } else {
                *w = 1.0 / c.n_fg as f64;
            }
        }
    }
    scale_weights(plans.iter_mut().flat_map(|p| p.targets_mut().rois.iter_mut()).filter_map(|r| r.delta.as_mut().map(|x| &mut x.1)), n_reg);
    c
}

pub fn normalise_queue<T: HasTargets>(plans: &mut [T], n_classes: usize) -> FlowCounts {
    let c = count(plans, n_classes);
    scale_weights(plans.iter_mut().flat_map(|p| p.targets_mut().rois.iter_mut()).filter_map(|r| r.class.as_mut().map(|x| &mut x.1)), c.n_b);
    c
}
