//! The localization teacher: an EMA copy of the student that proposes,
//! refines and filters pseudo boxes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{Detection, Detector, DetectorParams, Proposal};
use crate::error::{Error, Result};
use crate::geometry::{Annotation, BBox, Provenance};
use crate::tensor::Tensor3;
use crate::vocab::EmbeddingTable;

#[derive(Clone, Debug, PartialEq)]
pub struct EmaState {
    pub teacher: DetectorParams,
    momentum: f64,
}

impl EmaState {
    pub fn new(teacher: DetectorParams, momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("ema momentum {momentum} outside [0, 1)")));
        }
        Ok(Self { teacher, momentum })
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    /// `θ' ← α θ' + (1 − α) θ` over the whole flat vector.
    pub fn update(&mut self, student: &DetectorParams) -> Result<()> {
        ema_update(&mut self.teacher.values, &student.values, self.momentum)
    }
}

pub fn ema_update(teacher: &mut [f64], student: &[f64], momentum: f64) -> Result<()> {
    if teacher.len() != student.len() {
        return Err(Error::ShapeMismatch { expected: teacher.len(), actual: student.len() });
    }
    let a = momentum;
    for (t, s) in teacher.iter_mut().zip(student) {
        *t = a * *t + (1.0 - a) * s;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    RpnScore,
    BoxJitter,
    RegJitter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoxSelectionConfig {
    pub strategy: SelectionStrategy,
    pub rpn_thresh: f64,
    pub jitter_count: usize,
    pub jitter_scale: f64,
    pub reg_iters: usize,
    pub bjv_thresh: f64,
    pub rjv_thresh: f64,
    pub top_k: usize,
    /// Proposals below this objectness are never considered.
    pub min_objectness: f64,
    /// Overlap suppression among refined candidates.
    pub candidate_nms: f64,
    /// Detection threshold for the consistency-loss targets.
    pub target_thresh: f64,
    pub target_nms: f64,
}

impl Default for BoxSelectionConfig {
    fn default() -> Self {
        Self {
            strategy: SelectionStrategy::RegJitter,
            rpn_thresh: 0.95,
            jitter_count: 10,
            jitter_scale: 0.06,
            reg_iters: 4,
            bjv_thresh: 0.02,
            rjv_thresh: 0.005,
            top_k: 5,
            min_objectness: 0.5,
            candidate_nms: 0.5,
            target_thresh: 0.9,
            target_nms: 0.5,
        }
    }
}

impl BoxSelectionConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if self.jitter_count < 2 || self.reg_iters < 2 {
            return Err(Error::Config("jitter_count and reg_iters must be at least 2".into()));
        }
        if !unit(self.rpn_thresh) || !unit(self.min_objectness) || !unit(self.target_thresh) {
            return Err(Error::Config("box selection thresholds must be probabilities".into()));
        }
        if self.bjv_thresh < 0.0 || self.rjv_thresh < 0.0 || self.jitter_scale < 0.0 {
            return Err(Error::Config("variance thresholds and jitter scale must be non-negative".into()));
        }
        Ok(())
    }
}

/// Class-agnostic box refinement, one output per input.
pub trait BoxRefiner {
    fn refine(&self, boxes: &[BBox]) -> Vec<BBox>;
}

/// The detector's regression head evaluated on a fixed feature map.
pub struct HeadRefiner<'a> {
    pub det: &'a Detector,
    pub params: &'a DetectorParams,
    pub fmap: &'a Tensor3,
}

impl BoxRefiner for HeadRefiner<'_> {
    fn refine(&self, boxes: &[BBox]) -> Vec<BBox> {
        if boxes.is_empty() {
            return Vec::new();
        }
        let feats = self.det.roi_features_on(self.params, self.fmap, boxes);
        self.det.regress_boxes(self.params, &feats, boxes).expect("one feature per box")
    }
}

/// Population standard deviation of each coordinate.
fn coord_std(boxes: &[BBox]) -> [f64; 4] {
    let n = boxes.len() as f64;
    let mut out = [0.0; 4];
    for (k, o) in out.iter_mut().enumerate() {
        let mean = boxes.iter().map(|b| b.coords()[k]).sum::<f64>() / n;
        *o = (boxes.iter().map(|b| (b.coords()[k] - mean).powi(2)).sum::<f64>() / n).sqrt();
    }
    out
}

fn ordered(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
    BBox { x1: x1.min(x2), y1: y1.min(y2), x2: x1.max(x2), y2: y1.max(y2) }
}

/// Mean coordinate spread of refined jitters, relative to the candidate's
/// half perimeter.
pub fn box_jitter_variance(refiner: &dyn BoxRefiner, b: &BBox, cfg: &BoxSelectionConfig, rng: &mut impl Rng) -> f64 {
    let half = 0.5 * (b.width() + b.height());
    let r = cfg.jitter_scale * half;
    let jitters: Vec<BBox> = (0..cfg.jitter_count)
        .map(|_| {
            let mut d = [0.0; 4];
            if r > 0.0 {
                for v in &mut d {
                    *v = rng.gen_range(-r..=r);
                }
            }
            ordered(b.x1 + d[0], b.y1 + d[1], b.x2 + d[2], b.y2 + d[3])
        })
        .collect();
    let refined = refiner.refine(&jitters);
    coord_std(&refined).iter().sum::<f64>() / (4.0 * half)
}

/// Spread of the iterated refinement sequence `b¹ … bᵀ` relative to the
/// squared size of the final box.
pub fn regression_jitter_variance(refiner: &dyn BoxRefiner, b: &BBox, cfg: &BoxSelectionConfig) -> f64 {
    let mut seq = Vec::with_capacity(cfg.reg_iters);
    let mut cur = *b;
    for _ in 0..cfg.reg_iters {
        cur = refiner.refine(&[cur])[0];
        seq.push(cur);
    }
    let last = seq.last().expect("reg_iters >= 2");
    let denom = last.width().powi(2) + last.height().powi(2);
    let s: f64 = coord_std(&seq).iter().map(|v| v * v).sum();
    if denom > 0.0 {
        s / (4.0 * denom)
    } else {
        f64::INFINITY
    }
}

/// A proposal after refinement, with its selection statistics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub proposal: BBox,
    pub refined: BBox,
    pub objectness: f64,
    /// Localization variance of the active strategy (0 for `rpn_score`).
    pub variance: f64,
}

/// Walk `proposals` in objectness order and keep the first `top_k` that
/// pass the active filter and do not overlap an earlier pick.
pub fn select_boxes(refiner: &dyn BoxRefiner, proposals: &[Proposal], cfg: &BoxSelectionConfig, rng: &mut impl Rng) -> Vec<Candidate> {
    let mut order: Vec<&Proposal> = proposals.iter().filter(|p| p.objectness >= cfg.min_objectness).collect();
    order.sort_by(|a, b| b.objectness.total_cmp(&a.objectness));
    let mut out: Vec<Candidate> = Vec::new();
    for p in order {
        if out.len() >= cfg.top_k {
            break;
        }
        let (pass, variance) = match cfg.strategy {
            SelectionStrategy::RpnScore => (p.objectness >= cfg.rpn_thresh, 0.0),
            SelectionStrategy::BoxJitter => {
                let v = box_jitter_variance(refiner, &p.bbox, cfg, rng);
                (v <= cfg.bjv_thresh, v)
            }
            SelectionStrategy::RegJitter => {
                let v = regression_jitter_variance(refiner, &p.bbox, cfg);
                (v <= cfg.rjv_thresh, v)
            }
        };
        if !pass {
            continue;
        }
        let refined = refiner.refine(&[p.bbox])[0];
        if out.iter().any(|c| crate::geometry::iou(&c.refined, &refined) > cfg.candidate_nms) {
            continue;
        }
        out.push(Candidate { proposal: p.bbox, refined, objectness: p.objectness, variance });
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TeacherOutput {
    /// Confident detections for the consistency loss.
    pub student_targets: Vec<Annotation>,
    /// Selected boxes for regression targets and external classification.
    pub external_candidates: Vec<Candidate>,
    pub proposals: Vec<Proposal>,
}

/// Teacher pass on a weak view. All boxes are in that view's frame.
pub fn generate_pseudo_labels(
    det: &Detector,
    teacher: &DetectorParams,
    weak: &Tensor3,
    emb: &EmbeddingTable,
    cfg: &BoxSelectionConfig,
    rng: &mut impl Rng,
) -> (TeacherOutput, Tensor3) {
    let (fmap, _) = det.backbone(&teacher.values, weak);
    let proposals = det.proposals_from(&det.rpn(teacher, &fmap));
    let out = pseudo_labels_on(det, teacher, &fmap, proposals, emb, cfg, rng);
    (out, fmap)
}

pub fn pseudo_labels_on(
    det: &Detector,
    teacher: &DetectorParams,
    fmap: &Tensor3,
    proposals: Vec<Proposal>,
    emb: &EmbeddingTable,
    cfg: &BoxSelectionConfig,
    rng: &mut impl Rng,
) -> TeacherOutput {
    // thresholding before per-class NMS is equivalent to after
    let dets: Vec<Detection> = det.detect_from(teacher, fmap, &proposals, emb, cfg.target_thresh.next_down(), cfg.target_nms, usize::MAX);
    let student_targets = dets
        .into_iter()
        .map(|d| Annotation::pseudo(d.bbox, d.category, d.score, Provenance::TeacherPseudo))
        .collect();
    let refiner = HeadRefiner { det, params: teacher, fmap };
    let external_candidates = select_boxes(&refiner, &proposals, cfg, rng);
    TeacherOutput { student_targets, external_candidates, proposals }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::DetectorConfig;
    use crate::rng::Rng as ChaCha;
    use rand::SeedableRng;
    use std::cell::Cell;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    struct Fixed(BBox);
    impl BoxRefiner for Fixed {
        fn refine(&self, boxes: &[BBox]) -> Vec<BBox> {
            vec![self.0; boxes.len()]
        }
    }

    /// Emits `base ± spread` alternately on every coordinate.
    struct Alternating {
        base: BBox,
        spread: f64,
        calls: Cell<usize>,
    }
    impl BoxRefiner for Alternating {
        fn refine(&self, boxes: &[BBox]) -> Vec<BBox> {
            boxes
                .iter()
                .map(|_| {
                    let k = self.calls.get();
                    self.calls.set(k + 1);
                    let s = if k % 2 == 0 { self.spread } else { -self.spread };
                    BBox { x1: self.base.x1 + s, y1: self.base.y1 + s, x2: self.base.x2 + s, y2: self.base.y2 + s }
                })
                .collect()
        }
    }

    /// Moves each box toward `target` by a fraction, equivariant under
    /// joint scaling of boxes and target.
    struct Toward {
        target: BBox,
        rate: f64,
    }
    impl BoxRefiner for Toward {
        fn refine(&self, boxes: &[BBox]) -> Vec<BBox> {
            boxes
                .iter()
                .map(|x| {
                    let t = self.target.coords();
                    let c = x.coords();
                    let m: Vec<f64> = (0..4).map(|k| c[k] + self.rate * (t[k] - c[k])).collect();
                    ordered(m[0], m[1], m[2], m[3])
                })
                .collect()
        }
    }

    /// Rounds coordinates to the 10 px grid, absorbing small jitter.
    struct Snap;
    impl BoxRefiner for Snap {
        fn refine(&self, boxes: &[BBox]) -> Vec<BBox> {
            boxes.iter().map(|x| BBox { x1: (x.x1 / 10.0).round() * 10.0, y1: (x.y1 / 10.0).round() * 10.0, x2: (x.x2 / 10.0).round() * 10.0, y2: (x.y2 / 10.0).round() * 10.0 }).collect()
        }
    }

    #[test]
    fn ema_copy_half_and_decay() {
        let mut t = vec![3.0, -1.0];
        ema_update(&mut t, &[0.5, 2.0], 0.0).unwrap();
        assert_eq!(t, vec![0.5, 2.0]);
        let mut t = vec![1.0];
        ema_update(&mut t, &[0.0], 0.5).unwrap();
        assert_eq!(t, vec![0.5]);
        let (a, theta, t0) = (0.9, 0.25, 4.0);
        let mut t = vec![t0];
        for n in 1..=50 {
            ema_update(&mut t, &[theta], a).unwrap();
            let expect = a.powi(n) * (t0 - theta);
            assert!(((t[0] - theta).abs() - expect.abs()).abs() < 1e-9);
        }
        assert!(ema_update(&mut t, &[0.0, 1.0], 0.5).is_err());
        assert!(EmaState::new(crate::nn::ParamVec::zeros(Default::default()), 1.0).is_err());
    }

    #[test]
    fn bjv_reference_values() {
        let cfg = BoxSelectionConfig::default();
        let mut rng = ChaCha::seed_from_u64(0);
        let cand = b(10.0, 10.0, 30.0, 30.0);
        assert_eq!(box_jitter_variance(&Fixed(cand), &cand, &cfg, &mut rng), 0.0);
        let alt = Alternating { base: cand, spread: 2.0, calls: Cell::new(0) };
        let v = box_jitter_variance(&alt, &cand, &cfg, &mut rng);
        assert!((v - 0.1).abs() < 1e-12, "{v}");
    }

    #[test]
    fn bjv_scale_invariant_with_equivariant_refiner() {
        let cfg = BoxSelectionConfig::default();
        let target = b(12.0, 11.0, 28.0, 31.0);
        let cand = b(10.0, 10.0, 30.0, 30.0);
        let v1 = box_jitter_variance(&Toward { target, rate: 0.3 }, &cand, &cfg, &mut ChaCha::seed_from_u64(4));
        let s = |x: &BBox| b(2.0 * x.x1, 2.0 * x.y1, 2.0 * x.x2, 2.0 * x.y2);
        let v2 = box_jitter_variance(&Toward { target: s(&target), rate: 0.3 }, &s(&cand), &cfg, &mut ChaCha::seed_from_u64(4));
        assert!(v1 > 0.0);
        assert!((v1 - v2).abs() < 1e-12);
    }

    #[test]
    fn rjv_reference_values() {
        let cfg = BoxSelectionConfig::default();
        let cand = b(0.0, 0.0, 12.0, 9.0);
        assert_eq!(regression_jitter_variance(&Fixed(b(1.0, 1.0, 11.0, 11.0)), &cand, &cfg), 0.0);
        // final box is base - 1 (4 iterations, alternating), 10 × 10
        let alt = Alternating { base: b(6.0, 6.0, 16.0, 16.0), spread: 1.0, calls: Cell::new(0) };
        let v = regression_jitter_variance(&alt, &cand, &cfg);
        assert!((v - 0.005).abs() < 1e-12, "{v}");
    }

    #[test]
    fn rjv_ignores_category_labels() {
        let det = Detector::new(DetectorConfig::tiny()).unwrap();
        let p = det.init_params(&mut ChaCha::seed_from_u64(1));
        let img = Tensor3::filled(3, 32, 32, 0.3);
        let (fmap, _) = det.backbone(&p.values, &img);
        let r = HeadRefiner { det: &det, params: &p, fmap: &fmap };
        let cfg = BoxSelectionConfig::default();
        let a = regression_jitter_variance(&r, &b(4.0, 4.0, 20.0, 18.0), &cfg);
        // the head never sees the vocabulary: any embedding table gives the same refinement
        let again = regression_jitter_variance(&r, &b(4.0, 4.0, 20.0, 18.0), &cfg);
        assert_eq!(a, again);
    }

    fn props(scores: &[f64]) -> Vec<Proposal> {
        scores.iter().enumerate().map(|(i, s)| Proposal { bbox: b(20.0 * i as f64, 0.0, 20.0 * i as f64 + 10.0, 10.0), objectness: *s }).collect()
    }

    #[test]
    fn rpn_score_threshold() {
        let cfg = BoxSelectionConfig { strategy: SelectionStrategy::RpnScore, min_objectness: 0.0, ..Default::default() };
        let p = props(&[0.99, 0.4]);
        let id = Toward { target: b(0.0, 0.0, 1.0, 1.0), rate: 0.0 };
        let out = select_boxes(&id, &p, &cfg, &mut ChaCha::seed_from_u64(0));
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].refined, p[0].bbox);
    }

    #[test]
    fn jitter_extremes_and_cap() {
        let p = props(&[0.9, 0.8, 0.7, 0.95, 0.6, 0.99, 0.85]);
        let id = Toward { target: b(0.0, 0.0, 1.0, 1.0), rate: 0.0 };
        let mut rng = ChaCha::seed_from_u64(0);
        for strategy in [SelectionStrategy::BoxJitter, SelectionStrategy::RegJitter] {
            let open = BoxSelectionConfig { strategy, bjv_thresh: f64::INFINITY, rjv_thresh: f64::INFINITY, top_k: 100, ..Default::default() };
            assert_eq!(select_boxes(&id, &p, &open, &mut rng).len(), 7);
            let capped = BoxSelectionConfig { top_k: 5, ..open.clone() };
            let out = select_boxes(&id, &p, &capped, &mut rng);
            assert_eq!(out.len(), 5);
            assert!(out.windows(2).all(|w| w[0].objectness >= w[1].objectness));
            // zero-variance refinement passes any threshold
            let fixed = BoxSelectionConfig { bjv_thresh: 0.0, rjv_thresh: 0.0, ..open.clone() };
            assert_eq!(select_boxes(&Snap, &p, &fixed, &mut rng).len(), 7);
            let wild = Alternating { base: b(5.0, 5.0, 9.0, 9.0), spread: 50.0, calls: Cell::new(0) };
            assert!(select_boxes(&wild, &p, &BoxSelectionConfig { strategy, top_k: 100, ..Default::default() }, &mut rng).is_empty());
        }
    }

    #[test]
    fn outputs_are_refined_inputs() {
        let det = Detector::new(DetectorConfig::tiny()).unwrap();
        let p = det.init_params(&mut ChaCha::seed_from_u64(2));
        let img = Tensor3::filled(3, 32, 32, 0.6);
        let emb = EmbeddingTable::for_vocabulary(&crate::vocab::Vocabulary::shapes(), &crate::vocab::HashTextEncoder::new(16, 0));
        let cfg = BoxSelectionConfig { min_objectness: 0.0, rjv_thresh: f64::INFINITY, ..Default::default() };
        let (out, fmap) = generate_pseudo_labels(&det, &p, &img, &emb, &cfg, &mut ChaCha::seed_from_u64(3));
        assert!(out.external_candidates.len() <= cfg.top_k);
        let r = HeadRefiner { det: &det, params: &p, fmap: &fmap };
        for c in &out.external_candidates {
            assert!(out.proposals.iter().any(|q| q.bbox == c.proposal));
            assert_eq!(r.refine(&[c.proposal])[0], c.refined);
        }
        assert!(out.student_targets.iter().all(|a| a.score.unwrap() >= cfg.target_thresh));
    }
}
