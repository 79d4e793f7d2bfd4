//! AP@IoU, harmonic mean and class-agnostic recall.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::detector::{Detection, Detector, DetectorParams};
use crate::error::Result;
use crate::geometry::{iou, BBox};
use crate::vocab::{EmbeddingTable, Vocabulary};

/// A scored prediction attached to image `image`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredBox {
    pub image: usize,
    pub bbox: BBox,
    pub score: f64,
}

fn rank(a: &ScoredBox, b: &ScoredBox) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.image.cmp(&b.image))
        .then_with(|| a.bbox.coords().partial_cmp(&b.bbox.coords()).unwrap_or(Ordering::Equal))
}

/// Greedy matching in descending score order: each detection takes the
/// unmatched ground truth of its image with the highest IoU, if that IoU
/// reaches `iou_thresh`. Returns the TP flag of each detection after
/// sorting, and the sorted detections.
pub fn match_detections(dets: &[ScoredBox], gts: &[Vec<BBox>], iou_thresh: f64) -> Vec<bool> {
    let mut sorted = dets.to_vec();
    sorted.sort_by(rank);
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    sorted
        .iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts[d.image].iter().enumerate() {
                if taken[d.image][j] {
                    continue;
                }
                let v = iou(&d.bbox, g);
                if v >= iou_thresh && best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            match best {
                Some((j, _)) => {
                    taken[d.image][j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// All-point interpolated AP. `None` when there is no ground truth.
pub fn average_precision(dets: &[ScoredBox], gts: &[Vec<BBox>], iou_thresh: f64) -> Option<f64> {
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return None;
    }
    let tp = match_detections(dets, gts, iou_thresh);
    let mut prec = Vec::with_capacity(tp.len());
    let mut rec = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, t) in tp.iter().enumerate() {
        if *t {
            hits += 1;
        }
        prec.push(hits as f64 / (i + 1) as f64);
        rec.push(hits as f64 / n_gt as f64);
    }
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (p, r) in prec.iter().zip(&rec) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    Some(ap)
}

/// `2ab / (a + b)`, and 0 when both are 0.
pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

/// Fraction of ground truths per category overlapped at `iou_thresh` by
/// any prediction of the same image, labels ignored. Categories without
/// ground truth are absent.
pub fn class_agnostic_recall(preds: &[Vec<BBox>], gts: &[Vec<(BBox, usize)>], iou_thresh: f64) -> BTreeMap<usize, f64> {
    let mut hit: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (p, g) in preds.iter().zip(gts) {
        for (b, c) in g {
            let e = hit.entry(*c).or_default();
            e.1 += 1;
            if p.iter().any(|q| iou(q, b) >= iou_thresh) {
                e.0 += 1;
            }
        }
    }
    hit.into_iter().map(|(c, (h, n))| (c, h as f64 / n as f64)).collect()
}

fn mean_over(values: &BTreeMap<usize, f64>, ids: &[usize]) -> f64 {
    let v: Vec<f64> = ids.iter().filter_map(|i| values.get(i)).copied().collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Which predictions count toward class-agnostic recall.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecallSource {
    /// RPN proposals with objectness at least `recall_score_thresh`, top
    /// `recall_budget` by objectness.
    Proposals,
    /// Final detections with score at least `recall_score_thresh`, top
    /// `recall_budget` by score.
    Detections,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_thresh: f64,
    pub score_thresh: f64,
    pub nms_thresh: f64,
    pub max_dets: usize,
    pub recall_source: RecallSource,
    pub recall_budget: usize,
    pub recall_score_thresh: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresh: 0.5,
            score_thresh: 0.001,
            nms_thresh: 0.5,
            max_dets: 100,
            recall_source: RecallSource::Detections,
            recall_budget: 100,
            recall_score_thresh: 0.5,
        }
    }
}

/// Metrics on a 0–100 scale.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_class_ap: BTreeMap<String, f64>,
    pub map: f64,
    pub map_base: f64,
    pub map_novel: f64,
    pub mar: f64,
    pub mar_base: f64,
    pub mar_novel: f64,
    pub hm: f64,
    pub recall_source: Option<RecallSource>,
    pub recall_budget: usize,
}

/// Metrics from per-image detections and recall predictions.
pub fn evaluate_predictions(
    detections: &[Vec<Detection>],
    recall_preds: &[Vec<BBox>],
    gts: &[Vec<(BBox, usize)>],
    vocab: &Vocabulary,
    cfg: &EvalConfig,
) -> EvalResult {
    let mut aps = BTreeMap::new();
    for c in 0..vocab.len() {
        let dets: Vec<ScoredBox> = detections
            .iter()
            .enumerate()
            .flat_map(|(i, ds)| ds.iter().filter(|d| d.category == c).map(move |d| ScoredBox { image: i, bbox: d.bbox, score: d.score }))
            .collect();
        let g: Vec<Vec<BBox>> = gts.iter().map(|g| g.iter().filter(|(_, k)| *k == c).map(|(b, _)| *b).collect()).collect();
        if let Some(ap) = average_precision(&dets, &g, cfg.iou_thresh) {
            aps.insert(c, 100.0 * ap);
        }
    }
    let all: Vec<usize> = (0..vocab.len()).collect();
    let recall: BTreeMap<usize, f64> =
        class_agnostic_recall(recall_preds, gts, cfg.iou_thresh).into_iter().map(|(c, r)| (c, 100.0 * r)).collect();
    let map_base = mean_over(&aps, vocab.base_ids());
    let map_novel = mean_over(&aps, vocab.novel_ids());
    EvalResult {
        per_class_ap: aps.iter().map(|(c, v)| (vocab.name(*c).to_string(), *v)).collect(),
        map: mean_over(&aps, &all),
        map_base,
        map_novel,
        mar: mean_over(&recall, &all),
        mar_base: mean_over(&recall, vocab.base_ids()),
        mar_novel: mean_over(&recall, vocab.novel_ids()),
        hm: harmonic_mean(map_base, map_novel),
        recall_source: Some(cfg.recall_source),
        recall_budget: cfg.recall_budget,
    }
}

/// Run the detector over `dataset` and score it against its annotations.
pub fn evaluate(
    det: &Detector,
    params: &DetectorParams,
    dataset: &Dataset,
    emb: &EmbeddingTable,
    vocab: &Vocabulary,
    cfg: &EvalConfig,
) -> Result<EvalResult> {
    let mut detections = Vec::with_capacity(dataset.len());
    let mut recall_preds = Vec::with_capacity(dataset.len());
    for r in &dataset.records {
        let (fmap, _) = det.backbone(&params.values, &r.pixels);
        let proposals = det.proposals_from(&det.rpn(params, &fmap));
        let ds = det.detect_from(params, &fmap, &proposals, emb, cfg.score_thresh, cfg.nms_thresh, cfg.max_dets);
        let rp: Vec<BBox> = match cfg.recall_source {
            RecallSource::Proposals => {
                proposals.iter().filter(|p| p.objectness >= cfg.recall_score_thresh).take(cfg.recall_budget).map(|p| p.bbox).collect()
            }
            RecallSource::Detections => {
                ds.iter().filter(|d| d.score >= cfg.recall_score_thresh).take(cfg.recall_budget).map(|d| d.bbox).collect()
            }
        };
        detections.push(ds);
        recall_preds.push(rp);
    }
    let gts: Vec<Vec<(BBox, usize)>> =
        dataset.records.iter().map(|r| r.annotations.iter().map(|a| (a.bbox, a.category)).collect()).collect();
    Ok(evaluate_predictions(&detections, &recall_preds, &gts, vocab, cfg))
}
