//! Minimal two-stage open-vocabulary detector.
//!
//! Backbone: four 3×3 convolutions (strides 2, 2, 2, 1) giving a stride-8
//! feature map. RPN: a 3×3 convolution followed by 1×1 objectness and
//! delta heads over single-scale square anchors. Second stage: aligned
//! RoI average pooling, a two-layer projection to the embedding width, a
//! class-agnostic delta head, and a cosine classifier against the frozen
//! category prototypes plus one learnable background prototype.
//!
//! All weights live in one flat [`ParamVec`]; [`Detector`] only describes
//! the architecture, so a student and its EMA teacher share one instance.

mod box_coder;
mod targets;

use std::ops::Range;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use box_coder::{clip_box, BoxCoder};
pub use targets::{assign_anchors, assign_rois, AnchorAssignment, RoiAssignment, SamplingConfig};

use crate::error::{Error, Result};
use crate::geometry::{nms, nms_indices, BBox};
use crate::nn::{
    bce_with_logit, cross_entropy, relu_backward, relu_inplace, sigmoid, smooth_l1_4, softmax, Conv2d, ConvCache,
    Linear, ParamLayout, ParamVec, RoiAlign, RoiTaps,
};
use crate::tensor::Tensor3;
use crate::vocab::EmbeddingTable;

/// Student and teacher weights share this representation.
pub type DetectorParams = ParamVec;

pub const STRIDE: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub image_size: usize,
    pub channels: [usize; 4],
    pub rpn_channels: usize,
    pub anchor_sizes: Vec<f64>,
    pub roi_output: usize,
    pub roi_sampling: usize,
    pub roi_hidden: usize,
    pub embed_dim: usize,
    /// Proposals kept after NMS.
    pub n_proposals: usize,
    pub rpn_nms: f64,
    pub min_box_size: f64,
    pub init_inv_temperature: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            channels: [16, 32, 32, 32],
            rpn_channels: 16,
            anchor_sizes: vec![10.0, 16.0, 24.0],
            roi_output: 5,
            roi_sampling: 2,
            roi_hidden: 64,
            embed_dim: 64,
            n_proposals: 100,
            rpn_nms: 0.7,
            min_box_size: 2.0,
            init_inv_temperature: 14.0,
        }
    }
}

impl DetectorConfig {
    /// 32×32 input, embedding width 16: small enough for exhaustive
    /// finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            image_size: 32,
            channels: [2, 3, 4, 4],
            rpn_channels: 3,
            anchor_sizes: vec![8.0, 14.0],
            roi_output: 3,
            roi_sampling: 2,
            roi_hidden: 6,
            embed_dim: 16,
            n_proposals: 20,
            rpn_nms: 0.7,
            min_box_size: 1.0,
            init_inv_temperature: 14.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.image_size.is_multiple_of(STRIDE) || self.image_size == 0 {
            return Err(Error::Config(format!("image_size {} must be a positive multiple of {STRIDE}", self.image_size)));
        }
        if self.anchor_sizes.is_empty() || self.anchor_sizes.iter().any(|s| *s <= 0.0) {
            return Err(Error::Config("anchor_sizes must be non-empty and positive".into()));
        }
        if self.channels.contains(&0) || self.embed_dim == 0 || self.roi_hidden == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.init_inv_temperature <= 0.0 {
            return Err(Error::Config("init_inv_temperature must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub bbox: BBox,
    pub objectness: f64,
}

/// Pre-normalisation region embedding `v`.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiFeature(pub Vec<f64>);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub category: usize,
    pub score: f64,
}

/// Second-stage output for one region.
#[derive(Clone, Debug)]
pub struct RoiPrediction {
    pub refined: BBox,
    /// `C` category probabilities followed by background.
    pub probs: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct RpnOutput {
    pub logits: Vec<f64>,
    pub deltas: Vec<[f64; 4]>,
}

pub struct BackboneCache {
    convs: Vec<ConvCache>,
    acts: Vec<Tensor3>,
}

struct RpnCache {
    conv: ConvCache,
    hidden: Tensor3,
    obj: ConvCache,
    reg: ConvCache,
}

struct RoiCache {
    n: usize,
    pooled: Vec<f64>,
    hidden: Vec<f64>,
    taps: Vec<RoiTaps>,
}

/// Gradient bookkeeping target: class column `C` is background.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnchorTarget {
    pub anchor: usize,
    /// `(target in {0, 1}, weight)`.
    pub objectness: Option<(f64, f64)>,
    pub delta: Option<([f64; 4], f64)>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiTarget {
    pub bbox: BBox,
    /// `(class column, weight)`.
    pub class: Option<(usize, f64)>,
    pub delta: Option<([f64; 4], f64)>,
}

/// Per-image training targets with their final loss weights.
#[derive(Clone, Debug, Default)]
pub struct ImageTargets {
    pub anchors: Vec<AnchorTarget>,
    pub rois: Vec<RoiTarget>,
}

/// Weighted loss split into its classification and regression parts.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub cls: f64,
    pub reg: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.cls + self.reg
    }
}

impl std::ops::AddAssign for LossParts {
    fn add_assign(&mut self, o: Self) {
        self.cls += o.cls;
        self.reg += o.reg;
    }
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub cfg: DetectorConfig,
    layout: ParamLayout,
    convs: Vec<Conv2d>,
    rpn_conv: Conv2d,
    rpn_obj: Conv2d,
    rpn_reg: Conv2d,
    roi_align: RoiAlign,
    fc1: Linear,
    fc2: Linear,
    reg: Linear,
    background: Range<usize>,
    logit_scale: Range<usize>,
    anchors: Vec<BBox>,
    feat_hw: usize,
}

impl Detector {
    pub fn new(cfg: DetectorConfig) -> Result<Self> {
        cfg.validate()?;
        let mut layout = ParamLayout::new();
        let strides = [2, 2, 2, 1];
        let mut convs = Vec::with_capacity(4);
        let mut in_c = 3;
        for (i, (&out_c, &s)) in cfg.channels.iter().zip(&strides).enumerate() {
            convs.push(Conv2d::new(&mut layout, &format!("backbone.conv{}", i + 1), in_c, out_c, 3, s, 1));
            in_c = out_c;
        }
        let a = cfg.anchor_sizes.len();
        let rpn_conv = Conv2d::new(&mut layout, "rpn.conv", in_c, cfg.rpn_channels, 3, 1, 1);
        let rpn_obj = Conv2d::new(&mut layout, "rpn.objectness", cfg.rpn_channels, a, 1, 1, 0);
        let rpn_reg = Conv2d::new(&mut layout, "rpn.deltas", cfg.rpn_channels, 4 * a, 1, 1, 0);
        let pooled = in_c * cfg.roi_output * cfg.roi_output;
        let fc1 = Linear::new(&mut layout, "roi.fc1", pooled, cfg.roi_hidden);
        let fc2 = Linear::new(&mut layout, "roi.fc2", cfg.roi_hidden, cfg.embed_dim);
        let reg = Linear::new(&mut layout, "roi.box_deltas", cfg.embed_dim, 4);
        let background = layout.register("cls.background", &[cfg.embed_dim]);
        let logit_scale = layout.register("cls.logit_scale", &[1]);
        let feat_hw = cfg.image_size / STRIDE;
        let anchors = make_anchors(feat_hw, &cfg.anchor_sizes);
        let roi_align = RoiAlign::new(cfg.roi_output, cfg.roi_sampling, 1.0 / STRIDE as f64);
        Ok(Self { cfg, layout, convs, rpn_conv, rpn_obj, rpn_reg, roi_align, fc1, fc2, reg, background, logit_scale, anchors, feat_hw })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn anchors(&self) -> &[BBox] {
        &self.anchors
    }

    pub fn num_params(&self) -> usize {
        self.layout.len()
    }

    pub fn init_params(&self, rng: &mut impl Rng) -> DetectorParams {
        let mut p = ParamVec::zeros(self.layout.clone());
        let v = &mut p.values;
        for c in &self.convs {
            c.init(v, rng);
        }
        self.rpn_conv.init(v, rng);
        fill_normal(&mut v[self.rpn_obj.weight.clone()], 0.01, rng);
        fill_normal(&mut v[self.rpn_reg.weight.clone()], 0.01, rng);
        self.fc1.init(v, rng);
        self.fc2.init(v, rng);
        self.reg.init_normal(v, 0.001, rng);
        fill_normal(&mut v[self.background.clone()], 1.0, rng);
        v[self.logit_scale.start] = self.cfg.init_inv_temperature.ln();
        p
    }

    /// Parameter ranges of the class-agnostic box head.
    pub fn box_head_ranges(&self) -> [Range<usize>; 2] {
        [self.reg.weight.clone(), self.reg.bias.clone()]
    }

    pub fn rpn_ranges(&self) -> Vec<Range<usize>> {
        [&self.rpn_conv, &self.rpn_obj, &self.rpn_reg]
            .iter()
            .flat_map(|c| [c.weight.clone(), c.bias.clone()])
            .collect()
    }

    pub fn inv_temperature(&self, p: &DetectorParams) -> f64 {
        p.values[self.logit_scale.start].exp()
    }

    pub fn set_inv_temperature(&self, p: &mut DetectorParams, inv_tau: f64) {
        p.values[self.logit_scale.start] = inv_tau.ln();
    }

    // ----- backbone -------------------------------------------------------

    pub fn backbone(&self, p: &[f64], image: &Tensor3) -> (Tensor3, BackboneCache) {
        let mut convs = Vec::with_capacity(self.convs.len());
        let mut acts = Vec::with_capacity(self.convs.len());
        let mut x = image.clone();
        for c in &self.convs {
            let (mut y, cache) = c.forward(p, &x);
            relu_inplace(&mut y.data);
            convs.push(cache);
            acts.push(y.clone());
            x = y;
        }
        (x, BackboneCache { convs, acts })
    }

    fn backbone_backward(&self, p: &[f64], cache: &BackboneCache, mut d: Tensor3, grads: &mut [f64]) {
        for i in (0..self.convs.len()).rev() {
            relu_backward(&cache.acts[i].data, &mut d.data);
            match self.convs[i].backward(p, &cache.convs[i], &d, grads, i > 0) {
                Some(dx) => d = dx,
                None => break,
            }
        }
    }

    // ----- RPN ------------------------------------------------------------

    fn rpn_forward(&self, p: &[f64], fmap: &Tensor3) -> (RpnOutput, RpnCache) {
        let (mut hidden, conv) = self.rpn_conv.forward(p, fmap);
        relu_inplace(&mut hidden.data);
        let (obj_map, obj) = self.rpn_obj.forward(p, &hidden);
        let (reg_map, reg) = self.rpn_reg.forward(p, &hidden);
        let a = self.cfg.anchor_sizes.len();
        let n = self.anchors.len();
        let mut logits = Vec::with_capacity(n);
        let mut deltas = Vec::with_capacity(n);
        for y in 0..self.feat_hw {
            for x in 0..self.feat_hw {
                for s in 0..a {
                    logits.push(obj_map.get(s, y, x));
                    deltas.push([0, 1, 2, 3].map(|k| reg_map.get(4 * s + k, y, x)));
                }
            }
        }
        (RpnOutput { logits, deltas }, RpnCache { conv, hidden, obj, reg })
    }

    fn rpn_backward(&self, p: &[f64], cache: &RpnCache, d_logits: &[f64], d_deltas: &[[f64; 4]], grads: &mut [f64]) -> Tensor3 {
        let a = self.cfg.anchor_sizes.len();
        let hw = self.feat_hw;
        let mut d_obj = Tensor3::zeros(a, hw, hw);
        let mut d_reg = Tensor3::zeros(4 * a, hw, hw);
        for y in 0..hw {
            for x in 0..hw {
                for s in 0..a {
                    let i = (y * hw + x) * a + s;
                    d_obj.set(s, y, x, d_logits[i]);
                    for k in 0..4 {
                        d_reg.set(4 * s + k, y, x, d_deltas[i][k]);
                    }
                }
            }
        }
        let mut dh = self.rpn_obj.backward(p, &cache.obj, &d_obj, grads, true).expect("input grad");
        let dh2 = self.rpn_reg.backward(p, &cache.reg, &d_reg, grads, true).expect("input grad");
        for (a, b) in dh.data.iter_mut().zip(&dh2.data) {
            *a += b;
        }
        relu_backward(&cache.hidden.data, &mut dh.data);
        self.rpn_conv.backward(p, &cache.conv, &dh, grads, true).expect("input grad")
    }

    pub fn rpn(&self, p: &DetectorParams, fmap: &Tensor3) -> RpnOutput {
        self.rpn_forward(&p.values, fmap).0
    }

    /// Decode, clip, sort by objectness, NMS, cap at `n_proposals`.
    pub fn proposals_from(&self, out: &RpnOutput) -> Vec<Proposal> {
        let size = self.cfg.image_size as f64;
        let mut dets: Vec<(BBox, f64)> = Vec::with_capacity(self.anchors.len());
        for (i, anchor) in self.anchors.iter().enumerate() {
            let b = BoxCoder::RPN.decode(anchor, &out.deltas[i]);
            if let Some(c) = clip_box(&b, size, size, self.cfg.min_box_size) {
                dets.push((c, sigmoid(out.logits[i])));
            }
        }
        let mut kept = nms(&dets, self.cfg.rpn_nms);
        kept.truncate(self.cfg.n_proposals);
        kept.into_iter().map(|(bbox, objectness)| Proposal { bbox, objectness }).collect()
    }

    pub fn forward_rpn(&self, p: &DetectorParams, image: &Tensor3) -> Vec<Proposal> {
        let (fmap, _) = self.backbone(&p.values, image);
        self.proposals_from(&self.rpn(p, &fmap))
    }

    // ----- second stage ---------------------------------------------------

    fn roi_forward(&self, p: &[f64], fmap: &Tensor3, boxes: &[BBox]) -> (Vec<f64>, RoiCache) {
        let n = boxes.len();
        let (pooled, taps) = self.roi_align.forward(fmap, boxes);
        let mut hidden = self.fc1.forward(p, &pooled, n);
        relu_inplace(&mut hidden);
        let v = self.fc2.forward(p, &hidden, n);
        (v, RoiCache { n, pooled, hidden, taps })
    }

    fn roi_backward(&self, p: &[f64], cache: &RoiCache, dv: &[f64], grads: &mut [f64], dfmap: &mut Tensor3) {
        let mut dh = self.fc2.backward(p, &cache.hidden, dv, cache.n, grads, true).expect("input grad");
        relu_backward(&cache.hidden, &mut dh);
        let dpooled = self.fc1.backward(p, &cache.pooled, &dh, cache.n, grads, true).expect("input grad");
        self.roi_align.backward(&cache.taps, &dpooled, dfmap);
    }

    /// Region embeddings for `boxes` on a precomputed feature map.
    pub fn roi_features_on(&self, p: &DetectorParams, fmap: &Tensor3, boxes: &[BBox]) -> Vec<RoiFeature> {
        let d = self.cfg.embed_dim;
        let (v, _) = self.roi_forward(&p.values, fmap, boxes);
        v.chunks_exact(d).map(|r| RoiFeature(r.to_vec())).collect()
    }

    pub fn roi_features(&self, p: &DetectorParams, image: &Tensor3, boxes: &[BBox]) -> Result<Vec<RoiFeature>> {
        if boxes.is_empty() {
            return Err(Error::EmptyInput("roi boxes"));
        }
        let (fmap, _) = self.backbone(&p.values, image);
        Ok(self.roi_features_on(p, &fmap, boxes))
    }

    /// Class-agnostic refinement: one delta per region, applied to its
    /// reference box.
    pub fn regress_boxes(&self, p: &DetectorParams, features: &[RoiFeature], anchors: &[BBox]) -> Result<Vec<BBox>> {
        if features.len() != anchors.len() {
            return Err(Error::ShapeMismatch { expected: anchors.len(), actual: features.len() });
        }
        let d = self.cfg.embed_dim;
        let flat: Vec<f64> = features.iter().flat_map(|f| f.0.iter().copied()).collect();
        let deltas = self.reg.forward(&p.values, &flat, features.len());
        debug_assert_eq!(flat.len(), features.len() * d);
        Ok(anchors.iter().zip(deltas.chunks_exact(4)).map(|(a, dl)| BoxCoder::ROI.decode(a, dl)).collect())
    }

    fn unit_background(&self, p: &[f64]) -> (Vec<f64>, f64) {
        let u = &p[self.background.clone()];
        let n = u.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        (u.iter().map(|x| x / n).collect(), n)
    }

    /// Cosine scores against every prototype, then the background
    /// prototype, scaled by `1/τ`. Rows are `C + 1` wide.
    pub fn classify_semantic(&self, p: &DetectorParams, features: &[RoiFeature], emb: &EmbeddingTable) -> Result<Vec<Vec<f64>>> {
        if emb.is_empty() {
            return Err(Error::EmptyInput("embeddings"));
        }
        let (u, _) = self.unit_background(&p.values);
        let scale = self.inv_temperature(p);
        features
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let nv = f.0.iter().map(|x| x * x).sum::<f64>().sqrt();
                if nv == 0.0 {
                    return Err(Error::ZeroNorm(i));
                }
                Ok(semantic_row(&f.0, nv, emb, &u, scale))
            })
            .collect()
    }

    /// Refined boxes and `C + 1` probabilities for `boxes`.
    pub fn predict_rois(&self, p: &DetectorParams, fmap: &Tensor3, boxes: &[BBox], emb: &EmbeddingTable) -> Vec<RoiPrediction> {
        if boxes.is_empty() {
            return Vec::new();
        }
        let feats = self.roi_features_on(p, fmap, boxes);
        let refined = self.regress_boxes(p, &feats, boxes).expect("lengths match");
        let (u, _) = self.unit_background(&p.values);
        let scale = self.inv_temperature(p);
        feats
            .iter()
            .zip(refined)
            .map(|(f, r)| {
                let nv = f.0.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                RoiPrediction { refined: r, probs: softmax(&semantic_row(&f.0, nv, emb, &u, scale)) }
            })
            .collect()
    }

    /// Full inference: proposals → second stage → per-class NMS →
    /// threshold, at most `max_dets` outputs sorted by score.
    #[allow(clippy::too_many_arguments)]
    pub fn detect(
        &self,
        p: &DetectorParams,
        image: &Tensor3,
        emb: &EmbeddingTable,
        score_thresh: f64,
        nms_thresh: f64,
        max_dets: usize,
    ) -> Result<Vec<Detection>> {
        if emb.is_empty() {
            return Err(Error::EmptyInput("embeddings"));
        }
        let (fmap, _) = self.backbone(&p.values, image);
        let proposals = self.proposals_from(&self.rpn(p, &fmap));
        Ok(self.detect_from(p, &fmap, &proposals, emb, score_thresh, nms_thresh, max_dets))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn detect_from(
        &self,
        p: &DetectorParams,
        fmap: &Tensor3,
        proposals: &[Proposal],
        emb: &EmbeddingTable,
        score_thresh: f64,
        nms_thresh: f64,
        max_dets: usize,
    ) -> Vec<Detection> {
        let boxes: Vec<BBox> = proposals.iter().map(|q| q.bbox).collect();
        let preds = self.predict_rois(p, fmap, &boxes, emb);
        let size = self.cfg.image_size as f64;
        let mut out = Vec::new();
        for c in 0..emb.len() {
            let cands: Vec<(BBox, f64)> = preds
                .iter()
                .filter(|r| r.probs[c] > score_thresh)
                .filter_map(|r| clip_box(&r.refined, size, size, self.cfg.min_box_size).map(|b| (b, r.probs[c])))
                .collect();
            for i in nms_indices(&cands, nms_thresh) {
                out.push(Detection { bbox: cands[i].0, category: c, score: cands[i].1 });
            }
        }
        out.sort_by(|a, b| crate::geometry::score_order(&(a.bbox, a.score), &(b.bbox, b.score)).then(a.category.cmp(&b.category)));
        out.truncate(max_dets);
        out
    }

    // ----- training -------------------------------------------------------

    /// Weighted loss of one image under `targets`. When `grads` is given,
    /// `scale ×` the gradient is accumulated into it.
    pub fn loss(
        &self,
        p: &DetectorParams,
        image: &Tensor3,
        targets: &ImageTargets,
        emb: &EmbeddingTable,
        scale: f64,
        grads: Option<&mut [f64]>,
    ) -> LossParts {
        let pv = &p.values;
        let (fmap, bcache) = self.backbone(pv, image);
        let mut parts = LossParts::default();
        let want_grad = grads.is_some();
        let mut dummy = Vec::new();
        let grads: &mut [f64] = match grads {
            Some(g) => g,
            None => &mut dummy,
        };
        let mut dfmap = if want_grad { Some(Tensor3::zeros(fmap.c, fmap.h, fmap.w)) } else { None };

        if !targets.anchors.is_empty() {
            let (out, cache) = self.rpn_forward(pv, &fmap);
            let mut d_logits = vec![0.0; out.logits.len()];
            let mut d_deltas = vec![[0.0; 4]; out.deltas.len()];
            for t in &targets.anchors {
                if let Some((y, w)) = t.objectness {
                    let (l, g) = bce_with_logit(out.logits[t.anchor], y);
                    parts.cls += w * l;
                    d_logits[t.anchor] += scale * w * g;
                }
                if let Some((target, w)) = t.delta {
                    parts.reg += w * smooth_l1_4(&out.deltas[t.anchor], &target, scale * w, &mut d_deltas[t.anchor]);
                }
            }
            if let Some(df) = dfmap.as_mut() {
                let d = self.rpn_backward(pv, &cache, &d_logits, &d_deltas, grads);
                for (a, b) in df.data.iter_mut().zip(&d.data) {
                    *a += b;
                }
            }
        }

        if !targets.rois.is_empty() {
            let boxes: Vec<BBox> = targets.rois.iter().map(|t| t.bbox).collect();
            let n = boxes.len();
            let dim = self.cfg.embed_dim;
            let (v, cache) = self.roi_forward(pv, &fmap, &boxes);
            let mut dv = vec![0.0; n * dim];
            let wants_reg = targets.rois.iter().any(|t| t.delta.is_some());
            let wants_cls = targets.rois.iter().any(|t| t.class.is_some());

            if wants_cls {
                let (u, un) = self.unit_background(pv);
                let log_scale = pv[self.logit_scale.start];
                let s = log_scale.exp();
                let c = emb.len();
                let mut du_hat = vec![0.0; dim];
                let mut d_log_scale = 0.0;
                for (i, t) in targets.rois.iter().enumerate() {
                    let Some((target, w)) = t.class else { continue };
                    let row = &v[i * dim..(i + 1) * dim];
                    let nv = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                    let scores = semantic_row(row, nv, emb, &u, s);
                    let mut ds = vec![0.0; c + 1];
                    parts.cls += w * cross_entropy(&scores, target, scale * w, &mut ds);
                    if !want_grad {
                        continue;
                    }
                    // s_j = e^ls * cos_j, cos_j = v̂ · t_j
                    d_log_scale += ds.iter().zip(&scores).map(|(a, b)| a * b).sum::<f64>();
                    let mut dv_hat = vec![0.0; dim];
                    for j in 0..=c {
                        let dcos = ds[j] * s;
                        let proto = if j < c { emb.row(j) } else { &u[..] };
                        for k in 0..dim {
                            dv_hat[k] += dcos * proto[k];
                        }
                        if j == c {
                            for k in 0..dim {
                                du_hat[k] += dcos * row[k] / nv;
                            }
                        }
                    }
                    let dot: f64 = dv_hat.iter().zip(row).map(|(a, b)| a * b / nv).sum();
                    let dvr = &mut dv[i * dim..(i + 1) * dim];
                    for k in 0..dim {
                        dvr[k] += (dv_hat[k] - row[k] / nv * dot) / nv;
                    }
                }
                if want_grad {
                    let dot: f64 = du_hat.iter().zip(&u).map(|(a, b)| a * b).sum();
                    let gb = &mut grads[self.background.clone()];
                    for k in 0..dim {
                        gb[k] += (du_hat[k] - u[k] * dot) / un;
                    }
                    grads[self.logit_scale.start] += d_log_scale;
                }
            }

            if wants_reg {
                let deltas = self.reg.forward(pv, &v, n);
                let mut dd = vec![0.0; n * 4];
                for (i, t) in targets.rois.iter().enumerate() {
                    if let Some((target, w)) = t.delta {
                        parts.reg += w * smooth_l1_4(&deltas[i * 4..i * 4 + 4], &target, scale * w, &mut dd[i * 4..i * 4 + 4]);
                    }
                }
                if want_grad {
                    let dvr = self.reg.backward(pv, &v, &dd, n, grads, true).expect("input grad");
                    for (a, b) in dv.iter_mut().zip(&dvr) {
                        *a += b;
                    }
                }
            }

            if let Some(df) = dfmap.as_mut() {
                self.roi_backward(pv, &cache, &dv, grads, df);
            }
        }

        if let Some(df) = dfmap {
            self.backbone_backward(pv, &bcache, df, grads);
        }
        parts
    }

    // ----- checkpoints ----------------------------------------------------

    pub fn save_params(&self, p: &DetectorParams, path: &Path) -> Result<()> {
        save_json(p, path)
    }

    pub fn load_params(&self, path: &Path) -> Result<DetectorParams> {
        let p: ParamVec = load_json(path)?;
        if p.layout != self.layout {
            return Err(Error::Config(format!("{}: parameter layout does not match the configured architecture", path.display())));
        }
        if p.values.len() != self.layout.len() {
            return Err(Error::ShapeMismatch { expected: self.layout.len(), actual: p.values.len() });
        }
        Ok(p)
    }
}

fn semantic_row(v: &[f64], nv: f64, emb: &EmbeddingTable, u_hat: &[f64], scale: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(emb.len() + 1);
    for j in 0..emb.len() {
        out.push(scale * dot(v, emb.row(j)) / nv);
    }
    out.push(scale * dot(v, u_hat) / nv);
    out
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn fill_normal(v: &mut [f64], std: f64, rng: &mut impl Rng) {
    let n = Normal::new(0.0, std).expect("finite std");
    for x in v {
        *x = n.sample(rng);
    }
}

/// Anchors ordered by `(cell row, cell column, size)`.
pub fn make_anchors(feat_hw: usize, sizes: &[f64]) -> Vec<BBox> {
    let mut out = Vec::with_capacity(feat_hw * feat_hw * sizes.len());
    for y in 0..feat_hw {
        for x in 0..feat_hw {
            let cx = (x as f64 + 0.5) * STRIDE as f64;
            let cy = (y as f64 + 0.5) * STRIDE as f64;
            for &s in sizes {
                out.push(BBox { x1: cx - 0.5 * s, y1: cy - 0.5 * s, x2: cx + 0.5 * s, y2: cy + 0.5 * s });
            }
        }
    }
    out
}

pub fn predict_probs(scores: &[f64]) -> Vec<f64> {
    softmax(scores)
}

pub(crate) fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let s = serde_json::to_string(value).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub(crate) fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))
}
