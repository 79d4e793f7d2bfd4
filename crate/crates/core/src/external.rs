//! Frozen crop classifier that labels selected boxes over the full
//! vocabulary, base and novel alike.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::augment::BoxTransform;
use crate::dataset::HiddenGt;
use crate::error::{Error, Result};
use crate::geometry::{crop, iou, Annotation, BBox, Provenance};
use crate::nn::{cross_entropy, relu_backward, relu_inplace, softmax, Conv2d, ConvCache, Linear, ParamLayout, ParamVec, Sgd};
use crate::rng::{derive_seed, stream_rng, streams};
use crate::synth::{CropCorpus, CropSample, CROP_EXPAND};
use crate::tensor::Tensor3;
use crate::vocab::EmbeddingTable;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    #[serde(rename = "bbox")]
    pub bbox: BBox,
    pub category: usize,
    pub prob: f64,
}

impl PseudoLabel {
    pub fn to_annotation(&self) -> Annotation {
        Annotation::pseudo(self.bbox, self.category, self.prob, Provenance::ExternalPseudo)
    }

    /// Same label in another frame.
    pub fn mapped(&self, t: &BoxTransform) -> PseudoLabel {
        PseudoLabel { bbox: t.apply(&self.bbox), ..*self }
    }
}

/// Three stride-2 convolutions and a linear projection to the embedding
/// width.
#[derive(Clone, Debug)]
pub struct CropEncoder {
    pub crop_size: usize,
    pub embed_dim: usize,
    layout: ParamLayout,
    convs: Vec<Conv2d>,
    proj: Linear,
    flat: usize,
}

const ENCODER_CHANNELS: [usize; 3] = [16, 32, 32];

struct EncoderCache {
    convs: Vec<(ConvCache, Tensor3)>,
    v: Vec<f64>,
}

impl CropEncoder {
    pub fn new(crop_size: usize, embed_dim: usize) -> Result<Self> {
        if crop_size < 8 || embed_dim == 0 {
            return Err(Error::Config("crop encoder needs crop_size >= 8 and a positive width".into()));
        }
        let mut layout = ParamLayout::new();
        let mut convs = Vec::new();
        let mut c = 3;
        let mut hw = crop_size;
        for (i, &o) in ENCODER_CHANNELS.iter().enumerate() {
            let conv = Conv2d::new(&mut layout, &format!("encoder.conv{}", i + 1), c, o, 3, 2, 1);
            hw = conv.out_hw(hw, hw).0;
            convs.push(conv);
            c = o;
        }
        let flat = c * hw * hw;
        let proj = Linear::new(&mut layout, "encoder.proj", flat, embed_dim);
        Ok(Self { crop_size, embed_dim, layout, convs, proj, flat })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn init_params(&self, rng: &mut impl Rng) -> ParamVec {
        let mut p = ParamVec::zeros(self.layout.clone());
        for c in &self.convs {
            c.init(&mut p.values, rng);
        }
        self.proj.init(&mut p.values, rng);
        p
    }

    fn forward(&self, p: &[f64], x: &Tensor3) -> EncoderCache {
        let mut h = x.clone();
        let mut convs = Vec::with_capacity(self.convs.len());
        for c in &self.convs {
            let (mut y, cache) = c.forward(p, &h);
            relu_inplace(&mut y.data);
            convs.push((cache, y.clone()));
            h = y;
        }
        let v = self.proj.forward(p, &h.data, 1);
        EncoderCache { convs, v }
    }

    pub fn embed(&self, p: &ParamVec, x: &Tensor3) -> Vec<f64> {
        self.forward(&p.values, x).v
    }

    fn backward(&self, p: &[f64], cache: &EncoderCache, dv: &[f64], grads: &mut [f64]) {
        let last = &cache.convs.last().expect("convs").1;
        let dflat = self.proj.backward(p, &last.data, dv, 1, grads, true).expect("input grad");
        let mut dy = Tensor3::from_vec(last.c, last.h, last.w, dflat);
        debug_assert_eq!(dy.data.len(), self.flat);
        for (i, c) in self.convs.iter().enumerate().rev() {
            relu_backward(&cache.convs[i].1.data, &mut dy.data);
            match c.backward(p, &cache.convs[i].0, &dy, grads, i > 0) {
                Some(dx) => dy = dx,
                None => break,
            }
        }
    }
}

/// `scale · cos(v, t_j)` for every prototype and the gradient map back to
/// `v` given upstream score gradients.
fn cosine_scores(v: &[f64], emb: &EmbeddingTable, scale: f64) -> (Vec<f64>, f64) {
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let s = (0..emb.len()).map(|j| scale * emb.row(j).iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / nv).collect();
    (s, nv)
}

fn cosine_backward(v: &[f64], nv: f64, emb: &EmbeddingTable, scale: f64, ds: &[f64]) -> Vec<f64> {
    let mut dvh = vec![0.0; v.len()];
    for (j, d) in ds.iter().enumerate() {
        for (a, t) in dvh.iter_mut().zip(emb.row(j)) {
            *a += d * scale * t;
        }
    }
    let dot: f64 = dvh.iter().zip(v).map(|(a, b)| a * b / nv).sum();
    dvh.iter().zip(v).map(|(a, x)| (a - x / nv * dot) / nv).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub inv_temperature: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 30, batch: 16, lr: 0.02, momentum: 0.9, weight_decay: 1e-4, inv_temperature: 10.0, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub heldout_accuracy: f64,
}

/// Heldout top-1 accuracy of the encoder against `emb`.
pub fn crop_accuracy(enc: &CropEncoder, p: &ParamVec, emb: &EmbeddingTable, samples: &[CropSample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let hits = samples
        .iter()
        .filter(|s| {
            let (scores, _) = cosine_scores(&enc.embed(p, &s.pixels), emb, 1.0);
            argmax(&scores) == s.category
        })
        .count();
    hits as f64 / samples.len() as f64
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn hflip(x: &Tensor3) -> Tensor3 {
    let mut out = x.clone();
    for c in 0..x.c {
        for y in 0..x.h {
            for i in 0..x.w {
                out.set(c, y, i, x.get(c, y, x.w - 1 - i));
            }
        }
    }
    out
}

/// Align crop embeddings with their category prototype under a fixed-scale
/// cosine softmax.
pub fn pretrain_encoder(
    enc: &CropEncoder,
    emb: &EmbeddingTable,
    corpus: &CropCorpus,
    cfg: &PretrainConfig,
) -> Result<(ParamVec, Vec<EpochLog>)> {
    if corpus.train.is_empty() {
        return Err(Error::EmptyInput("crop corpus"));
    }
    if emb.dim() != enc.embed_dim {
        return Err(Error::ShapeMismatch { expected: enc.embed_dim, actual: emb.dim() });
    }
    let mut rng = stream_rng(cfg.seed, streams::PRETRAIN, 0);
    let mut p = enc.init_params(&mut rng);
    let mut opt = Sgd::new(p.values.len(), cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut order: Vec<usize> = (0..corpus.train.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let mut g = vec![0.0; p.values.len()];
            let w = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let s = &corpus.train[i];
                let x = if rng.gen_bool(0.5) { hflip(&s.pixels) } else { s.pixels.clone() };
                let cache = enc.forward(&p.values, &x);
                let (scores, nv) = cosine_scores(&cache.v, emb, cfg.inv_temperature);
                let mut ds = vec![0.0; scores.len()];
                total += w * cross_entropy(&scores, s.category, w, &mut ds);
                let dv = cosine_backward(&cache.v, nv, emb, cfg.inv_temperature, &ds);
                enc.backward(&p.values, &cache, &dv, &mut g);
            }
            Sgd::clip_grad_norm(&mut g, 10.0);
            opt.step(&mut p.values, &g);
        }
        let n_batches = order.len().div_ceil(cfg.batch) as f64;
        logs.push(EpochLog { epoch, loss: total / n_batches, heldout_accuracy: crop_accuracy(enc, &p, emb, &corpus.heldout) });
    }
    Ok((p, logs))
}

/// Source of category labels for selected boxes.
pub trait CategoryTeacher {
    /// Labels for `candidates` on the image `image_id`, keeping those with
    /// probability at least `p0`.
    fn label(&self, image_id: &str, pixels: &Tensor3, candidates: &[BBox]) -> Vec<PseudoLabel>;
}

#[derive(Clone, Debug)]
pub struct ExternalTeacher {
    encoder: CropEncoder,
    params: ParamVec,
    embeddings: EmbeddingTable,
    pub p0: f64,
    inv_temperature: f64,
    expand: f64,
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    crop_size: usize,
    embed_dim: usize,
    p0: f64,
    inv_temperature: f64,
    expand: f64,
    params: ParamVec,
    embeddings: EmbeddingTable,
}

impl ExternalTeacher {
    pub fn new(encoder: CropEncoder, params: ParamVec, embeddings: EmbeddingTable, p0: f64, inv_temperature: f64) -> Result<Self> {
        if !(p0 > 0.0 && p0 < 1.0) {
            return Err(Error::Config(format!("p0 {p0} outside (0, 1)")));
        }
        if params.layout != *encoder.layout() {
            return Err(Error::Config("encoder parameters do not match the encoder layout".into()));
        }
        if embeddings.dim() != encoder.embed_dim {
            return Err(Error::ShapeMismatch { expected: encoder.embed_dim, actual: embeddings.dim() });
        }
        Ok(Self { encoder, params, embeddings, p0, inv_temperature, expand: CROP_EXPAND })
    }

    pub fn params(&self) -> &ParamVec {
        &self.params
    }

    pub fn crop_size(&self) -> usize {
        self.encoder.crop_size
    }

    /// Softmax over the vocabulary of temperature-scaled cosine scores.
    pub fn classify_crops(&self, crops: &[Tensor3]) -> Result<Vec<Vec<f64>>> {
        if crops.is_empty() {
            return Err(Error::EmptyInput("crops"));
        }
        Ok(crops.iter().map(|c| self.classify_embedding(&self.encoder.embed(&self.params, c))).collect())
    }

    pub fn classify_embedding(&self, v: &[f64]) -> Vec<f64> {
        softmax(&cosine_scores(v, &self.embeddings, self.inv_temperature).0)
    }

    pub fn make_pseudo_labels(&self, pixels: &Tensor3, candidates: &[BBox]) -> Vec<PseudoLabel> {
        let mut kept = Vec::new();
        let mut crops = Vec::new();
        for b in candidates {
            if let Ok(c) = crop(pixels, b, self.expand, self.encoder.crop_size) {
                kept.push(*b);
                crops.push(c);
            }
        }
        if crops.is_empty() {
            return Vec::new();
        }
        let probs = self.classify_crops(&crops).expect("non-empty");
        kept.into_iter()
            .zip(probs)
            .filter_map(|(bbox, p)| {
                let c = argmax(&p);
                (p[c] >= self.p0).then_some(PseudoLabel { bbox, category: c, prob: p[c] })
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let snap = Snapshot {
            crop_size: self.encoder.crop_size,
            embed_dim: self.encoder.embed_dim,
            p0: self.p0,
            inv_temperature: self.inv_temperature,
            expand: self.expand,
            params: self.params.clone(),
            embeddings: self.embeddings.clone(),
        };
        let s = serde_json::to_string(&snap).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let s: Snapshot = serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))?;
        let mut t = Self::new(CropEncoder::new(s.crop_size, s.embed_dim)?, s.params, s.embeddings, s.p0, s.inv_temperature)?;
        t.expand = s.expand;
        Ok(t)
    }
}

impl CategoryTeacher for ExternalTeacher {
    fn label(&self, _image_id: &str, pixels: &Tensor3, candidates: &[BBox]) -> Vec<PseudoLabel> {
        self.make_pseudo_labels(pixels, candidates)
    }
}

/// Ground-truth lookup with label noise: a candidate overlapping a hidden
/// object at IoU ≥ `min_iou` gets that object's class (replaced by a
/// uniformly drawn other class with probability `noise`); others get
/// nothing. Candidates must be in original image coordinates.
#[derive(Clone, Debug)]
pub struct OracleTeacher {
    pub gt: HiddenGt,
    pub n_classes: usize,
    pub noise: f64,
    pub min_iou: f64,
    pub seed: u64,
}

impl CategoryTeacher for OracleTeacher {
    fn label(&self, image_id: &str, _pixels: &Tensor3, candidates: &[BBox]) -> Vec<PseudoLabel> {
        let Some(gts) = self.gt.get(image_id) else { return Vec::new() };
        let key = image_id.bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64));
        candidates
            .iter()
            .filter_map(|b| {
                let best = gts.iter().map(|g| (iou(b, &g.bbox), g.category)).max_by(|x, y| x.0.total_cmp(&y.0))?;
                if best.0 < self.min_iou {
                    return None;
                }
                let bits = b.coords().iter().fold(key, |h, v| h ^ v.to_bits().rotate_left(17));
                let mut rng = crate::rng::Rng::seed_from_u64(derive_seed(self.seed, streams::ORACLE_NOISE, bits));
                let mut c = best.1;
                if self.n_classes > 1 && rng.gen_bool(self.noise) {
                    let other = rng.gen_range(0..self.n_classes - 1);
                    c = if other >= c { other + 1 } else { other };
                }
                Some(PseudoLabel { bbox: *b, category: c, prob: 1.0 })
            })
            .collect()
    }
}
