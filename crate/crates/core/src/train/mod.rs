//! Student training with three data flows: labeled images, teacher-labeled
//! unlabeled images and replayed queue entries.

pub mod plans;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::augment::{strong_augment, weak_augment, AugmentConfig, BoxTransform};
use crate::dataset::{Dataset, HiddenGt, ImageRecord};
use crate::detector::{Detector, DetectorConfig, DetectorParams, ImageTargets, LossParts, SamplingConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig, EvalResult};
use crate::external::{CategoryTeacher, PseudoLabel};
use crate::geometry::{iou, BBox};
use crate::nn::Sgd;
use crate::queue::{LabelQueue, QueueStats};
use crate::rng::{stream_rng, streams, Rng};
use crate::teacher::{
    box_jitter_variance, pseudo_labels_on, regression_jitter_variance, BoxRefiner, BoxSelectionConfig, EmaState, HeadRefiner,
};
use crate::tensor::Tensor3;
use crate::vocab::EmbeddingTable;

pub use plans::{FlowCounts, HasTargets};
use plans::{normalise_queue, normalise_supervised, normalise_unsupervised, queue_plan, supervised_plan, to_view, unsupervised_plan};

/// Which flows feed the student.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlowMode {
    #[serde(rename = "s")]
    Supervised,
    #[serde(rename = "s+lt")]
    LocalizationTeacher,
    #[serde(rename = "s+lt+et")]
    Hybrid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalModel {
    Student,
    Teacher,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: FlowMode,
    pub ema_momentum: f64,
    pub loss_weight_u: f64,
    pub loss_weight_d: f64,
    pub lr: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_queue: usize,
    pub burn_in_iters: usize,
    pub total_iters: usize,
    pub p0: f64,
    /// Keep queue storage; off feeds the current batch's external labels
    /// straight into the queue flow. With `dynamic` also off, those labels
    /// come from boxes the warm-up teacher selects.
    pub queue: bool,
    /// Keep pushing during training; off freezes the queue after warm-up.
    pub dynamic: bool,
    pub seed: u64,
    pub log_every: usize,
    pub eval_every: usize,
    pub eval_model: EvalModel,
    /// Record teacher candidates against hidden ground truth every this
    /// many iterations (0 disables).
    pub candidate_log_every: usize,
    /// Selected boxes also count as RPN positives on unlabeled images.
    pub rpn_selected: bool,
    /// Queue images also train unlabeled regions as background.
    pub queue_background: bool,
    pub box_selection: BoxSelectionConfig,
    pub sampling: SamplingConfig,
    pub weak: AugmentConfig,
    pub strong: AugmentConfig,
    pub eval: EvalConfig,
    pub detector: DetectorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: FlowMode::Hybrid,
            ema_momentum: 0.999,
            loss_weight_u: 1.0,
            loss_weight_d: 1.0,
            lr: 0.01,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            grad_clip: Some(20.0),
            n_labeled: 4,
            n_unlabeled: 4,
            n_queue: 2,
            burn_in_iters: 2000,
            total_iters: 2000,
            p0: 0.8,
            queue: true,
            dynamic: true,
            seed: 0,
            log_every: 10,
            eval_every: 500,
            eval_model: EvalModel::Teacher,
            candidate_log_every: 0,
            rpn_selected: true,
            queue_background: false,
            box_selection: BoxSelectionConfig::default(),
            sampling: SamplingConfig::default(),
            weak: AugmentConfig { color_jitter: 0.0, blur_prob: 0.0, cutout_prob: 0.0, ..AugmentConfig::default() },
            strong: AugmentConfig::default(),
            eval: EvalConfig::default(),
            detector: DetectorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.ema_momentum) {
            return Err(Error::Config(format!("ema_momentum {} outside [0, 1)", self.ema_momentum)));
        }
        if self.loss_weight_u < 0.0 || self.loss_weight_d < 0.0 || self.lr <= 0.0 {
            return Err(Error::Config("loss weights must be non-negative and lr positive".into()));
        }
        if self.n_labeled == 0 {
            return Err(Error::Config("n_labeled must be positive".into()));
        }
        if !(self.p0 > 0.0 && self.p0 < 1.0) {
            return Err(Error::Config(format!("p0 {} outside (0, 1)", self.p0)));
        }
        self.box_selection.validate()?;
        self.detector.validate()
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_s: f64,
    pub l_u_cls: f64,
    pub l_u_reg: f64,
    pub l_d: f64,
    pub total: f64,
    /// Gradient norm before clipping.
    #[serde(default)]
    pub grad_norm: f64,
    pub counts_s: FlowCounts,
    pub counts_u: FlowCounts,
    pub counts_d: FlowCounts,
}

impl LossReport {
    pub fn combine(&mut self, cfg: &TrainConfig) {
        self.total = self.l_s + cfg.loss_weight_u * (self.l_u_cls + self.l_u_reg) + cfg.loss_weight_d * self.l_d;
    }
}

/// Everything the loss of one flow needs for one image.
#[derive(Clone, Debug)]
pub struct FlowImage {
    pub view: Tensor3,
    pub targets: ImageTargets,
}

impl HasTargets for FlowImage {
    fn targets(&self) -> &ImageTargets {
        &self.targets
    }
    fn targets_mut(&mut self) -> &mut ImageTargets {
        &mut self.targets
    }
}

/// Sum of per-image losses of one flow; gradients scaled by `weight` are
/// accumulated when `grads` is given and the weight is non-zero.
pub fn flow_loss(det: &Detector, p: &DetectorParams, images: &[FlowImage], emb: &EmbeddingTable, weight: f64, mut grads: Option<&mut [f64]>) -> LossParts {
    let mut parts = LossParts::default();
    for im in images {
        let g = if weight != 0.0 { grads.as_deref_mut() } else { None };
        parts += det.loss(p, &im.view, &im.targets, emb, weight, g);
    }
    parts
}

/// Planned batches of one training step.
#[derive(Clone, Debug, Default)]
pub struct StepBatches {
    pub labeled: Vec<FlowImage>,
    pub unlabeled: Vec<FlowImage>,
    pub queue: Vec<FlowImage>,
    pub counts: [FlowCounts; 3],
    /// External labels of this step's unlabeled images, original frame.
    pub emissions: Vec<(String, Vec<PseudoLabel>)>,
}

/// Loss of planned batches and, with `grads`, its gradient.
pub fn composite_loss(det: &Detector, p: &DetectorParams, b: &StepBatches, emb: &EmbeddingTable, cfg: &TrainConfig, mut grads: Option<&mut [f64]>) -> LossReport {
    let s = flow_loss(det, p, &b.labeled, emb, 1.0, grads.as_deref_mut());
    let u = flow_loss(det, p, &b.unlabeled, emb, cfg.loss_weight_u, grads.as_deref_mut());
    let d = flow_loss(det, p, &b.queue, emb, cfg.loss_weight_d, grads);
    let mut r = LossReport {
        l_s: s.total(),
        l_u_cls: u.cls,
        l_u_reg: u.reg,
        l_d: d.total(),
        counts_s: b.counts[0],
        counts_u: b.counts[1],
        counts_d: b.counts[2],
        ..Default::default()
    };
    r.combine(cfg);
    r
}

/// Teacher candidate with its localization statistics and realised
/// quality against hidden ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub iteration: usize,
    pub image_id: String,
    pub objectness: f64,
    pub bjv: f64,
    pub rjv: f64,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricRecord {
    Train {
        iteration: usize,
        phase: String,
        #[serde(flatten)]
        loss: LossReport,
        queue_size: usize,
    },
    Eval {
        iteration: usize,
        model: EvalModel,
        #[serde(flatten)]
        result: EvalResult,
    },
    QueueFill {
        processed: usize,
        #[serde(flatten)]
        stats: QueueStats,
    },
}

/// Inputs shared by every stage.
#[derive(Clone, Copy)]
pub struct TrainData<'a> {
    pub labeled: &'a Dataset,
    pub unlabeled: &'a Dataset,
    pub test: &'a Dataset,
    pub emb: &'a EmbeddingTable,
    pub vocab: &'a crate::vocab::Vocabulary,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub student: DetectorParams,
    pub opt: Sgd,
    pub ema: Option<EmaState>,
    pub queue: LabelQueue,
    /// Steps taken so far, burn-in included.
    pub iteration: usize,
    /// Teacher as of warm-up. Selects external candidates when neither the
    /// queue nor dynamic updating is on.
    pub frozen: Option<DetectorParams>,
}

pub struct Trainer<'a> {
    pub det: Detector,
    pub cfg: TrainConfig,
    pub data: TrainData<'a>,
    pub external: Option<&'a dyn CategoryTeacher>,
    unlabeled_index: BTreeMap<String, usize>,
}

fn gts_of(r: &ImageRecord) -> Vec<(BBox, usize)> {
    r.annotations.iter().map(|a| (a.bbox, a.category)).collect()
}

fn draw(n: usize, len: usize, rng: &mut Rng) -> Vec<usize> {
    use rand::Rng as _;
    if len == 0 {
        return Vec::new();
    }
    (0..n).map(|_| rng.gen_range(0..len)).collect()
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, data: TrainData<'a>, external: Option<&'a dyn CategoryTeacher>) -> Result<Self> {
        cfg.validate()?;
        if data.labeled.is_empty() {
            return Err(Error::EmptyInput("labeled set"));
        }
        if cfg.mode == FlowMode::Hybrid && external.is_none() {
            return Err(Error::Config("the hybrid flow needs an external teacher".into()));
        }
        let det = Detector::new(cfg.detector.clone())?;
        if data.emb.dim() != cfg.detector.embed_dim {
            return Err(Error::ShapeMismatch { expected: cfg.detector.embed_dim, actual: data.emb.dim() });
        }
        let unlabeled_index = data.unlabeled.index();
        Ok(Self { det, cfg, data, external, unlabeled_index })
    }

    pub fn init_state(&self) -> TrainState {
        let mut rng = stream_rng(self.cfg.seed, streams::INIT, 0);
        let student = self.det.init_params(&mut rng);
        let opt = Sgd::new(student.values.len(), self.cfg.lr, self.cfg.sgd_momentum, self.cfg.weight_decay);
        TrainState { student, opt, ema: None, queue: LabelQueue::new(), iteration: 0, frozen: None }
    }

    fn size(&self) -> f64 {
        self.cfg.detector.image_size as f64
    }

    fn student_proposals(&self, p: &DetectorParams, view: &Tensor3) -> Vec<BBox> {
        self.det.forward_rpn(p, view).into_iter().map(|q| q.bbox).collect()
    }

    fn labeled_flow(&self, state: &TrainState, rng: &mut Rng) -> Vec<FlowImage> {
        let min = self.cfg.detector.min_box_size;
        draw(self.cfg.n_labeled, self.data.labeled.len(), rng)
            .into_iter()
            .map(|i| {
                let r = &self.data.labeled.records[i];
                let (view, t) = weak_augment(&r.pixels, &self.cfg.weak, rng);
                let gts = to_view(&gts_of(r), &t, self.size(), min);
                let props = self.student_proposals(&state.student, &view);
                let targets = supervised_plan(&self.det, &props, &gts, self.data.emb.len(), &self.cfg.sampling, rng);
                FlowImage { view, targets }
            })
            .collect()
    }

    fn external_labels(&self, r: &ImageRecord, candidates: &[BBox], weak: &BoxTransform) -> Vec<PseudoLabel> {
        let Some(ext) = self.external else { return Vec::new() };
        let inv = weak.inverse();
        let orig: Vec<BBox> = candidates.iter().filter_map(|b| inv.apply(b).clip(self.size(), self.size())).collect();
        if orig.is_empty() {
            return Vec::new();
        }
        ext.label(&r.image_id, &r.pixels, &orig)
    }

    /// Teacher pass, consistency targets and external emissions for the
    /// unlabeled batch.
    fn unlabeled_flow(
        &self,
        state: &TrainState,
        rng: &mut Rng,
        jitter_rng: &mut Rng,
        want_emissions: bool,
        log: Option<(&HiddenGt, &mut Vec<CandidateRecord>)>,
    ) -> (Vec<FlowImage>, Vec<(String, Vec<PseudoLabel>)>, Vec<(usize, Tensor3, BoxTransform)>) {
        let teacher = &state.ema.as_ref().expect("teacher exists after burn-in").teacher;
        let min = self.cfg.detector.min_box_size;
        let mut flow = Vec::new();
        let mut emissions = Vec::new();
        let mut strong_views = Vec::new();
        let mut log = log;
        for i in draw(self.cfg.n_unlabeled, self.data.unlabeled.len(), rng) {
            let r = &self.data.unlabeled.records[i];
            let (weak, tw) = weak_augment(&r.pixels, &self.cfg.weak, rng);
            let (strong, ts) = strong_augment(&r.pixels, &self.cfg.strong, rng);
            let w2s = ts.compose(&tw.inverse());
            let (fmap, _) = self.det.backbone(&teacher.values, &weak);
            let proposals = self.det.proposals_from(&self.det.rpn(teacher, &fmap));
            if let Some((gt, records)) = log.as_mut() {
                records.extend(self.candidate_records(teacher, &fmap, &proposals, r, &tw, gt, state.iteration, jitter_rng));
            }
            let out = pseudo_labels_on(&self.det, teacher, &fmap, proposals, self.data.emb, &self.cfg.box_selection, jitter_rng);
            let targets: Vec<(BBox, usize)> = out.student_targets.iter().map(|a| (a.bbox, a.category)).collect();
            let targets = to_view(&targets, &w2s, self.size(), min);
            let selected: Vec<BBox> = to_view(&out.external_candidates.iter().map(|c| (c.refined, 0)).collect::<Vec<_>>(), &w2s, self.size(), min)
                .into_iter()
                .map(|x| x.0)
                .collect();
            let props = self.student_proposals(&state.student, &strong);
            let plan = unsupervised_plan(
                &self.det,
                teacher,
                &fmap,
                &w2s.inverse(),
                &props,
                &targets,
                &selected,
                self.cfg.rpn_selected,
                self.data.emb,
                &self.cfg.sampling,
                rng,
            );
            if want_emissions {
                let cands: Vec<BBox> = match state.frozen.as_ref() {
                    Some(f) => {
                        let (fm, _) = self.det.backbone(&f.values, &weak);
                        let props = self.det.proposals_from(&self.det.rpn(f, &fm));
                        pseudo_labels_on(&self.det, f, &fm, props, self.data.emb, &self.cfg.box_selection, jitter_rng).external_candidates
                    }
                    None => out.external_candidates,
                }
                .iter()
                .map(|c| c.refined)
                .collect();
                let labels = self.external_labels(r, &cands, &tw);
                if !labels.is_empty() {
                    emissions.push((r.image_id.clone(), labels));
                }
            }
            strong_views.push((i, strong.clone(), ts));
            flow.push(FlowImage { view: strong, targets: plan });
        }
        (flow, emissions, strong_views)
    }

    #[allow(clippy::too_many_arguments)]
    fn candidate_records(
        &self,
        teacher: &DetectorParams,
        fmap: &Tensor3,
        proposals: &[crate::detector::Proposal],
        r: &ImageRecord,
        tw: &BoxTransform,
        gt: &HiddenGt,
        iteration: usize,
        rng: &mut Rng,
    ) -> Vec<CandidateRecord> {
        let Some(objects) = gt.get(&r.image_id) else { return Vec::new() };
        let objects: Vec<BBox> = objects.iter().map(|a| tw.apply(&a.bbox)).collect();
        let refiner = HeadRefiner { det: &self.det, params: teacher, fmap };
        let bs = &self.cfg.box_selection;
        proposals
            .iter()
            .filter(|p| p.objectness >= bs.min_objectness)
            .map(|p| {
                let refined = refiner.refine(&[p.bbox])[0];
                CandidateRecord {
                    iteration,
                    image_id: r.image_id.clone(),
                    objectness: p.objectness,
                    bjv: box_jitter_variance(&refiner, &p.bbox, bs, rng),
                    rjv: regression_jitter_variance(&refiner, &p.bbox, bs),
                    iou: objects.iter().map(|g| iou(&refined, g)).fold(0.0, f64::max),
                }
            })
            .collect()
    }

    fn queue_image(&self, state: &TrainState, view: Tensor3, labels: &[(BBox, usize)], rng: &mut Rng) -> FlowImage {
        let props = self.student_proposals(&state.student, &view);
        FlowImage { targets: queue_plan(&props, labels, self.data.emb.len(), self.cfg.queue_background, &self.cfg.sampling, rng), view }
    }

    /// Build every flow of step `state.iteration`. Each flow draws from its
    /// own stream, so switching one flow off never perturbs the others.
    pub fn plan_step(&self, state: &TrainState, burn_in: bool, log: Option<(&HiddenGt, &mut Vec<CandidateRecord>)>) -> StepBatches {
        let t = state.iteration as u64;
        let seed = self.cfg.seed;
        let n_classes = self.data.emb.len();
        let min = self.cfg.detector.min_box_size;
        let mut b = StepBatches { labeled: self.labeled_flow(state, &mut stream_rng(seed, streams::BATCH, 3 * t)), ..Default::default() };
        b.counts[0] = normalise_supervised(&mut b.labeled, n_classes);
        if burn_in || self.cfg.mode == FlowMode::Supervised {
            return b;
        }
        let hybrid = self.cfg.mode == FlowMode::Hybrid;
        let transient = hybrid && !self.cfg.queue;
        let want_emissions = hybrid && (transient || self.cfg.dynamic);
        let mut urng = stream_rng(seed, streams::BATCH, 3 * t + 1);
        let mut jrng = stream_rng(seed, streams::JITTER, t);
        let (unl, emissions, strong_views) = self.unlabeled_flow(state, &mut urng, &mut jrng, want_emissions, log);
        b.unlabeled = unl;
        b.counts[1] = normalise_unsupervised(&mut b.unlabeled, n_classes);
        if hybrid {
            let mut qrng = stream_rng(seed, streams::QUEUE, t);
            if transient {
                for (i, view, ts) in strong_views {
                    if b.queue.len() >= self.cfg.n_queue {
                        break;
                    }
                    let id = &self.data.unlabeled.records[i].image_id;
                    if let Some((_, labels)) = emissions.iter().find(|(e, _)| e == id) {
                        let l = to_view(&labels.iter().map(|x| (x.bbox, x.category)).collect::<Vec<_>>(), &ts, self.size(), min);
                        if !l.is_empty() {
                            let img = self.queue_image(state, view, &l, &mut qrng);
                            b.queue.push(img);
                        }
                    }
                }
            } else {
                let entries: Vec<(String, Vec<(BBox, usize)>)> = state
                    .queue
                    .sample(self.cfg.n_queue, &mut qrng)
                    .into_iter()
                    .map(|e| (e.image_id.clone(), e.labels.iter().map(|x| (x.bbox, x.category)).collect()))
                    .collect();
                for (id, labels) in entries {
                    let r = &self.data.unlabeled.records[self.unlabeled_index[&id]];
                    let (view, ts) = strong_augment(&r.pixels, &self.cfg.strong, &mut qrng);
                    let l = to_view(&labels, &ts, self.size(), min);
                    let img = self.queue_image(state, view, &l, &mut qrng);
                    b.queue.push(img);
                }
            }
            b.counts[2] = normalise_queue(&mut b.queue, n_classes);
            if !transient {
                b.emissions = emissions;
            }
        }
        b
    }

    /// One optimisation step: loss, SGD, EMA, then queue pushes.
    pub fn step(&self, state: &mut TrainState, burn_in: bool, log: Option<(&HiddenGt, &mut Vec<CandidateRecord>)>) -> Result<LossReport> {
        let batches = self.plan_step(state, burn_in, log);
        let mut grads = vec![0.0; state.student.values.len()];
        let mut report = composite_loss(&self.det, &state.student, &batches, self.data.emb, &self.cfg, Some(&mut grads));
        report.grad_norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !report.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { iteration: state.iteration, detail: format!("{report:?}") });
        }
        if let Some(c) = self.cfg.grad_clip {
            Sgd::clip_grad_norm(&mut grads, c);
        }
        state.opt.step(&mut state.student.values, &grads);
        if let Some(ema) = state.ema.as_mut() {
            if !burn_in {
                ema.update(&state.student)?;
            }
        }
        if self.cfg.queue && self.cfg.dynamic {
            for (id, labels) in batches.emissions {
                state.queue.push(&id, labels)?;
            }
        }
        state.iteration += 1;
        Ok(report)
    }

    /// Supervised steps, then the teacher becomes an exact copy.
    pub fn burn_in(&self, state: &mut TrainState, iters: usize, sink: &mut dyn FnMut(MetricRecord)) -> Result<()> {
        for _ in 0..iters {
            let r = self.step(state, true, None)?;
            if self.cfg.log_every > 0 && state.iteration.is_multiple_of(self.cfg.log_every) {
                sink(MetricRecord::Train { iteration: state.iteration, phase: "burn_in".into(), loss: r, queue_size: 0 });
            }
        }
        state.ema = Some(EmaState::new(state.student.clone(), self.cfg.ema_momentum)?);
        Ok(())
    }

    /// One pass of the teachers over the unlabeled set.
    pub fn warmup_fill(&self, state: &mut TrainState) -> Result<usize> {
        let teacher = &state.ema.as_ref().expect("teacher exists after burn-in").teacher;
        let mut processed = 0;
        for (i, r) in self.data.unlabeled.records.iter().enumerate() {
            let mut rng = stream_rng(self.cfg.seed, streams::JITTER, u64::MAX - i as u64);
            let (fmap, _) = self.det.backbone(&teacher.values, &r.pixels);
            let proposals = self.det.proposals_from(&self.det.rpn(teacher, &fmap));
            let out = pseudo_labels_on(&self.det, teacher, &fmap, proposals, self.data.emb, &self.cfg.box_selection, &mut rng);
            let cands: Vec<BBox> = out.external_candidates.iter().map(|c| c.refined).collect();
            let labels = self.external_labels(r, &cands, &BoxTransform::IDENTITY);
            if !labels.is_empty() {
                state.queue.push(&r.image_id, labels)?;
            }
            processed += 1;
        }
        Ok(processed)
    }

    pub fn evaluate(&self, state: &TrainState, model: EvalModel) -> Result<EvalResult> {
        let p = match (model, state.ema.as_ref()) {
            (EvalModel::Teacher, Some(e)) => &e.teacher,
            _ => &state.student,
        };
        evaluate(&self.det, p, self.data.test, self.data.emb, self.data.vocab, &self.cfg.eval)
    }

    /// Main phase after burn-in: warm-up fill (hybrid with storage), then
    /// `total_iters` steps with periodic evaluation.
    pub fn run_main(&self, state: &mut TrainState, analysis: Option<&HiddenGt>, sink: &mut dyn FnMut(MetricRecord)) -> Result<Vec<CandidateRecord>> {
        if state.ema.is_none() {
            state.ema = Some(EmaState::new(state.student.clone(), self.cfg.ema_momentum)?);
        }
        if self.cfg.mode == FlowMode::Hybrid && self.cfg.queue {
            let processed = self.warmup_fill(state)?;
            sink(MetricRecord::QueueFill { processed, stats: state.queue.stats() });
        }
        if self.cfg.mode == FlowMode::Hybrid && !self.cfg.queue && !self.cfg.dynamic {
            state.frozen = state.ema.as_ref().map(|e| e.teacher.clone());
        }
        let mut records = Vec::new();
        let start = state.iteration;
        for k in 1..=self.cfg.total_iters {
            let log = match analysis {
                Some(gt) if self.cfg.candidate_log_every > 0 && k % self.cfg.candidate_log_every == 0 => Some((gt, &mut records)),
                _ => None,
            };
            let r = self.step(state, false, log)?;
            if self.cfg.log_every > 0 && k % self.cfg.log_every == 0 {
                sink(MetricRecord::Train { iteration: state.iteration, phase: "main".into(), loss: r, queue_size: state.queue.len() });
            }
            if (self.cfg.eval_every > 0 && k % self.cfg.eval_every == 0) || k == self.cfg.total_iters {
                let result = self.evaluate(state, self.cfg.eval_model)?;
                sink(MetricRecord::Eval { iteration: state.iteration, model: self.cfg.eval_model, result });
            }
        }
        debug_assert_eq!(state.iteration, start + self.cfg.total_iters);
        Ok(records)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub state: TrainState,
    pub metrics: Vec<MetricRecord>,
    pub candidates: Vec<CandidateRecord>,
    pub final_eval: Option<EvalResult>,
}

/// Burn-in, warm-up and main phase from a fresh initialisation.
pub fn run_training(
    cfg: &TrainConfig,
    data: TrainData<'_>,
    external: Option<&dyn CategoryTeacher>,
    analysis: Option<&HiddenGt>,
) -> Result<TrainOutput> {
    let trainer = Trainer::new(cfg.clone(), data, external)?;
    let mut state = trainer.init_state();
    let mut metrics = Vec::new();
    trainer.burn_in(&mut state, cfg.burn_in_iters, &mut |m| metrics.push(m))?;
    let candidates = trainer.run_main(&mut state, analysis, &mut |m| metrics.push(m))?;
    let final_eval = metrics.iter().rev().find_map(|m| match m {
        MetricRecord::Eval { result, .. } => Some(result.clone()),
        _ => None,
    });
    Ok(TrainOutput { state, metrics, candidates, final_eval })
}
