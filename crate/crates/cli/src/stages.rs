use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};

use castdet::dataset::{load_hidden_gt, save_hidden_gt, Dataset, HiddenGt, Split};
use castdet::detector::Detector;
use castdet::eval::{evaluate, EvalResult};
use castdet::external::{pretrain_encoder, CategoryTeacher, CropEncoder, ExternalTeacher, PretrainConfig};
use castdet::synth::{generate_crop_corpus, generate_dataset, SceneConfig};
use castdet::train::{EvalModel, FlowMode, MetricRecord, TrainConfig, TrainData, Trainer};
use castdet::vocab::{EmbeddingTable, HashTextEncoder, Vocabulary};

use crate::rundir::{read_json, read_lines, read_manifest, JsonLines, RunDir};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenDataConfig {
    pub scene: SceneConfig,
    pub embed_dim: usize,
    pub text_seed: u64,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        Self { scene: SceneConfig::default(), embed_dim: 64, text_seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainStageConfig {
    pub pretrain: PretrainConfig,
    /// Confidence threshold stored with the snapshot; `train` replaces it
    /// with its own `p0`.
    pub p0: f64,
}

impl Default for PretrainStageConfig {
    fn default() -> Self {
        Self { pretrain: PretrainConfig::default(), p0: 0.8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Share of the labeled split used, taken from the front.
    pub label_fraction: f64,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { label_fraction: 1.0, train: TrainConfig::default() }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.label_fraction > 0.0 && self.label_fraction <= 1.0, "label_fraction {} outside (0, 1]", self.label_fraction);
        self.train.validate()?;
        Ok(())
    }
}

pub fn load_config<T: Default + for<'de> Deserialize<'de>>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => read_json(p),
        None => Ok(T::default()),
    }
}

/// A generated benchmark read back from disk.
pub struct Benchmark {
    pub labeled: Dataset,
    pub unlabeled: Dataset,
    pub test: Dataset,
    pub hidden: HiddenGt,
    pub vocab: Vocabulary,
    pub emb: EmbeddingTable,
    pub config: GenDataConfig,
}

impl Benchmark {
    pub fn load(dir: &Path) -> Result<Self> {
        let m = read_manifest(dir)?;
        ensure!(m.stage == "gen-data", "{} holds a `{}` run, not generated data", dir.display(), m.stage);
        Ok(Self {
            labeled: Dataset::load(dir, Split::Labeled)?,
            unlabeled: Dataset::load(dir, Split::Unlabeled)?,
            test: Dataset::load(dir, Split::Test)?,
            hidden: load_hidden_gt(&dir.join("hidden_gt.json"))?,
            vocab: Vocabulary::load(&dir.join("vocab.json"))?,
            emb: EmbeddingTable::load(&dir.join("embeddings.json"))?,
            config: read_json(&dir.join("config.json"))?,
        })
    }
}

pub fn gen_data(cfg: &GenDataConfig, out: &Path, overwrite: bool) -> Result<PathBuf> {
    cfg.scene.validate()?;
    let vocab = Vocabulary::shapes();
    let bench = generate_dataset(&cfg.scene, &vocab)?;
    let emb = EmbeddingTable::for_vocabulary(&vocab, &HashTextEncoder::new(cfg.embed_dim, cfg.text_seed));
    let mut run = RunDir::create(out, "gen-data", cfg, overwrite)?;
    run.seed("scene", cfg.scene.seed);
    run.seed("text", cfg.text_seed);
    for d in [&bench.labeled, &bench.unlabeled, &bench.test] {
        d.save(&run.root)?;
        run.artifact(&format!("{}.json", d.split.as_str()));
    }
    run.artifact("images/");
    save_hidden_gt(&bench.hidden_gt, &run.path("hidden_gt.json"))?;
    vocab.save(&run.path("vocab.json"))?;
    emb.save(&run.path("embeddings.json"))?;
    for a in ["hidden_gt.json", "vocab.json", "embeddings.json"] {
        run.artifact(a);
    }
    eprintln!(
        "generated {} labeled, {} unlabeled, {} test images",
        bench.labeled.len(),
        bench.unlabeled.len(),
        bench.test.len()
    );
    run.finish()
}

pub fn pretrain_external(cfg: &PretrainStageConfig, data: &Path, out: &Path, overwrite: bool) -> Result<PathBuf> {
    let gen: GenDataConfig = read_json(&data.join("config.json"))?;
    let vocab = Vocabulary::load(&data.join("vocab.json"))?;
    let emb = EmbeddingTable::load(&data.join("embeddings.json"))?;
    let corpus = generate_crop_corpus(&gen.scene, &vocab)?;
    let enc = CropEncoder::new(gen.scene.crop_size, emb.dim())?;
    let (params, logs) = pretrain_encoder(&enc, &emb, &corpus, &cfg.pretrain)?;
    let teacher = ExternalTeacher::new(enc, params, emb, cfg.p0, cfg.pretrain.inv_temperature)?;

    let mut run = RunDir::create(out, "pretrain-external", cfg, overwrite)?;
    run.seed("pretrain", cfg.pretrain.seed);
    run.seed("crop_corpus", gen.scene.seed);
    run.input("data", data);
    let mut w = JsonLines::create(&run.path("metrics.jsonl"))?;
    for l in &logs {
        w.write(l)?;
    }
    w.finish()?;
    teacher.save(&run.path("external.json"))?;
    run.artifact("metrics.jsonl");
    run.artifact("external.json");
    if let Some(l) = logs.last() {
        eprintln!("held-out crop accuracy {:.3} after {} epochs", l.heldout_accuracy, l.epoch + 1);
    }
    run.finish()
}

/// The snapshot inside a `pretrain-external` run, or a bare snapshot file.
pub fn external_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("external.json")
    } else {
        p.to_path_buf()
    }
}

pub fn load_external(p: &Path, p0: f64) -> Result<ExternalTeacher> {
    let path = external_path(p);
    let mut t = ExternalTeacher::load(&path).with_context(|| format!("loading external teacher {}", path.display()))?;
    t.p0 = p0;
    Ok(t)
}

pub fn train(cfg: &RunConfig, data: &Path, external: Option<&Path>, out: &Path, overwrite: bool) -> Result<PathBuf> {
    cfg.validate()?;
    let bench = Benchmark::load(data)?;
    let teacher = match (cfg.train.mode, external) {
        (_, Some(p)) => Some(load_external(p, cfg.train.p0)?),
        (FlowMode::Hybrid, None) => bail!("mode s+lt+et needs --external <pretrain run or snapshot>"),
        _ => None,
    };
    train_on(cfg, &bench, data, teacher.as_ref(), external, out, overwrite)
}

/// Full training run into `out`. The benchmark and teacher are passed in
/// so ablation grids load them once.
pub fn train_on(
    cfg: &RunConfig,
    bench: &Benchmark,
    data: &Path,
    teacher: Option<&ExternalTeacher>,
    external: Option<&Path>,
    out: &Path,
    overwrite: bool,
) -> Result<PathBuf> {
    cfg.validate()?;
    let labeled = bench.labeled.fraction(cfg.label_fraction);
    let td = TrainData { labeled: &labeled, unlabeled: &bench.unlabeled, test: &bench.test, emb: &bench.emb, vocab: &bench.vocab };
    let ext: Option<&dyn CategoryTeacher> = match cfg.train.mode {
        FlowMode::Hybrid => teacher.map(|t| t as &dyn CategoryTeacher),
        _ => None,
    };
    let trainer = Trainer::new(cfg.train.clone(), td, ext)?;

    let mut run = RunDir::create(out, "train", cfg, overwrite)?;
    run.seed("train", cfg.train.seed);
    run.seed("scene", bench.config.scene.seed);
    run.input("data", data);
    if let Some(p) = external {
        run.input("external", &external_path(p));
    }
    let mut w = JsonLines::create(&run.path("metrics.jsonl"))?;
    let mut err = None;
    let mut sink = |m: MetricRecord| {
        if let MetricRecord::Eval { iteration, result, .. } = &m {
            eprintln!(
                "iter {iteration:>6}  mAP {:5.1}  base {:5.1}  novel {:5.1}  HM {:5.1}  recall base {:5.1} novel {:5.1}",
                result.map, result.map_base, result.map_novel, result.hm, result.mar_base, result.mar_novel
            );
        }
        if let Err(e) = w.write(&m) {
            err.get_or_insert(e);
        }
    };
    let mut state = trainer.init_state();
    trainer.burn_in(&mut state, cfg.train.burn_in_iters, &mut sink)?;
    let candidates = trainer.run_main(&mut state, Some(&bench.hidden), &mut sink)?;
    if let Some(e) = err {
        return Err(e);
    }
    w.finish()?;
    run.artifact("metrics.jsonl");

    if !candidates.is_empty() {
        let mut c = JsonLines::create(&run.path("candidates.jsonl"))?;
        for r in &candidates {
            c.write(r)?;
        }
        c.finish()?;
        run.artifact("candidates.jsonl");
    }
    std::fs::create_dir_all(run.path("ckpt"))?;
    trainer.det.save_params(&state.student, &run.path("ckpt/student.json"))?;
    run.artifact("ckpt/student.json");
    if let Some(ema) = &state.ema {
        trainer.det.save_params(&ema.teacher, &run.path("ckpt/teacher.json"))?;
        run.artifact("ckpt/teacher.json");
    }
    state.queue.save(&run.path("ckpt/queue.json"))?;
    run.artifact("ckpt/queue.json");
    run.finish()
}

fn model_name(m: EvalModel) -> &'static str {
    match m {
        EvalModel::Student => "student",
        EvalModel::Teacher => "teacher",
    }
}

/// Final training-time evaluation recorded in a run's metrics log.
pub fn logged_eval(run: &Path) -> Result<Option<(EvalModel, EvalResult)>> {
    let records: Vec<MetricRecord> = read_lines(&run.join("metrics.jsonl"))?;
    Ok(records.into_iter().rev().find_map(|m| match m {
        MetricRecord::Eval { model, result, .. } => Some((model, result)),
        _ => None,
    }))
}

pub struct EvalOutcome {
    pub model: EvalModel,
    pub result: EvalResult,
    /// Whether the result equals the last logged training-time evaluation
    /// of the same model; `None` when there is none to compare against.
    pub matches_log: Option<bool>,
}

pub fn eval(run: &Path, model: Option<EvalModel>, data: Option<&Path>) -> Result<EvalOutcome> {
    let m = read_manifest(run)?;
    ensure!(m.stage == "train", "{} holds a `{}` run, not a training run", run.display(), m.stage);
    let cfg: RunConfig = read_json(&run.join("config.json"))?;
    let model = model.unwrap_or(cfg.train.eval_model);
    let data_dir = match data {
        Some(d) => d.to_path_buf(),
        None => PathBuf::from(m.inputs.get("data").context("manifest records no data directory; pass --data")?),
    };
    let test = Dataset::load(&data_dir, Split::Test)?;
    let vocab = Vocabulary::load(&data_dir.join("vocab.json"))?;
    let emb = EmbeddingTable::load(&data_dir.join("embeddings.json"))?;
    let det = Detector::new(cfg.train.detector.clone())?;
    let ckpt = run.join(format!("ckpt/{}.json", model_name(model)));
    let params = det.load_params(&ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let result = evaluate(&det, &params, &test, &emb, &vocab, &cfg.train.eval)?;
    let matches_log = logged_eval(run)?.filter(|(m, _)| *m == model).map(|(_, r)| r == result);
    let report = run.join("report");
    std::fs::create_dir_all(&report)?;
    std::fs::write(report.join(format!("eval_{}.json", model_name(model))), serde_json::to_string_pretty(&result)?)?;
    Ok(EvalOutcome { model, result, matches_log })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Grid {
    /// S, S+LT and S+LT+ET.
    Hybrid,
    /// RPN score, box jittering and regression jittering.
    BoxSelection,
    /// 34%, 50% and 100% of the labeled split.
    LabelFraction,
    /// Queue on or off, crossed with dynamic updating on or off.
    Queue,
}

pub fn grid_variants(grid: Grid, base: &RunConfig) -> Vec<(String, RunConfig)> {
    use castdet::teacher::SelectionStrategy as S;
    let with = |name: &str, f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        (name.to_string(), c)
    };
    match grid {
        Grid::Hybrid => vec![
            with("s", &|c| c.train.mode = FlowMode::Supervised),
            with("s+lt", &|c| c.train.mode = FlowMode::LocalizationTeacher),
            with("s+lt+et", &|c| c.train.mode = FlowMode::Hybrid),
        ],
        Grid::BoxSelection => vec![
            with("rpn_score", &|c| c.train.box_selection.strategy = S::RpnScore),
            with("box_jitter", &|c| c.train.box_selection.strategy = S::BoxJitter),
            with("reg_jitter", &|c| c.train.box_selection.strategy = S::RegJitter),
        ],
        Grid::LabelFraction => vec![
            with("labels_34", &|c| c.label_fraction = 0.34),
            with("labels_50", &|c| c.label_fraction = 0.5),
            with("labels_100", &|c| c.label_fraction = 1.0),
        ],
        Grid::Queue => vec![
            with("queue_dynamic", &|c| {
                c.train.queue = true;
                c.train.dynamic = true;
            }),
            with("queue_frozen", &|c| {
                c.train.queue = true;
                c.train.dynamic = false;
            }),
            with("transient_dynamic", &|c| {
                c.train.queue = false;
                c.train.dynamic = true;
            }),
            with("transient", &|c| {
                c.train.queue = false;
                c.train.dynamic = false;
            }),
        ],
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub run: String,
    pub result: Option<EvalResult>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationSummary {
    pub grid: String,
    pub rows: Vec<AblationRow>,
}

pub fn ablate(grid: Grid, base: &RunConfig, seeds: &[u64], data: &Path, external: Option<&Path>, out: &Path, overwrite: bool) -> Result<PathBuf> {
    let variants = grid_variants(grid, base);
    for (_, c) in &variants {
        c.validate()?;
    }
    let needs_external = variants.iter().any(|(_, c)| c.train.mode == FlowMode::Hybrid);
    let teacher = match external {
        Some(p) => Some(load_external(p, base.train.p0)?),
        None if needs_external => bail!("this grid trains s+lt+et and needs --external"),
        None => None,
    };
    let bench = Benchmark::load(data)?;
    let grid_name = format!("{grid:?}").to_lowercase();
    let mut run = RunDir::create(out, "ablate", &serde_json::json!({ "grid": grid_name, "seeds": seeds, "base": base }), overwrite)?;
    run.input("data", data);
    if let Some(p) = external {
        run.input("external", &external_path(p));
    }
    let mut rows = Vec::new();
    for (name, cfg) in &variants {
        for &seed in seeds {
            let mut c = cfg.clone();
            c.train.seed = seed;
            let dir_name = format!("{}-seed{seed}", name.replace('+', "_"));
            eprintln!("== {grid_name}: {name} (seed {seed})");
            let dir = train_on(&c, &bench, data, teacher.as_ref(), external, &run.path(&dir_name), overwrite)?;
            let result = logged_eval(&dir)?.map(|(_, r)| r);
            rows.push(AblationRow { variant: name.clone(), seed, run: dir_name.clone(), result });
            run.artifact(&dir_name);
            run.seed(&dir_name, seed);
        }
    }
    let summary = AblationSummary { grid: grid_name, rows };
    run.write_json("summary.json", &summary)?;
    run.artifact("summary.json");
    let table = crate::report::ablation_table(&summary);
    std::fs::write(run.path("summary.txt"), &table)?;
    run.artifact("summary.txt");
    print!("{table}");
    run.finish()
}

/// Per-variant medians of the tracked metrics, in grid order.
pub fn medians(summary: &AblationSummary) -> Vec<(String, usize, BTreeMap<&'static str, f64>)> {
    let mut order: Vec<String> = Vec::new();
    for r in &summary.rows {
        if !order.contains(&r.variant) {
            order.push(r.variant.clone());
        }
    }
    order
        .into_iter()
        .map(|v| {
            let results: Vec<&EvalResult> = summary.rows.iter().filter(|r| r.variant == v).filter_map(|r| r.result.as_ref()).collect();
            let mut m = BTreeMap::new();
            let fields: [(&'static str, fn(&EvalResult) -> f64); 6] = [
                ("map", |r| r.map),
                ("map_base", |r| r.map_base),
                ("map_novel", |r| r.map_novel),
                ("hm", |r| r.hm),
                ("mar_base", |r| r.mar_base),
                ("mar_novel", |r| r.mar_novel),
            ];
            for (k, f) in fields {
                let mut xs: Vec<f64> = results.iter().map(|r| f(r)).collect();
                if !xs.is_empty() {
                    m.insert(k, median(&mut xs));
                }
            }
            (v, results.len(), m)
        })
        .collect()
}

pub fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}
