//! `castdet`: data generation, external-teacher pretraining, training,
//! evaluation, ablation grids and reports.

mod plot;
mod report;
mod rundir;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use castdet::train::{EvalModel, FlowMode};
use stages::{GenDataConfig, Grid, PretrainStageConfig, RunConfig};

#[derive(Parser)]
#[command(name = "castdet", version, about = "Open-vocabulary detection with a localization teacher and a dynamic label queue")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// JSON config; flags given on the command line override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the stage's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output run directory.
    #[arg(long)]
    out: PathBuf,
    /// Replace an existing output directory.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    S,
    SLt,
    SLtEt,
}

impl From<Mode> for FlowMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::S => FlowMode::Supervised,
            Mode::SLt => FlowMode::LocalizationTeacher,
            Mode::SLtEt => FlowMode::Hybrid,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Model {
    Student,
    Teacher,
}

#[derive(Args)]
struct TrainOverrides {
    /// Flows feeding the student (`mode`).
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Main-phase iterations after burn-in (`total_iters`).
    #[arg(long)]
    iters: Option<usize>,
    /// Supervised burn-in iterations (`burn_in_iters`).
    #[arg(long)]
    burn_in: Option<usize>,
    /// Share of the labeled split (`label_fraction`).
    #[arg(long)]
    label_fraction: Option<f64>,
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut RunConfig, seed: Option<u64>) {
        if let Some(s) = seed {
            cfg.train.seed = s;
        }
        if let Some(m) = self.mode {
            cfg.train.mode = m.into();
        }
        if let Some(n) = self.iters {
            cfg.train.total_iters = n;
        }
        if let Some(n) = self.burn_in {
            cfg.train.burn_in_iters = n;
        }
        if let Some(f) = self.label_fraction {
            cfg.label_fraction = f;
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the synthetic benchmark: labeled, unlabeled and test splits.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain the frozen crop classifier on a disjoint crop corpus.
    PretrainExternal {
        #[command(flatten)]
        common: Common,
        /// A `gen-data` run directory.
        #[arg(long)]
        data: PathBuf,
    },
    /// Burn-in followed by the main training phase.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        overrides: TrainOverrides,
        #[arg(long)]
        data: PathBuf,
        /// A `pretrain-external` run directory or snapshot file.
        #[arg(long)]
        external: Option<PathBuf>,
    },
    /// Evaluate a saved checkpoint on the test split.
    Eval {
        /// A `train` run directory.
        #[arg(long)]
        run: PathBuf,
        /// Defaults to the model the run evaluated during training.
        #[arg(long, value_enum)]
        model: Option<Model>,
        /// Defaults to the data directory recorded in the run manifest.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train every variant of an ablation grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        overrides: TrainOverrides,
        #[arg(long, value_enum)]
        grid: Grid,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        external: Option<PathBuf>,
        /// Comma-separated seeds; defaults to the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Text tables and PNG curves for a training or ablation run.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData { common } => {
            let mut cfg: GenDataConfig = stages::load_config(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.scene.seed = s;
            }
            let dir = stages::gen_data(&cfg, &common.out, common.overwrite)?;
            println!("{}", dir.display());
        }
        Cmd::PretrainExternal { common, data } => {
            let mut cfg: PretrainStageConfig = stages::load_config(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.pretrain.seed = s;
            }
            let dir = stages::pretrain_external(&cfg, &data, &common.out, common.overwrite)?;
            println!("{}", dir.display());
        }
        Cmd::Train { common, overrides, data, external } => {
            let mut cfg: RunConfig = stages::load_config(common.config.as_deref())?;
            overrides.apply(&mut cfg, common.seed);
            let dir = stages::train(&cfg, &data, external.as_deref(), &common.out, common.overwrite)?;
            println!("{}", dir.display());
        }
        Cmd::Eval { run, model, data } => {
            let model = model.map(|m| match m {
                Model::Student => EvalModel::Student,
                Model::Teacher => EvalModel::Teacher,
            });
            let out = stages::eval(&run, model, data.as_deref())?;
            eprintln!("evaluated the {:?} checkpoint", out.model);
            println!("{}", serde_json::to_string_pretty(&out.result)?);
            print!("{}", report::eval_table(&out.result));
            match out.matches_log {
                Some(true) => println!("matches the training-time evaluation"),
                Some(false) => bail!("result differs from the training-time evaluation in metrics.jsonl"),
                None => {}
            }
        }
        Cmd::Ablate { common, overrides, grid, data, external, seeds } => {
            let mut cfg: RunConfig = stages::load_config(common.config.as_deref())?;
            overrides.apply(&mut cfg, common.seed);
            let seeds = if seeds.is_empty() { vec![cfg.train.seed] } else { seeds };
            let dir = stages::ablate(grid, &cfg, &seeds, &data, external.as_deref(), &common.out, common.overwrite)?;
            println!("{}", dir.display());
        }
        Cmd::Report { run } => {
            let (table, files) = report::report(&run)?;
            print!("{table}");
            for f in files {
                println!("wrote {}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
