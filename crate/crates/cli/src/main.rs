//! `tmpib`: dataset generation, training, evaluation, the three shift
//! experiments and the theory diagnostics.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use tmpib_core::apsim::{generate_dataset, Dataset, DatasetSpec, DifficultyTag};
use tmpib_core::eval::write_csv;
use tmpib_core::experiment::{
    evaluate_model, run_beta, run_diagnose, run_pathology, run_rotation, ExperimentConfig, Regime,
    METRICS_FILE,
};
use tmpib_core::train::{save_run, train, TrainConfig};
use tmpib_core::vib::{Model, Variant};
use tmpib_core::{CoreError, Result};

use config::{Plan, Profile, RunConfig};

#[derive(Parser)]
#[command(name = "tmpib", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; experiments use consecutive seeds starting here.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Base defaults the config file is applied on top of.
    #[arg(long, value_enum)]
    profile: Option<Profile>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        plan: Option<Plan>,
    },
    /// Train one variant on the training split of a dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// One of svs-stoch, svs-det, svs-l-stoch, svs-l-det.
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score a trained model on dataset splits.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Split names; defaults to every non-training split.
        #[arg(long, value_delimiter = ',')]
        splits: Option<Vec<String>>,
    },
    /// Four variants across the pathology difficulty splits.
    ExpPathology {
        #[command(flatten)]
        common: Common,
    },
    /// svs stochastic and deterministic across rotation angles.
    ExpRotation {
        #[command(flatten)]
        common: Common,
    },
    /// β sweep of svs stochastic across rotation angles.
    ExpBeta {
        #[command(flatten)]
        common: Common,
    },
    /// Gap, variation and Taylor diagnostics on the pathology checkpoints.
    Diagnose {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Self::GenData { .. } => "gen-data",
            Self::Train { .. } => "train",
            Self::Eval { .. } => "eval",
            Self::ExpPathology { .. } => "exp-pathology",
            Self::ExpRotation { .. } => "exp-rotation",
            Self::ExpBeta { .. } => "exp-beta",
            Self::Diagnose { .. } => "diagnose",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Self::GenData { common, .. }
            | Self::Train { common, .. }
            | Self::Eval { common, .. }
            | Self::ExpPathology { common }
            | Self::ExpRotation { common }
            | Self::ExpBeta { common }
            | Self::Diagnose { common } => common,
        }
    }
}

/// Applies flags over the file and fills what is still unset.
fn resolve(cmd: &Command) -> Result<RunConfig> {
    let common = cmd.common();
    let mut cfg = config::load(common.config.as_deref(), common.profile)?;
    cfg.command = Some(cmd.name().to_string());
    let exp = cfg.experiment.get_or_insert_with(ExperimentConfig::default);
    if let Some(s) = common.seed {
        let n = exp.seeds.len().max(1) as u64;
        exp.seeds = (s..s + n).collect();
        cfg.seed = Some(s);
    }
    if cfg.seed.is_none() {
        cfg.seed = exp.seeds.first().copied();
    }
    match cmd {
        Command::GenData { plan, .. } => {
            cfg.plan = plan.or(cfg.plan).or(Some(Plan::Pathology));
        }
        Command::Train {
            variant,
            beta,
            data,
            ..
        } => {
            cfg.variant = variant.clone().or(cfg.variant.take());
            cfg.beta = beta.or(cfg.beta).or(Some(exp.beta));
            cfg.data = data.clone().or(cfg.data.take());
        }
        Command::Eval {
            model,
            data,
            splits,
            ..
        } => {
            cfg.model = model.clone().or(cfg.model.take());
            cfg.data = data.clone().or(cfg.data.take());
            cfg.splits = splits.clone().or(cfg.splits.take());
        }
        _ => {}
    }
    Ok(cfg)
}

fn required<'a, T>(v: &'a Option<T>, flag: &str) -> Result<&'a T> {
    v.as_ref()
        .ok_or_else(|| CoreError::Config(format!("--{flag} is required")))
}

fn gen_data(cfg: &RunConfig, exp: &ExperimentConfig, out: &Path) -> Result<Vec<(String, PathBuf)>> {
    let seed = cfg.seed.unwrap_or(1);
    let spec: DatasetSpec = match cfg.plan.unwrap_or(Plan::Pathology) {
        Plan::Pathology => exp.pathology_spec(seed),
        Plan::RotationI => exp.rotation_train_spec(seed, Regime::I),
        Plan::RotationII => exp.rotation_train_spec(seed, Regime::II),
        Plan::RotationTest => exp.rotation_test_spec(seed),
    };
    if out.join(tmpib_core::apsim::MANIFEST_FILE).exists() {
        return Err(CoreError::Config(format!(
            "{} already holds a dataset",
            out.display()
        )));
    }
    let m = generate_dataset(&spec, out)?;
    info!("wrote {} cases to {}", m.cases.len(), out.display());
    Ok(vec![])
}

fn train_cmd(
    cfg: &RunConfig,
    exp: &ExperimentConfig,
    out: &Path,
) -> Result<Vec<(String, PathBuf)>> {
    let data = required(&cfg.data, "data")?;
    let variant: Variant = required(&cfg.variant, "variant")?.parse()?;
    let ds = Dataset::open(data)?;
    let model_cfg = exp
        .model
        .config(variant, cfg.beta.unwrap_or(exp.beta), ds.dims());
    let train_cfg = TrainConfig {
        seed: cfg.seed.unwrap_or(1),
        ..exp.train.clone()
    };
    let (model, mut report) = train(&ds.split(DifficultyTag::Train), &model_cfg, &train_cfg)?;
    save_run(out, &model, &mut report)?;
    info!(
        "best epoch {} val loss {:.4} in {:.1} s",
        report.best_epoch, report.best_val_loss, report.wall_time_s
    );
    Ok(vec![("data".into(), data.clone())])
}

fn eval_cmd(cfg: &RunConfig, exp: &ExperimentConfig, out: &Path) -> Result<Vec<(String, PathBuf)>> {
    let model_dir = required(&cfg.model, "model")?;
    let data = required(&cfg.data, "data")?;
    let model = Model::load(model_dir)?;
    let ds = Dataset::open(data)?;
    let tags: Vec<DifficultyTag> = match &cfg.splits {
        Some(names) => names.iter().map(|n| n.parse()).collect::<Result<_>>()?,
        None => ds
            .tags()
            .into_iter()
            .filter(|t| *t != DifficultyTag::Train)
            .collect(),
    };
    if tags.is_empty() {
        return Err(CoreError::EmptySplit("no splits to evaluate".into()));
    }
    let evals = evaluate_model(&model, &ds, &tags, &exp.scar_rule)?;
    fs::create_dir_all(out)?;
    write_csv(fs::File::create(out.join(METRICS_FILE))?, &evals)?;
    Ok(vec![
        ("model".into(), model_dir.clone()),
        ("data".into(), data.clone()),
    ])
}

/// Checkpoints and reports the diagnostics read.
fn pathology_inputs(exp: &ExperimentConfig, out: &Path) -> Vec<(String, PathBuf)> {
    let mut v = Vec::new();
    for s in &exp.seeds {
        for variant in Variant::ALL {
            let dir = out.join(format!("seed_{s}/pathology/{variant}"));
            for f in ["model.json", "params.bin", "report.json"] {
                v.push((format!("seed_{s}/{variant}/{f}"), dir.join(f)));
            }
        }
        let manifest = out.join(format!("seed_{s}/data/pathology/manifest.json"));
        v.push((format!("seed_{s}/manifest"), manifest));
    }
    v
}

fn run(cmd: &Command) -> Result<()> {
    let cfg = resolve(cmd)?;
    let exp = cfg.experiment.clone().unwrap_or_default();
    exp.validate()?;
    let out = &cmd.common().out;
    fs::create_dir_all(out)?;
    let inputs = match cmd {
        Command::GenData { .. } => gen_data(&cfg, &exp, out)?,
        Command::Train { .. } => train_cmd(&cfg, &exp, out)?,
        Command::Eval { .. } => eval_cmd(&cfg, &exp, out)?,
        Command::ExpPathology { .. } => {
            run_pathology(&exp, out)?;
            vec![]
        }
        Command::ExpRotation { .. } => {
            run_rotation(&exp, out)?;
            vec![]
        }
        Command::ExpBeta { .. } => {
            run_beta(&exp, out)?;
            vec![]
        }
        Command::Diagnose { .. } => {
            let report = run_diagnose(&exp, out)?;
            info!(
                "oracle bound holds at every sweep point: {}",
                report.oracle_bound_holds
            );
            pathology_inputs(&exp, out)
        }
    };
    config::record_run(out, &cfg, &inputs)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
