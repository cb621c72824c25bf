//! Experiment drivers. Each writes per-seed model directories under `out`
//! and plain CSV/JSON summaries at its top level.
//!
//! Layout, for master seed `s`:
//!
//! ```text
//! seed_s/data/{pathology, rotation_test, rotation_train_i, rotation_train_ii}
//! seed_s/pathology/<variant>/
//! seed_s/rotation_i/<model>/   seed_s/rotation_ii/<model>/
//! ```
//!
//! A model directory holds the checkpoint, `report.json`, `run.json` (the
//! configuration fingerprint) and `metrics.csv`. A directory whose
//! fingerprint matches is loaded instead of retrained, so the β sweep reuses
//! the rotation runs that share its settings.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::apsim::{
    generate_dataset, Case, Dataset, DatasetSpec, DifficultyTag, PlanEntry, PoolConfig, SimConfig,
    TmpSequence, MANIFEST_FILE,
};
use crate::error::{CoreError, Result};
use crate::eval::{
    aggregate, evaluate_split, write_csv, Aggregate, ScarRule, SplitEval, METRIC_NAMES,
};
use crate::geometry::GridSpec;
use crate::rng::derive_seed;
use crate::theory::{
    draw_normals, generalization_gap, latent_range, model_taylor, model_variation, oracle_sweep,
    probes_from_cases, ErrorFn, GapReport, OracleResult, TaylorReport, VariationReport, FD_STEP,
};
use crate::train::{save_run, train, TrainConfig, TrainReport, REPORT_FILE};
use crate::vib::{Arch, Model, ModelConfig, Variant};

pub const RUN_FILE: &str = "run.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const THEORY_REPORT_FILE: &str = "theory_report.json";

/// Training angles of the two rotation regimes.
pub const REGIME_I: [i32; 5] = [-2, -1, 0, 1, 2];
pub const REGIME_II: [i32; 10] = [-4, -3, -2, -1, 0, 1, 2, 3, 4, 5];

/// Offsets mixed into the master seed so datasets never share case seeds.
mod data_streams {
    pub const PATHOLOGY: u64 = 101;
    pub const ROTATION_TEST: u64 = 102;
    pub const ROTATION_TRAIN_I: u64 = 103;
    pub const ROTATION_TRAIN_II: u64 = 104;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSizes {
    pub latent_dim: usize,
    pub enc_hidden: usize,
    pub dec_hidden: usize,
    pub fc_hidden: usize,
    pub dec_input: usize,
    pub n_mc: usize,
}

impl Default for ModelSizes {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            enc_hidden: 64,
            dec_hidden: 64,
            fc_hidden: 128,
            dec_input: 4,
            n_mc: 1,
        }
    }
}

impl ModelSizes {
    pub fn config(
        &self,
        variant: Variant,
        beta: f64,
        (u, m, t): (usize, usize, usize),
    ) -> ModelConfig {
        ModelConfig {
            latent_dim: self.latent_dim,
            enc_hidden: self.enc_hidden,
            dec_hidden: self.dec_hidden,
            fc_hidden: self.fc_hidden,
            dec_input: self.dec_input,
            n_mc: self.n_mc,
            beta,
            ..ModelConfig::new(variant, m, u, t)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseConfig {
    /// Validation cases used as latent probes.
    pub probes: usize,
    /// Validation targets each probe is scored against.
    pub targets: usize,
    /// Probes given the Taylor expansion check.
    pub taylor_probes: usize,
    pub n_mc: usize,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        Self {
            probes: 20,
            targets: 20,
            taylor_probes: 3,
            n_mc: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub grid: GridSpec,
    pub sim: SimConfig,
    /// Defaults to the layout for the grid size.
    pub pools: Option<PoolConfig>,
    pub snr_db: f64,
    pub model: ModelSizes,
    pub train: TrainConfig,
    /// β of the stochastic variants outside the β sweep.
    pub beta: f64,
    pub seeds: Vec<u64>,
    pub train_count: usize,
    /// Cases per pathology test split.
    pub test_count: usize,
    /// Cases per evaluated rotation angle.
    pub angle_count: usize,
    pub eval_angles: Vec<i32>,
    pub betas: Vec<f64>,
    pub scar_rule: ScarRule,
    pub diagnose: DiagnoseConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            sim: SimConfig::default(),
            pools: None,
            snr_db: 40.0,
            model: ModelSizes::default(),
            train: TrainConfig::default(),
            beta: 10.0,
            seeds: vec![1, 2, 3],
            train_count: 400,
            test_count: 100,
            angle_count: 50,
            eval_angles: (-20..=20).collect(),
            betas: vec![0.1, 1.0, 10.0, 100.0],
            scar_rule: ScarRule::default(),
            diagnose: DiagnoseConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reduced sizes that keep every experiment within a few minutes on one
    /// core.
    pub fn small() -> Self {
        Self {
            sim: SimConfig {
                n_steps: 6400,
                ..SimConfig::default()
            },
            model: ModelSizes {
                latent_dim: 8,
                enc_hidden: 32,
                dec_hidden: 32,
                fc_hidden: 64,
                ..ModelSizes::default()
            },
            train: TrainConfig {
                batch_size: 8,
                max_epochs: 150,
                ..TrainConfig::default()
            },
            test_count: 60,
            angle_count: 20,
            ..Self::default()
        }
    }

    pub fn pools(&self) -> PoolConfig {
        self.pools
            .unwrap_or_else(|| PoolConfig::for_grid(self.grid.nx, self.grid.ny))
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(CoreError::config("at least one seed is required"));
        }
        if self.train_count == 0 || self.test_count == 0 || self.angle_count == 0 {
            return Err(CoreError::config("case counts must be at least 1"));
        }
        if self.betas.iter().any(|b| !(*b >= 0.0 && b.is_finite())) {
            return Err(CoreError::config("betas must be finite and nonnegative"));
        }
        if let Some(a) = self.eval_angles.iter().find(|a| a.abs() > 45) {
            return Err(CoreError::config(format!("eval angle {a} outside ±45")));
        }
        Ok(())
    }

    fn dataset_spec(&self, base_seed: u64, plan: Vec<PlanEntry>) -> DatasetSpec {
        DatasetSpec {
            grid: self.grid,
            sim: self.sim,
            pools: self.pools(),
            snr_db: self.snr_db,
            base_seed,
            plan,
        }
    }

    pub fn pathology_spec(&self, seed: u64) -> DatasetSpec {
        let mut plan = vec![PlanEntry::new(DifficultyTag::Train, self.train_count, 0.0)];
        plan.extend(
            DifficultyTag::PATHOLOGY_TESTS
                .iter()
                .map(|&t| PlanEntry::new(t, self.test_count, 0.0)),
        );
        self.dataset_spec(derive_seed(seed, data_streams::PATHOLOGY), plan)
    }

    /// Training split spread as evenly as possible over `angles`.
    pub fn rotation_train_spec(&self, seed: u64, regime: Regime) -> DatasetSpec {
        let angles = regime.angles();
        let n = angles.len();
        let plan = angles
            .iter()
            .enumerate()
            .map(|(k, &a)| {
                let count = self.train_count / n + usize::from(k < self.train_count % n);
                PlanEntry::new(DifficultyTag::Train, count, a as f64)
            })
            .filter(|e| e.count > 0)
            .collect();
        let stream = match regime {
            Regime::I => data_streams::ROTATION_TRAIN_I,
            Regime::II => data_streams::ROTATION_TRAIN_II,
        };
        self.dataset_spec(derive_seed(seed, stream), plan)
    }

    pub fn rotation_test_spec(&self, seed: u64) -> DatasetSpec {
        let plan = self
            .eval_angles
            .iter()
            .map(|&a| PlanEntry::new(DifficultyTag::Angle(a), self.angle_count, a as f64))
            .collect();
        self.dataset_spec(derive_seed(seed, data_streams::ROTATION_TEST), plan)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Regime {
    #[serde(rename = "i")]
    I,
    #[serde(rename = "ii")]
    II,
}

impl Regime {
    pub const ALL: [Regime; 2] = [Regime::I, Regime::II];

    pub fn angles(self) -> &'static [i32] {
        match self {
            Self::I => &REGIME_I,
            Self::II => &REGIME_II,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::I => "i",
            Self::II => "ii",
        }
    }
}

/// Aggregate metrics of one model on one split for one master seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub seed: u64,
    pub group: String,
    pub model: String,
    pub split: String,
    pub aggregate: Aggregate,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.retain(|x| x.is_finite());
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn metric_index(metric: &str) -> Result<usize> {
    METRIC_NAMES
        .iter()
        .position(|&m| m == metric)
        .ok_or_else(|| CoreError::config(format!("unknown metric `{metric}`")))
}

/// Seed-level results of one experiment.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Records(pub Vec<Record>);

impl Records {
    fn select<'a>(
        &'a self,
        group: &'a str,
        model: &'a str,
        split: &'a str,
    ) -> impl Iterator<Item = &'a Record> {
        self.0
            .iter()
            .filter(move |r| r.group == group && r.model == model && r.split == split)
    }

    /// Median across seeds of the per-seed split means.
    pub fn median_mean(&self, group: &str, model: &str, split: &str, metric: &str) -> Result<f64> {
        let k = metric_index(metric)?;
        Ok(median(
            self.select(group, model, split)
                .map(|r| r.aggregate.mean.to_array()[k])
                .collect(),
        ))
    }

    pub fn median_std(&self, group: &str, model: &str, split: &str, metric: &str) -> Result<f64> {
        let k = metric_index(metric)?;
        Ok(median(
            self.select(group, model, split)
                .map(|r| r.aggregate.std.to_array()[k])
                .collect(),
        ))
    }

    /// Distinct `(group, model, split)` keys in first-seen order.
    fn keys(&self) -> Vec<(String, String, String)> {
        let mut keys = Vec::new();
        for r in &self.0 {
            let k = (r.group.clone(), r.model.clone(), r.split.clone());
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        keys
    }

    /// One row per record: seed, group, model, split, case count, then mean,
    /// std and excluded count per metric.
    pub fn write_seed_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        let mut header = vec!["seed", "group", "model", "split", "n_cases"]
            .into_iter()
            .map(String::from)
            .collect::<Vec<_>>();
        for suffix in ["mean", "std", "excluded"] {
            header.extend(METRIC_NAMES.iter().map(|m| format!("{m}_{suffix}")));
        }
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.0 {
            let a = &r.aggregate;
            let mut row = vec![
                r.seed.to_string(),
                r.group.clone(),
                r.model.clone(),
                r.split.clone(),
                a.n_cases.to_string(),
            ];
            row.extend(a.mean.to_array().iter().map(|v| fmt_f(*v)));
            row.extend(a.std.to_array().iter().map(|v| fmt_f(*v)));
            row.extend(a.excluded.iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Wide summary with medians across seeds: the key columns, then
    /// `<metric>_mean` and `<metric>_std` per metric.
    fn write_wide_csv<F>(&self, path: &Path, key_header: &[&str], mut key_cols: F) -> Result<()>
    where
        F: FnMut(&str, &str, &str) -> Option<Vec<String>>,
    {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        let mut header: Vec<String> = key_header.iter().map(|s| s.to_string()).collect();
        for m in METRIC_NAMES {
            header.push(format!("{m}_mean"));
            header.push(format!("{m}_std"));
        }
        w.write_record(&header).map_err(csv_err)?;
        for (g, m, s) in self.keys() {
            let Some(mut row) = key_cols(&g, &m, &s) else {
                continue;
            };
            for metric in METRIC_NAMES {
                row.push(fmt_f(self.median_mean(&g, &m, &s, metric)?));
                row.push(fmt_f(self.median_std(&g, &m, &s, metric)?));
            }
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> CoreError {
    CoreError::Io(std::io::Error::other(e))
}

fn fmt_f(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else {
        format!("{v}")
    }
}

fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

/// Opens the dataset at `dir`, generating it first when absent. An existing
/// dataset built from a different spec is an error; it is never rewritten.
pub fn ensure_dataset(spec: &DatasetSpec, dir: &Path) -> Result<Dataset> {
    if dir.join(MANIFEST_FILE).exists() {
        let ds = Dataset::open(dir)?;
        if ds.manifest.spec != *spec {
            return Err(CoreError::Dataset(format!(
                "{} holds a dataset from a different configuration",
                dir.display()
            )));
        }
        return Ok(ds);
    }
    info!("generating dataset {}", dir.display());
    generate_dataset(spec, dir)?;
    Dataset::open(dir)
}

#[derive(Serialize, Deserialize, PartialEq)]
struct RunFingerprint {
    model: ModelConfig,
    train: TrainConfig,
    data: DatasetSpec,
}

/// Trains `model_cfg` on `cases` and saves into `dir`, or loads the model
/// already there when its fingerprint matches.
pub fn train_or_load(
    dir: &Path,
    data: &DatasetSpec,
    cases: &[&Case],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<(Model, TrainReport)> {
    let fp = RunFingerprint {
        model: model_cfg.clone(),
        train: train_cfg.clone(),
        data: data.clone(),
    };
    let run_file = dir.join(RUN_FILE);
    if run_file.exists() && dir.join(REPORT_FILE).exists() {
        let existing: RunFingerprint = serde_json::from_slice(&fs::read(&run_file)?)?;
        if existing == fp {
            info!("reusing {}", dir.display());
            let report = serde_json::from_slice(&fs::read(dir.join(REPORT_FILE))?)?;
            return Ok((Model::load(dir)?, report));
        }
    }
    info!("training {} -> {}", model_cfg.variant(), dir.display());
    let (model, mut report) = train(cases, model_cfg, train_cfg)?;
    info!(
        "best epoch {} val loss {:.4} ({:.1} s)",
        report.best_epoch, report.best_val_loss, report.wall_time_s
    );
    save_run(dir, &model, &mut report)?;
    let mut json = serde_json::to_vec_pretty(&fp)?;
    json.push(b'\n');
    fs::write(run_file, json)?;
    Ok((model, report))
}

/// Reconstructs every case in batches and scores each split.
pub fn evaluate_model(
    model: &Model,
    ds: &Dataset,
    splits: &[DifficultyTag],
    rule: &ScarRule,
) -> Result<Vec<SplitEval>> {
    let mut out = Vec::with_capacity(splits.len());
    for &tag in splits {
        let cases = ds.split(tag);
        let mut recon: HashMap<usize, TmpSequence> = HashMap::with_capacity(cases.len());
        for chunk in cases.chunks(64) {
            let ys: Vec<_> = chunk.iter().map(|c| &c.y).collect();
            for (c, xh) in chunk.iter().zip(model.reconstruct_batch(&ys)?) {
                recon.insert(c.id, xh);
            }
        }
        out.push(evaluate_split(
            &tag.to_string(),
            &cases,
            &ds.geometry,
            rule,
            |c| {
                recon.remove(&c.id).ok_or_else(|| {
                    CoreError::Contract(format!("case {} reconstructed twice", c.id))
                })
            },
        )?);
    }
    Ok(out)
}

fn write_metrics(dir: &Path, evals: &[SplitEval]) -> Result<()> {
    write_csv(fs::File::create(dir.join(METRICS_FILE))?, evals)
}

fn model_label(variant: Variant, beta: Option<f64>) -> String {
    match beta {
        Some(b) if variant.stochastic => format!("{variant}_beta{b}"),
        _ => variant.to_string(),
    }
}

/// Pathology experiment: all four variants per seed, scored on every
/// difficulty split.
pub fn run_pathology(cfg: &ExperimentConfig, out: &Path) -> Result<Records> {
    cfg.validate()?;
    let mut records = Records::default();
    for &seed in &cfg.seeds {
        let sd = seed_dir(out, seed);
        let spec = cfg.pathology_spec(seed);
        let ds = ensure_dataset(&spec, &sd.join("data/pathology"))?;
        let train_cases = ds.split(DifficultyTag::Train);
        for variant in Variant::ALL {
            let dir = sd.join("pathology").join(variant.to_string());
            let model_cfg = cfg.model.config(variant, cfg.beta, ds.dims());
            let train_cfg = TrainConfig {
                seed,
                ..cfg.train.clone()
            };
            let (model, _) = train_or_load(&dir, &spec, &train_cases, &model_cfg, &train_cfg)?;
            let evals =
                evaluate_model(&model, &ds, &DifficultyTag::PATHOLOGY_TESTS, &cfg.scar_rule)?;
            write_metrics(&dir, &evals)?;
            let all_rows: Vec<_> = evals.iter().flat_map(|e| e.rows.clone()).collect();
            for agg in evals
                .iter()
                .map(|e| e.aggregate.clone())
                .chain([aggregate("all", &all_rows)])
            {
                records.0.push(Record {
                    seed,
                    group: "pathology".into(),
                    model: variant.to_string(),
                    split: agg.split.clone(),
                    aggregate: agg,
                });
            }
        }
    }
    records.write_seed_csv(&out.join("pathology_seeds.csv"))?;
    records.write_wide_csv(&out.join("pathology_table.csv"), &["variant"], |_, m, s| {
        (s == "all").then(|| vec![m.to_string()])
    })?;
    write_pathology_long(&records, &out.join("pathology_splits.csv"))?;
    Ok(records)
}

/// Variant × difficulty × metric, medians across seeds.
fn write_pathology_long(records: &Records, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["variant", "difficulty", "metric", "mean", "std"])
        .map_err(csv_err)?;
    for variant in Variant::ALL {
        let v = variant.to_string();
        for tag in DifficultyTag::PATHOLOGY_TESTS {
            let s = tag.to_string();
            for metric in METRIC_NAMES {
                w.write_record([
                    v.clone(),
                    s.clone(),
                    metric.to_string(),
                    fmt_f(records.median_mean("pathology", &v, &s, metric)?),
                    fmt_f(records.median_std("pathology", &v, &s, metric)?),
                ])
                .map_err(csv_err)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn angle_tags(cfg: &ExperimentConfig) -> Vec<DifficultyTag> {
    cfg.eval_angles
        .iter()
        .map(|&a| DifficultyTag::Angle(a))
        .collect()
}

/// Trains one model on a rotation regime and scores it at every evaluated
/// angle.
fn rotation_run(
    cfg: &ExperimentConfig,
    out: &Path,
    seed: u64,
    regime: Regime,
    variant: Variant,
    beta: f64,
    test: &Dataset,
) -> Result<Vec<Aggregate>> {
    let sd = seed_dir(out, seed);
    let spec = cfg.rotation_train_spec(seed, regime);
    let ds = ensure_dataset(
        &spec,
        &sd.join(format!("data/rotation_train_{}", regime.name())),
    )?;
    let label = model_label(variant, Some(beta));
    let dir = sd.join(format!("rotation_{}", regime.name())).join(&label);
    let model_cfg = cfg.model.config(variant, beta, ds.dims());
    let train_cfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let (model, _) = train_or_load(
        &dir,
        &spec,
        &ds.split(DifficultyTag::Train),
        &model_cfg,
        &train_cfg,
    )?;
    let evals = evaluate_model(&model, test, &angle_tags(cfg), &cfg.scar_rule)?;
    write_metrics(&dir, &evals)?;
    Ok(evals.into_iter().map(|e| e.aggregate).collect())
}

fn rotation_test(cfg: &ExperimentConfig, out: &Path, seed: u64) -> Result<Dataset> {
    ensure_dataset(
        &cfg.rotation_test_spec(seed),
        &seed_dir(out, seed).join("data/rotation_test"),
    )
}

fn angle_of(split: &str) -> &str {
    split.strip_prefix("angle:").unwrap_or(split)
}

/// Rotation experiment: `svs` stochastic and deterministic under both
/// training regimes. Groups are `i` and `ii`.
pub fn run_rotation(cfg: &ExperimentConfig, out: &Path) -> Result<Records> {
    cfg.validate()?;
    let mut records = Records::default();
    for &seed in &cfg.seeds {
        let test = rotation_test(cfg, out, seed)?;
        for regime in Regime::ALL {
            for stochastic in [true, false] {
                let variant = Variant::new(Arch::Svs, stochastic);
                for agg in rotation_run(cfg, out, seed, regime, variant, cfg.beta, &test)? {
                    records.0.push(Record {
                        seed,
                        group: regime.name().into(),
                        model: variant.to_string(),
                        split: agg.split.clone(),
                        aggregate: agg,
                    });
                }
            }
        }
    }
    records.write_seed_csv(&out.join("rotation_seeds.csv"))?;
    records.write_wide_csv(
        &out.join("rotation.csv"),
        &["regime", "variant", "angle"],
        |g, m, s| Some(vec![g.to_string(), m.to_string(), angle_of(s).to_string()]),
    )?;
    Ok(records)
}

/// β sweep of `svs` stochastic on regime (i), plus the deterministic
/// reference. Models are `beta=<b>` and `deterministic`.
pub fn run_beta(cfg: &ExperimentConfig, out: &Path) -> Result<Records> {
    cfg.validate()?;
    if cfg.betas.is_empty() {
        return Err(CoreError::config("beta list is empty"));
    }
    let mut records = Records::default();
    for &seed in &cfg.seeds {
        let test = rotation_test(cfg, out, seed)?;
        let mut runs: Vec<(String, Variant, f64)> = cfg
            .betas
            .iter()
            .map(|&b| (format!("beta={b}"), Variant::new(Arch::Svs, true), b))
            .collect();
        runs.push((
            "deterministic".into(),
            Variant::new(Arch::Svs, false),
            cfg.beta,
        ));
        for (label, variant, beta) in runs {
            for agg in rotation_run(cfg, out, seed, Regime::I, variant, beta, &test)? {
                records.0.push(Record {
                    seed,
                    group: "beta".into(),
                    model: label.clone(),
                    split: agg.split.clone(),
                    aggregate: agg,
                });
            }
        }
    }
    records.write_seed_csv(&out.join("beta_seeds.csv"))?;
    records.write_wide_csv(
        &out.join("beta.csv"),
        &["model", "beta", "angle"],
        |_, m, s| {
            let beta = m.strip_prefix("beta=").unwrap_or("");
            Some(vec![
                m.to_string(),
                beta.to_string(),
                angle_of(s).to_string(),
            ])
        },
    )?;
    Ok(records)
}

/// Diagnostics of one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDiagnostics {
    pub seed: u64,
    pub gaps: Vec<SplitGap>,
    pub variation: VariationReport,
    pub taylor: Vec<TaylorReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitGap {
    pub split: String,
    pub report: GapReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    /// Keyed by variant name, one entry per master seed.
    pub models: BTreeMap<String, Vec<ModelDiagnostics>>,
    pub oracle: Vec<OracleResult>,
    pub oracle_bound_holds: bool,
    pub fd_step: f64,
}

impl TheoryReport {
    /// Median across seeds of a variation field of `variant`.
    pub fn median_variation(&self, variant: Variant, field: fn(&VariationReport) -> f64) -> f64 {
        median(
            self.models
                .get(&variant.to_string())
                .map(|v| v.iter().map(|d| field(&d.variation)).collect())
                .unwrap_or_default(),
        )
    }
}

/// Runs the theory diagnostics on the pathology checkpoints.
pub fn run_diagnose(cfg: &ExperimentConfig, out: &Path) -> Result<TheoryReport> {
    cfg.validate()?;
    let dc = &cfg.diagnose;
    let mut models: BTreeMap<String, Vec<ModelDiagnostics>> = BTreeMap::new();
    for &seed in &cfg.seeds {
        let sd = seed_dir(out, seed);
        let ds = Dataset::open(&sd.join("data/pathology"))?;
        for variant in Variant::ALL {
            let dir = sd.join("pathology").join(variant.to_string());
            if !dir.join(REPORT_FILE).exists() {
                return Err(CoreError::Dataset(format!(
                    "no trained model at {}",
                    dir.display()
                )));
            }
            info!("diagnosing {}", dir.display());
            let model = Model::load(&dir)?;
            let report: TrainReport = serde_json::from_slice(&fs::read(dir.join(REPORT_FILE))?)?;
            let by_id =
                |ids: &[usize]| -> Vec<&Case> { ids.iter().map(|&i| &ds.cases[i]).collect() };
            let val = by_id(&report.val_cases);
            let train_cases = by_id(&report.train_cases);

            let mut gaps = Vec::new();
            for tag in DifficultyTag::PATHOLOGY_TESTS {
                for error_fn in ErrorFn::ALL {
                    gaps.push(SplitGap {
                        split: tag.to_string(),
                        report: generalization_gap(&model, &val, &ds.split(tag), error_fn)?,
                    });
                }
            }

            let range = latent_range(&probes_from_cases(&model, &train_cases)?);
            let probe_cases = &val[..dc.probes.min(val.len())];
            let probes = probes_from_cases(&model, probe_cases)?;
            let targets: Vec<&TmpSequence> = val.iter().take(dc.targets).map(|c| &c.x).collect();
            let variation = model_variation(&model, &probes, &range, &targets, FD_STEP)?;

            let eps = draw_normals(seed, dc.n_mc, model.cfg.latent_dim);
            let taylor = probes
                .iter()
                .zip(probe_cases)
                .take(dc.taylor_probes)
                .map(|(p, c)| model_taylor(&model, &c.x, p, &eps, FD_STEP))
                .collect::<Result<Vec<_>>>()?;

            models
                .entry(variant.to_string())
                .or_default()
                .push(ModelDiagnostics {
                    seed,
                    gaps,
                    variation,
                    taylor,
                });
        }
    }
    let oracle = oracle_sweep()?;
    let report = TheoryReport {
        models,
        oracle_bound_holds: oracle.iter().all(|r| r.bound_holds),
        oracle,
        fd_step: FD_STEP,
    };
    let mut json = serde_json::to_vec_pretty(&report)?;
    json.push(b'\n');
    fs::write(out.join(THEORY_REPORT_FILE), json)?;
    Ok(report)
}
