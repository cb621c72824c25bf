//! Minibatch Adam training with validation-based early stopping.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use tmpib_tensor::{AdamConfig, Tape};

use crate::apsim::{Case, EcgSequence, TmpSequence};
use crate::error::{CoreError, Result};
use crate::rng::{derive_seed, stream, streams};
use crate::vib::{InputNorm, Model, ModelConfig, Variant};

pub const REPORT_FILE: &str = "report.json";
pub const TIMING_FILE: &str = "timing.json";

/// Cases per forward pass when only evaluating.
const EVAL_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 16,
            max_epochs: 300,
            patience: 20,
            val_fraction: 0.15,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(CoreError::config(format!(
                "val_fraction {} outside (0, 1)",
                self.val_fraction
            )));
        }
        if self.patience == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(CoreError::config(
                "patience, batch_size and max_epochs must be at least 1",
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(CoreError::config("lr must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub variant: Variant,
    pub seed: u64,
    pub train_cases: Vec<usize>,
    pub val_cases: Vec<usize>,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    /// Kept out of `report.json` so reruns give identical files; written to
    /// `timing.json` instead.
    #[serde(skip)]
    pub wall_time_s: f64,
    pub checkpoint: Option<PathBuf>,
}

/// Seeded train/validation split of `n` cases. With a single case it is used
/// for both.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, streams::SPLIT));
    let n_val = ((n as f64 * val_fraction).round() as usize).min(n.saturating_sub(1));
    if n_val == 0 {
        return (idx.clone(), idx);
    }
    let val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    train.sort_unstable();
    let mut val = val;
    val.sort_unstable();
    (train, val)
}

fn pairs<'a>(cases: &[&'a Case]) -> (Vec<&'a TmpSequence>, Vec<&'a EcgSequence>) {
    cases.iter().map(|c| (&c.x, &c.y)).unzip()
}

/// Mean per-case objective with no parameter updates. Stochastic models use
/// ε draws from a stream fixed by `eps_seed`, so repeated calls agree.
pub fn evaluate_loss(cases: &[&Case], model: &Model, eps_seed: u64) -> Result<f64> {
    if cases.is_empty() {
        return Err(CoreError::EmptySplit("evaluation".into()));
    }
    let mut rng = stream(eps_seed, streams::EVAL_EPSILON);
    let mut total = 0.0;
    for chunk in cases.chunks(EVAL_CHUNK) {
        let (xs, ys) = pairs(chunk);
        let batch = model.batch(&ys, Some(&xs))?;
        let eps = model.draw_eps(&mut rng, chunk.len());
        let mut tape = Tape::new();
        let l = model.loss_vars(&mut tape, &batch, &eps)?;
        total += tape.value(l).item().expect("scalar") * chunk.len() as f64;
    }
    Ok(total / cases.len() as f64)
}

pub fn train(
    cases: &[&Case],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(Model, TrainReport)> {
    train_with_progress(cases, model_cfg, cfg, |_, _, _| {})
}

/// As [`train`], calling `progress(epoch, train_loss, val_loss)` after every
/// epoch.
pub fn train_with_progress<F>(
    cases: &[&Case],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut progress: F,
) -> Result<(Model, TrainReport)>
where
    F: FnMut(usize, f64, f64),
{
    cfg.validate()?;
    model_cfg.validate()?;
    if cases.is_empty() {
        return Err(CoreError::EmptySplit("training".into()));
    }
    let start = Instant::now();
    let (train_idx, val_idx) = split_indices(cases.len(), cfg.val_fraction, cfg.seed);
    let train_set: Vec<&Case> = train_idx.iter().map(|&i| cases[i]).collect();
    let val_set: Vec<&Case> = val_idx.iter().map(|&i| cases[i]).collect();

    let norm = InputNorm::fit(&train_set.iter().map(|c| &c.y).collect::<Vec<_>>())?;
    let mut model = Model::new(model_cfg.clone(), norm, cfg.seed)?;
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut shuffle_rng = stream(cfg.seed, streams::SHUFFLE);
    let mut eps_rng = stream(cfg.seed, streams::EPSILON);
    let eval_seed = derive_seed(cfg.seed, streams::EVAL_EPSILON);

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut train_loss = Vec::new();
    let mut val_loss = Vec::new();
    let mut best = (0, f64::INFINITY, model.store.snapshot());
    let mut stopped_early = false;
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sum = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch_cases: Vec<&Case> = chunk.iter().map(|&i| train_set[i]).collect();
            let (xs, ys) = pairs(&batch_cases);
            let batch = model.batch(&ys, Some(&xs))?;
            let eps = model.draw_eps(&mut eps_rng, chunk.len());
            let mut tape = Tape::new();
            let loss = model.loss_vars(&mut tape, &batch, &eps)?;
            let value = tape.value(loss).item().expect("scalar");
            if !value.is_finite() {
                return Err(CoreError::NonFiniteLoss { epoch, batch: bi });
            }
            sum += value * chunk.len() as f64;
            tape.backward(loss, &mut model.store)?;
            model.store.adam_step(&adam)?;
        }
        let tl = sum / train_set.len() as f64;
        let vl = evaluate_loss(&val_set, &model, eval_seed)?;
        if !vl.is_finite() {
            return Err(CoreError::NonFiniteLoss { epoch, batch: 0 });
        }
        train_loss.push(tl);
        val_loss.push(vl);
        progress(epoch, tl, vl);
        if vl < best.1 {
            best = (epoch, vl, model.store.snapshot());
        } else if epoch - best.0 >= cfg.patience {
            stopped_early = true;
            break;
        }
    }
    model.store.restore(&best.2)?;
    model.store.round_to_f32();
    let report = TrainReport {
        variant: model_cfg.variant(),
        seed: cfg.seed,
        train_cases: train_idx.iter().map(|&i| cases[i].id).collect(),
        val_cases: val_idx.iter().map(|&i| cases[i].id).collect(),
        train_loss,
        val_loss,
        best_epoch: best.0,
        best_val_loss: best.1,
        stopped_early,
        wall_time_s: start.elapsed().as_secs_f64(),
        checkpoint: None,
    };
    Ok((model, report))
}

/// Writes the checkpoint, `report.json` and `timing.json` into `dir`.
pub fn save_run(dir: &Path, model: &Model, report: &mut TrainReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    model.save(dir)?;
    report.checkpoint = Some(PathBuf::from("."));
    let mut json = serde_json::to_vec_pretty(report)?;
    json.push(b'\n');
    fs::write(dir.join(REPORT_FILE), json)?;
    let timing = serde_json::json!({ "wall_time_s": report.wall_time_s });
    fs::write(dir.join(TIMING_FILE), format!("{timing:#}\n"))?;
    Ok(())
}
