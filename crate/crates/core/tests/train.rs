use tmpib_core::apsim::{
    Case, Dataset, DatasetSpec, DifficultyTag, PlanEntry, PoolConfig, SimConfig,
};
use tmpib_core::geometry::GridSpec;
use tmpib_core::train::{evaluate_loss, save_run, train, TrainConfig};
use tmpib_core::vib::{Arch, Model, ModelConfig, Variant};

fn dataset(n: usize) -> Dataset {
    let spec = DatasetSpec {
        grid: GridSpec::default(),
        sim: SimConfig {
            n_steps: 3200,
            ..SimConfig::default()
        },
        pools: PoolConfig::for_grid(8, 8),
        snr_db: 40.0,
        base_seed: 11,
        plan: vec![PlanEntry::new(DifficultyTag::Train, n, 0.0)],
    };
    Dataset::in_memory(&spec).unwrap()
}

fn tiny(variant: Variant, ds: &Dataset) -> ModelConfig {
    let (u, m, t) = ds.dims();
    ModelConfig {
        latent_dim: 4,
        enc_hidden: 12,
        dec_hidden: 12,
        fc_hidden: 16,
        ..ModelConfig::new(variant, m, u, t)
    }
}

#[test]
fn memorizes_a_single_case() {
    let ds = dataset(1);
    let cases: Vec<&Case> = ds.cases.iter().collect();
    let cfg = TrainConfig {
        lr: 1e-2,
        batch_size: 1,
        max_epochs: 200,
        patience: 200,
        seed: 1,
        ..TrainConfig::default()
    };
    let (model, report) = train(&cases, &tiny(Variant::new(Arch::Svs, false), &ds), &cfg).unwrap();
    let first = report.train_loss[0];
    assert!(
        report.best_val_loss < 0.01 * first,
        "{} vs {first}",
        report.best_val_loss
    );
    let again = evaluate_loss(&cases, &model, 0).unwrap();
    assert!((again - report.best_val_loss).abs() < 1e-3 * first);
}

#[test]
fn training_is_deterministic() {
    let ds = dataset(8);
    let cases: Vec<&Case> = ds.cases.iter().collect();
    let cfg = TrainConfig {
        batch_size: 4,
        max_epochs: 4,
        seed: 9,
        ..TrainConfig::default()
    };
    let mc = tiny(Variant::new(Arch::SvsL, true), &ds);
    let (m1, mut r1) = train(&cases, &mc, &cfg).unwrap();
    let (m2, mut r2) = train(&cases, &mc, &cfg).unwrap();
    assert_eq!(r1.train_loss, r2.train_loss);
    assert_eq!(r1.val_loss, r2.val_loss);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    save_run(a.path(), &m1, &mut r1).unwrap();
    save_run(b.path(), &m2, &mut r2).unwrap();
    for f in ["model.json", "params.bin", "report.json"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
    let back = Model::load(a.path()).unwrap();
    assert_eq!(
        evaluate_loss(&cases, &back, 2).unwrap(),
        evaluate_loss(&cases, &m1, 2).unwrap()
    );
}

#[test]
fn patience_stops_at_a_plateau() {
    let ds = dataset(6);
    let cases: Vec<&Case> = ds.cases.iter().collect();
    let cfg = TrainConfig {
        lr: 0.5,
        batch_size: 2,
        max_epochs: 60,
        patience: 1,
        seed: 2,
        ..TrainConfig::default()
    };
    let (_, report) = train(&cases, &tiny(Variant::new(Arch::Svs, false), &ds), &cfg).unwrap();
    assert!(report.stopped_early);
    assert!(report.val_loss.len() < 60);
    let best = report
        .val_loss
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    assert_eq!(best, report.best_val_loss);
    assert_eq!(report.val_loss[report.best_epoch], best);
}

#[test]
fn split_cases_are_disjoint_ids() {
    let ds = dataset(10);
    let cases: Vec<&Case> = ds.cases.iter().collect();
    let cfg = TrainConfig {
        max_epochs: 1,
        seed: 4,
        ..TrainConfig::default()
    };
    let (_, r) = train(&cases, &tiny(Variant::new(Arch::Svs, true), &ds), &cfg).unwrap();
    assert_eq!(r.train_cases.len() + r.val_cases.len(), 10);
    assert!(r.val_cases.iter().all(|id| !r.train_cases.contains(id)));
}

#[test]
fn empty_training_set_is_rejected() {
    let ds = dataset(1);
    let cfg = TrainConfig::default();
    assert!(train(&[], &tiny(Variant::new(Arch::Svs, true), &ds), &cfg).is_err());
}
