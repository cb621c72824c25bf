mod common;

use proptest::prelude::*;
use tmpib_core::apsim::{
    add_noise, project, sample_case, simulate_tmp, DifficultyTag, EcgSequence, SimConfig,
    TmpSequence,
};
use tmpib_core::eval::{activation_time, dice, durations, mask_to_set, scar_from_tmp, ScarRule};
use tmpib_core::geometry::{
    build_forward_operator, build_grid, kernel_matrix, normalize_rows, rotate_z, Geometry,
    TissueMap,
};
use tmpib_tensor::Tensor;

use common::{peak, rel_frobenius, single_cell_rk4};

fn grid8() -> Geometry {
    build_grid(8, 8, 16, 12.0).unwrap()
}

fn single_cell(a: f64, amp: f64) -> Vec<f64> {
    let g = Geometry::single_node(2.0).unwrap();
    let cfg = SimConfig {
        stim_amplitude: amp,
        ..SimConfig::default()
    };
    let tissue = TissueMap {
        excitability: vec![a],
        scar_mask: vec![false],
        scar: None,
    };
    simulate_tmp(&g, &tissue, 0, &cfg)
        .unwrap()
        .trace(0)
        .to_vec()
}

#[test]
fn single_cell_matches_fine_reference() {
    let cfg = SimConfig::default();
    let ours = single_cell(cfg.a_healthy, cfg.stim_amplitude);
    let frame = cfg.dt * cfg.subsample as f64;
    let reference = single_cell_rk4(
        &cfg,
        cfg.a_healthy,
        cfg.stim_amplitude,
        cfg.dt / 10.0,
        frame,
    );
    assert_eq!(ours.len(), reference.len());
    assert!(peak(&ours) >= 0.95, "peak {}", peak(&ours));
    assert!((peak(&ours) - peak(&reference)).abs() / peak(&reference) < 0.02);
    assert!(rel_frobenius(&ours, &reference) < 0.02);
    assert!(*ours.last().unwrap() < 0.1);
}

/// Smallest stimulus amplitude, to 1%, that fires a healthy cell.
fn healthy_threshold() -> f64 {
    let fires = |amp: f64| peak(&single_cell(0.15, amp)) > 0.5;
    let (mut lo, mut hi) = (0.0, 1.0);
    assert!(fires(hi));
    while hi - lo > 0.01 {
        let mid = 0.5 * (lo + hi);
        if fires(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

#[test]
fn scar_cell_stays_quiet_at_healthy_threshold() {
    let amp = healthy_threshold() * 1.05;
    assert!(peak(&single_cell(0.15, amp)) > 0.9);
    let scar = single_cell(0.5, amp);
    assert!(peak(&scar) < 0.3, "scar peak {}", peak(&scar));
    let cfg = SimConfig {
        stim_amplitude: amp,
        ..SimConfig::default()
    };
    let reference = single_cell_rk4(&cfg, 0.5, amp, cfg.dt / 10.0, cfg.dt * cfg.subsample as f64);
    assert!(peak(&reference) < 0.3);
}

#[test]
fn activation_spreads_outward_from_corner() {
    let g = grid8();
    let x = simulate_tmp(&g, &TissueMap::healthy(&g, 0.15), 0, &SimConfig::default()).unwrap();
    let at = activation_time(&x);
    assert_eq!(at.flat_count(), 0);
    // Every lattice step away from the stimulus corner activates no earlier.
    for i in 0..8 {
        for j in 0..8 {
            let here = at.times[g.node(i, j)];
            for (ni, nj) in [(i + 1, j), (i, j + 1)] {
                if ni < 8 && nj < 8 {
                    let next = at.times[g.node(ni, nj)];
                    assert!(here <= next, "({i},{j}) at {here}, ({ni},{nj}) at {next}");
                }
            }
        }
    }
    assert!(at.times[g.node(7, 7)] > at.times[0]);
}

#[test]
fn scar_shortens_duration() {
    let g = grid8();
    let cfg = SimConfig::default();
    for seed in 0..5 {
        let (tissue, exc, _) = sample_case(seed, DifficultyTag::Train, &g).unwrap();
        let x = simulate_tmp(&g, &tissue, exc, &cfg).unwrap();
        let d = durations(&x, 0.5);
        let mean = |inside: bool| {
            let v: Vec<f64> = (0..d.len())
                .filter(|&n| tissue.scar_mask[n] == inside)
                .map(|n| d[n] as f64)
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean(true) < 0.25 * mean(false), "seed {seed}");
        let found = scar_from_tmp(&x, &ScarRule::default());
        assert!(
            dice(&found, &mask_to_set(&tissue.scar_mask)) >= 0.8,
            "seed {seed}"
        );
    }
}

#[test]
fn halving_dt_changes_little() {
    let g = grid8();
    let (tissue, exc, _) = sample_case(3, DifficultyTag::Train, &g).unwrap();
    let cfg = SimConfig::default();
    let coarse = simulate_tmp(&g, &tissue, exc, &cfg).unwrap();
    let fine = simulate_tmp(&g, &tissue, exc, &cfg.refined(2)).unwrap();
    let r = rel_frobenius(coarse.values.data(), fine.values.data());
    assert!(r < 0.02, "relative change {r}");
}

#[test]
fn time_reversed_reconstruction_anticorrelates() {
    let g = grid8();
    let x = simulate_tmp(&g, &TissueMap::healthy(&g, 0.15), 0, &SimConfig::default()).unwrap();
    let (u, t) = x.values.dims().unwrap();
    let rev: Vec<f64> = (0..u)
        .flat_map(|n| x.trace(n).iter().rev().copied().collect::<Vec<_>>())
        .collect();
    let xr = TmpSequence::new(Tensor::matrix(u, t, rev).unwrap()).unwrap();
    let r = tmpib_core::eval::at_corr(&x, &xr).unwrap();
    assert!(r < -0.5, "at_corr {r}");
    assert_eq!(tmpib_core::eval::at_corr(&x, &x).unwrap(), 1.0);
}

#[test]
fn kernel_shrinks_with_ring_radius() {
    let near = build_grid(6, 6, 8, 10.0).unwrap();
    let far = build_grid(6, 6, 8, 14.0).unwrap();
    let kn = kernel_matrix(&near.leads, &near.heart_nodes);
    let kf = kernel_matrix(&far.leads, &far.heart_nodes);
    assert!(kn.data().iter().zip(kf.data()).all(|(a, b)| b < a));
}

#[test]
fn rotation_perturbs_every_operator() {
    let g = grid8();
    let h0 = build_forward_operator(&g, 0.0).unwrap();
    assert_eq!(h0, build_forward_operator(&g, 0.0).unwrap());
    for deg in [-20.0, -1.0, 1.0, 15.0] {
        let h = build_forward_operator(&g, deg).unwrap();
        assert_eq!(h.h.shape(), h0.h.shape());
        assert!(h.h.data().iter().zip(h0.h.data()).any(|(a, b)| a != b));
    }
}

#[test]
fn empirical_snr_at_40_db() {
    let data: Vec<f64> = (0..16 * 1000)
        .map(|i| ((i as f64) * 0.37).sin() + 0.2)
        .collect();
    let y = EcgSequence {
        values: Tensor::matrix(16, 1000, data).unwrap(),
        snr_db: None,
    };
    let noisy = add_noise(&y, 40.0, 9).unwrap();
    let sig: f64 = y.values.data().iter().map(|v| v * v).sum();
    let noise: f64 = noisy
        .values
        .data()
        .iter()
        .zip(y.values.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    let snr = 10.0 * (sig / noise).log10();
    assert!((snr - 40.0).abs() < 0.5, "snr {snr}");
    assert_eq!(noisy.snr_db, Some(40.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn projection_is_linear(alpha in -3.0f64..3.0, seed in 0u64..1000, deg in -20.0f64..20.0) {
        let g = build_grid(4, 4, 6, 8.0).unwrap();
        let h = build_forward_operator(&g, deg).unwrap();
        let mk = |s: u64| {
            let data = (0..16 * 5).map(|i| (((i as u64 * 31 + s * 17) % 97) as f64) / 97.0).collect();
            TmpSequence::new(Tensor::matrix(16, 5, data).unwrap()).unwrap()
        };
        let (x1, x2) = (mk(seed), mk(seed + 1));
        let combo = TmpSequence::new(x1.values.map(|v| alpha * v)).unwrap();
        let mut sum = combo.values.clone();
        for (s, b) in sum.data_mut().iter_mut().zip(x2.values.data()) {
            *s += b;
        }
        let lhs = project(&h, &TmpSequence::new(sum).unwrap()).unwrap();
        let y1 = project(&h, &x1).unwrap();
        let y2 = project(&h, &x2).unwrap();
        for ((l, a), b) in lhs.values.data().iter().zip(y1.values.data()).zip(y2.values.data()) {
            prop_assert!((l - (alpha * a + b)).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_field_is_preserved(c in -5.0f64..5.0, deg in -45.0f64..45.0) {
        let g = grid8();
        let h = build_forward_operator(&g, deg).unwrap();
        let x = TmpSequence::new(Tensor::full(&[64, 3], c)).unwrap();
        let y = project(&h, &x).unwrap();
        prop_assert!(y.values.data().iter().all(|v| (v - c).abs() < 1e-12));
        prop_assert!(h.h.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn rotation_round_trip(deg in -45.0f64..45.0) {
        let g = grid8();
        let back = rotate_z(&rotate_z(&g.heart_nodes, deg), -deg);
        let h = normalize_rows(kernel_matrix(&g.leads, &back));
        let h0 = build_forward_operator(&g, 0.0).unwrap();
        for (a, b) in h.data().iter().zip(h0.h.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn noise_power_tracks_request(snr in 10.0f64..60.0, seed in 0u64..1000) {
        let y = EcgSequence {
            values: Tensor::full(&[10, 1000], 1.0),
            snr_db: None,
        };
        let noisy = add_noise(&y, snr, seed).unwrap();
        let noise: f64 = noisy.values.data().iter().map(|v| (v - 1.0).powi(2)).sum::<f64>() / 1e4;
        let got = 10.0 * (1.0 / noise).log10();
        prop_assert!((got - snr).abs() < 0.5);
    }
}
