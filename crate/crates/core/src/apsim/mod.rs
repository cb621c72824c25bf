//! Aliev-Panfilov tissue simulation on the lattice heart, projection to the
//! leads, measurement noise and dataset generation.

mod cases;
mod dataset;

pub use cases::{sample_case, Block, CaseMeta, CaseSampler, DifficultyTag, PoolConfig, Pools};
pub use dataset::{
    case_file_name, generate_case, generate_dataset, read_case, simulate_cases, write_case, Case,
    Dataset, DatasetSpec, Dims, Manifest, ManifestCase, PlanEntry, CASE_MAGIC,
    DATASET_FORMAT_VERSION, MANIFEST_FILE,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use tmpib_tensor::{matmul, Tensor};

use crate::error::{CoreError, Result};
use crate::geometry::{ForwardOperator, Geometry, TissueMap};

/// Any `|u|` above this aborts the integration.
pub const BLOWUP_LIMIT: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub k: f64,
    pub a_healthy: f64,
    pub a_scar: f64,
    pub eps0: f64,
    pub mu1: f64,
    pub mu2: f64,
    #[serde(rename = "D")]
    pub d: f64,
    pub dt: f64,
    pub n_steps: usize,
    pub subsample: usize,
    pub stim_amplitude: f64,
    pub stim_duration_steps: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            k: 8.0,
            a_healthy: 0.15,
            a_scar: 0.5,
            eps0: 0.002,
            mu1: 0.2,
            mu2: 0.3,
            d: 0.1,
            dt: 0.0125,
            n_steps: 12800,
            subsample: 200,
            stim_amplitude: 1.0,
            stim_duration_steps: 160,
        }
    }
}

impl SimConfig {
    /// Output frame count.
    pub fn frames(&self) -> usize {
        self.n_steps / self.subsample.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt <= 0.05) {
            return Err(CoreError::config(format!(
                "dt = {} outside (0, 0.05]",
                self.dt
            )));
        }
        if self.subsample == 0 || self.n_steps % self.subsample != 0 {
            return Err(CoreError::config(format!(
                "subsample {} must be ≥ 1 and divide n_steps {}",
                self.subsample, self.n_steps
            )));
        }
        if self.frames() < 2 {
            return Err(CoreError::config("fewer than 2 output frames"));
        }
        if !(self.a_scar > self.a_healthy) {
            return Err(CoreError::config("a_scar must exceed a_healthy"));
        }
        let params = [
            self.k,
            self.a_healthy,
            self.eps0,
            self.mu1,
            self.mu2,
            self.d,
            self.stim_amplitude,
        ];
        if params.iter().any(|p| !p.is_finite() || *p < 0.0) || self.mu2 == 0.0 {
            return Err(CoreError::config(
                "model parameters must be finite and nonnegative, mu2 positive",
            ));
        }
        Ok(())
    }

    /// Same physical run with the time step divided by `factor`.
    pub fn refined(&self, factor: usize) -> Self {
        Self {
            dt: self.dt / factor as f64,
            n_steps: self.n_steps * factor,
            subsample: self.subsample * factor,
            stim_duration_steps: self.stim_duration_steps * factor,
            ..*self
        }
    }
}

/// `U×T` transmembrane potential; row `j` is node `j`'s trace.
#[derive(Clone, Debug, PartialEq)]
pub struct TmpSequence {
    pub values: Tensor,
}

impl TmpSequence {
    pub fn new(values: Tensor) -> Result<Self> {
        values.dims()?;
        if !values.is_finite() {
            return Err(CoreError::undefined("TmpSequence", "non-finite entries"));
        }
        Ok(Self { values })
    }

    pub fn nodes(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn trace(&self, node: usize) -> &[f64] {
        let t = self.frames();
        &self.values.data()[node * t..(node + 1) * t]
    }
}

/// `M×T` lead potentials.
#[derive(Clone, Debug, PartialEq)]
pub struct EcgSequence {
    pub values: Tensor,
    pub snr_db: Option<f64>,
}

impl EcgSequence {
    pub fn leads(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[1]
    }
}

pub fn simulate_tmp(
    geom: &Geometry,
    tissue: &TissueMap,
    exc_node: usize,
    cfg: &SimConfig,
) -> Result<TmpSequence> {
    cfg.validate()?;
    let u_n = geom.num_nodes();
    if tissue.excitability.len() != u_n || tissue.scar_mask.len() != u_n {
        return Err(CoreError::shape(
            "simulate_tmp",
            format!("tissue map does not cover {u_n} nodes"),
        ));
    }
    if exc_node >= u_n {
        return Err(CoreError::config(format!(
            "stimulus node {exc_node} out of range"
        )));
    }
    if tissue.scar_mask[exc_node] {
        return Err(CoreError::config(format!(
            "stimulus node {exc_node} lies inside the scar"
        )));
    }

    let t_out = cfg.frames();
    let mut out = vec![0.0; u_n * t_out];
    let mut u = vec![0.0; u_n];
    let mut v = vec![0.0; u_n];
    let mut du = vec![0.0; u_n];
    let a = &tissue.excitability;
    for step in 0..cfg.n_steps {
        for n in 0..u_n {
            let lap: f64 = geom.adjacency[n].iter().map(|&m| u[m] - u[n]).sum();
            du[n] = cfg.d * lap - cfg.k * u[n] * (u[n] - a[n]) * (u[n] - 1.0) - u[n] * v[n];
        }
        if step < cfg.stim_duration_steps {
            du[exc_node] += cfg.stim_amplitude;
        }
        for n in 0..u_n {
            let (un, vn) = (u[n], v[n]);
            let dv =
                (cfg.eps0 + cfg.mu1 * vn / (un + cfg.mu2)) * (-vn - cfg.k * un * (un - a[n] - 1.0));
            u[n] = un + cfg.dt * du[n];
            v[n] = vn + cfg.dt * dv;
            if !(u[n].abs() <= BLOWUP_LIMIT) {
                return Err(CoreError::Stability {
                    step,
                    node: n,
                    value: u[n],
                });
            }
        }
        if (step + 1) % cfg.subsample == 0 {
            let f = (step + 1) / cfg.subsample - 1;
            for n in 0..u_n {
                out[n * t_out + f] = u[n];
            }
        }
    }
    TmpSequence::new(Tensor::matrix(u_n, t_out, out)?)
}

pub fn project(h: &ForwardOperator, x: &TmpSequence) -> Result<EcgSequence> {
    if h.num_nodes() != x.nodes() {
        return Err(CoreError::shape(
            "project",
            format!("H has {} columns, x has {} rows", h.num_nodes(), x.nodes()),
        ));
    }
    Ok(EcgSequence {
        values: matmul(&h.h, &x.values)?,
        snr_db: None,
    })
}

/// Adds white Gaussian noise at the requested SNR relative to the mean signal
/// power of `y`.
pub fn add_noise(y: &EcgSequence, snr_db: f64, seed: u64) -> Result<EcgSequence> {
    if !snr_db.is_finite() {
        return Err(CoreError::config(format!(
            "snr_db must be finite, got {snr_db}"
        )));
    }
    if !y.values.is_finite() {
        return Err(CoreError::undefined("add_noise", "non-finite signal"));
    }
    let n = y.values.len();
    let power = y.values.data().iter().map(|v| v * v).sum::<f64>() / n as f64;
    if power == 0.0 {
        return Err(CoreError::undefined(
            "add_noise",
            "SNR of an all-zero signal",
        ));
    }
    let sd = (power * 10f64.powf(-snr_db / 10.0)).sqrt();
    let normal = Normal::new(0.0, sd).expect("finite positive sd");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = y.values.clone();
    for v in values.data_mut() {
        *v += normal.sample(&mut rng);
    }
    Ok(EcgSequence {
        values,
        snr_db: Some(snr_db),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_forward_operator, build_grid};

    fn grid8() -> Geometry {
        build_grid(8, 8, 16, 12.0).unwrap()
    }

    #[test]
    fn zero_stimulus_is_a_fixed_point() {
        let g = grid8();
        let cfg = SimConfig {
            stim_amplitude: 0.0,
            ..SimConfig::default()
        };
        let x = simulate_tmp(&g, &TissueMap::healthy(&g, 0.15), 0, &cfg).unwrap();
        assert!(x.values.data().iter().all(|&u| u == 0.0));
    }

    #[test]
    fn output_shape_and_range() {
        let g = grid8();
        let cfg = SimConfig::default();
        let x = simulate_tmp(&g, &TissueMap::healthy(&g, 0.15), 9, &cfg).unwrap();
        assert_eq!(x.values.shape(), &[64, cfg.frames()]);
        let max = x.values.data().iter().cloned().fold(f64::MIN, f64::max);
        let min = x.values.data().iter().cloned().fold(f64::MAX, f64::min);
        assert!(max > 0.9 && max <= 1.05, "max {max}");
        assert!(min > -0.05, "min {min}");
    }

    #[test]
    fn stimulus_inside_scar_rejected() {
        let g = grid8();
        let t = TissueMap::with_scar(&g, 27, 1, 0.15, 0.5).unwrap();
        assert!(matches!(
            simulate_tmp(&g, &t, 27, &SimConfig::default()),
            Err(CoreError::Config(_))
        ));
    }

    #[test]
    fn blow_up_reports_step() {
        let g = grid8();
        let cfg = SimConfig {
            stim_amplitude: 1000.0,
            ..SimConfig::default()
        };
        match simulate_tmp(&g, &TissueMap::healthy(&g, 0.15), 0, &cfg) {
            Err(CoreError::Stability { step, node, .. }) => {
                assert_eq!((step, node), (0, 0));
            }
            other => panic!("expected stability error, got {other:?}"),
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let base = SimConfig::default();
        for cfg in [
            SimConfig { dt: 0.06, ..base },
            SimConfig {
                subsample: 0,
                ..base
            },
            SimConfig {
                subsample: 7,
                ..base
            },
            SimConfig {
                n_steps: 200,
                ..base
            },
            SimConfig {
                a_scar: 0.1,
                ..base
            },
        ] {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn refined_keeps_physical_time() {
        let c = SimConfig::default();
        let r = c.refined(2);
        assert_eq!(r.frames(), c.frames());
        assert_eq!(r.dt * r.n_steps as f64, c.dt * c.n_steps as f64);
    }

    #[test]
    fn uniform_row_projects_to_frame_mean() {
        let x = TmpSequence::new(Tensor::matrix(3, 2, vec![1.0, 4.0, 2.0, 5.0, 3.0, 9.0]).unwrap())
            .unwrap();
        let h = ForwardOperator {
            h: Tensor::matrix(1, 3, vec![1.0 / 3.0; 3]).unwrap(),
            rotation_deg: 0.0,
        };
        let y = project(&h, &x).unwrap();
        assert!((y.values.data()[0] - 2.0).abs() < 1e-15);
        assert!((y.values.data()[1] - 6.0).abs() < 1e-15);
        assert_eq!(y.snr_db, None);
    }

    #[test]
    fn identity_projection() {
        let x = TmpSequence::new(Tensor::matrix(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap()).unwrap();
        let h = ForwardOperator {
            h: Tensor::identity(2),
            rotation_deg: 0.0,
        };
        assert_eq!(project(&h, &x).unwrap().values, x.values);
    }

    #[test]
    fn projection_shape_mismatch() {
        let g = grid8();
        let h = build_forward_operator(&g, 0.0).unwrap();
        let x = TmpSequence::new(Tensor::zeros(&[10, 4])).unwrap();
        assert!(project(&h, &x).is_err());
    }

    #[test]
    fn noise_is_seeded() {
        let y = EcgSequence {
            values: Tensor::full(&[4, 8], 1.0),
            snr_db: None,
        };
        let a = add_noise(&y, 40.0, 7).unwrap();
        let b = add_noise(&y, 40.0, 7).unwrap();
        let c = add_noise(&y, 40.0, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.values, c.values);
        assert_eq!(a.snr_db, Some(40.0));
    }

    #[test]
    fn noise_rejects_degenerate_inputs() {
        let zero = EcgSequence {
            values: Tensor::zeros(&[2, 2]),
            snr_db: None,
        };
        assert!(add_noise(&zero, 40.0, 0).is_err());
        let one = EcgSequence {
            values: Tensor::full(&[2, 2], 1.0),
            snr_db: None,
        };
        assert!(add_noise(&one, f64::INFINITY, 0).is_err());
    }
}
