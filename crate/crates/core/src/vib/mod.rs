//! The four sequence encoder-decoder variants and their training objectives.
//!
//! `svs` compresses every encoder hidden state through two ReLU layers and
//! expands the latent code through two more before the decoder LSTM. `svs-L`
//! keeps only the last encoder hidden state and seeds the decoder state from
//! the latent code. Each comes in a stochastic form (Gaussian latent with
//! learned variance, Gaussian output with learned variance) and a
//! deterministic form (point latent, squared-error loss).

mod model;

pub use model::{ib_objective, Batch, InputNorm, LatentVars, Model, OutputVars};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use tmpib_tensor::Tensor;

use crate::apsim::TmpSequence;
use crate::error::{CoreError, Result};

/// Log-variances are clamped to this range before exponentiation.
pub const LOGVAR_CLAMP: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arch {
    #[serde(rename = "svs")]
    Svs,
    #[serde(rename = "svs-L")]
    SvsL,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Svs => "svs",
            Self::SvsL => "svs-L",
        })
    }
}

/// Architecture plus stochastic/deterministic choice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Variant {
    pub arch: Arch,
    pub stochastic: bool,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::new(Arch::Svs, true),
        Variant::new(Arch::Svs, false),
        Variant::new(Arch::SvsL, true),
        Variant::new(Arch::SvsL, false),
    ];

    pub const fn new(arch: Arch, stochastic: bool) -> Self {
        Self { arch, stochastic }
    }

    /// The same architecture with the other latent type.
    pub fn counterpart(self) -> Self {
        Self::new(self.arch, !self.stochastic)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = if self.stochastic {
            "stochastic"
        } else {
            "deterministic"
        };
        write!(f, "{}-{kind}", self.arch)
    }
}

impl FromStr for Variant {
    type Err = CoreError;

    /// Accepts `svs-stochastic`, `svs-L-det`, `svs-l-stoch` and similar.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        let (arch, kind) = if let Some(rest) = lower.strip_prefix("svs-l-") {
            (Arch::SvsL, rest)
        } else if let Some(rest) = lower.strip_prefix("svs-") {
            (Arch::Svs, rest)
        } else {
            return Err(CoreError::config(format!("unknown variant `{s}`")));
        };
        let stochastic = match kind {
            "stoch" | "stochastic" => true,
            "det" | "deterministic" => false,
            _ => return Err(CoreError::config(format!("unknown variant `{s}`"))),
        };
        Ok(Self::new(arch, stochastic))
    }
}

impl TryFrom<String> for Variant {
    type Error = CoreError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> String {
        v.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub stochastic: bool,
    pub latent_dim: usize,
    pub enc_hidden: usize,
    pub dec_hidden: usize,
    /// Width of the `svs` fully connected layers.
    pub fc_hidden: usize,
    /// Per-step input width of the `svs` decoder LSTM.
    pub dec_input: usize,
    pub beta: f64,
    pub n_mc: usize,
    /// Leads.
    pub m: usize,
    /// Heart nodes.
    pub u: usize,
    /// Frames.
    pub t: usize,
}

impl ModelConfig {
    pub fn new(variant: Variant, m: usize, u: usize, t: usize) -> Self {
        Self {
            arch: variant.arch,
            stochastic: variant.stochastic,
            latent_dim: 16,
            enc_hidden: 64,
            dec_hidden: 64,
            fc_hidden: 128,
            dec_input: 4,
            beta: 10.0,
            n_mc: 1,
            m,
            u,
            t,
        }
    }

    pub fn variant(&self) -> Variant {
        Variant::new(self.arch, self.stochastic)
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("latent_dim", self.latent_dim),
            ("enc_hidden", self.enc_hidden),
            ("dec_hidden", self.dec_hidden),
            ("fc_hidden", self.fc_hidden),
            ("dec_input", self.dec_input),
            ("n_mc", self.n_mc),
            ("M", self.m),
            ("U", self.u),
            ("T", self.t),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(CoreError::config(format!("{name} must be at least 1")));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(CoreError::config(format!(
                "beta must be finite and nonnegative, got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

/// Encoder output for one example.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGaussian {
    pub t: Vec<f64>,
    pub sigma_t: Vec<f64>,
}

impl LatentGaussian {
    pub fn is_deterministic(&self) -> bool {
        self.sigma_t.iter().all(|&s| s == 0.0)
    }
}

/// Decoder output for one example, both `U×T`.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputGaussian {
    pub g: Tensor,
    pub sigma_x2: Tensor,
}

pub fn sample_latent(lat: &LatentGaussian, eps: &[f64]) -> Result<Vec<f64>> {
    if eps.len() != lat.t.len() || lat.sigma_t.len() != lat.t.len() {
        return Err(CoreError::shape(
            "sample_latent",
            format!("latent has {} dims, eps has {}", lat.t.len(), eps.len()),
        ));
    }
    Ok(lat
        .t
        .iter()
        .zip(&lat.sigma_t)
        .zip(eps)
        .map(|((t, s), e)| t + s * e)
        .collect())
}

/// `KL(N(t, σ²) ‖ N(0, I))`, summed over latent dimensions.
pub fn kl_to_standard_normal(lat: &LatentGaussian) -> Result<f64> {
    if lat.sigma_t.iter().any(|&s| !(s > 0.0)) {
        return Err(CoreError::Contract(
            "KL needs a strictly positive latent standard deviation".into(),
        ));
    }
    Ok(lat
        .t
        .iter()
        .zip(&lat.sigma_t)
        .map(|(t, s)| {
            let v = s * s;
            0.5 * (v + t * t - 1.0 - v.ln())
        })
        .sum())
}

/// `Σ (x − g)² / σ² + ln σ²` over every entry.
pub fn nll_term(x: &TmpSequence, out: &OutputGaussian) -> Result<f64> {
    let shape = x.values.shape();
    if out.g.shape() != shape || out.sigma_x2.shape() != shape {
        return Err(CoreError::shape(
            "nll_term",
            format!(
                "x {:?}, g {:?}, sigma_x2 {:?}",
                shape,
                out.g.shape(),
                out.sigma_x2.shape()
            ),
        ));
    }
    Ok(x.values
        .data()
        .iter()
        .zip(out.g.data())
        .zip(out.sigma_x2.data())
        .map(|((x, g), v)| (x - g).powi(2) / v + v.ln())
        .sum())
}

/// Squared Frobenius distance `‖x − g‖²`.
pub fn frobenius_sq(x: &Tensor, g: &Tensor) -> Result<f64> {
    if x.shape() != g.shape() {
        return Err(CoreError::shape(
            "frobenius_sq",
            format!("{:?} vs {:?}", x.shape(), g.shape()),
        ));
    }
    Ok(x.data()
        .iter()
        .zip(g.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum())
}
