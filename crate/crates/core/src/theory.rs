//! Generalization diagnostics: the shift gap, finite-difference variation
//! proxies of the loss over latent space, a second-order Taylor probe of the
//! expected stochastic loss, and a closed-form linear-Gaussian bottleneck.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::apsim::{Case, TmpSequence};
use crate::error::{CoreError, Result};
use crate::eval::{at_corr, mse};
use crate::rng::{stream, streams};
use crate::vib::{frobenius_sq, Model};

/// Finite-difference step for every derivative probe.
pub const FD_STEP: f64 = 1e-3;

/// Latent points decoded per forward pass.
const DECODE_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorFn {
    Mse,
    OneMinusAtCorr,
}

impl ErrorFn {
    pub const ALL: [ErrorFn; 2] = [ErrorFn::Mse, ErrorFn::OneMinusAtCorr];

    /// NaN when the error is undefined for this pair.
    pub fn apply(self, x: &TmpSequence, xh: &TmpSequence) -> Result<f64> {
        match self {
            Self::Mse => mse(x, xh),
            Self::OneMinusAtCorr => match at_corr(x, xh) {
                Ok(r) => Ok(1.0 - r),
                Err(CoreError::Undefined { .. }) => Ok(f64::NAN),
                Err(e) => Err(e),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub error_fn: ErrorFn,
    pub val_error: f64,
    /// Mean error on the held-out shifted split, standing in for the
    /// expectation over the shifted distribution.
    pub shifted_error: f64,
    pub gap: f64,
    pub n_val: usize,
    pub n_shifted: usize,
    pub excluded_val: usize,
    pub excluded_shifted: usize,
    pub shifted_error_is_estimate: bool,
}

/// Per-case errors of `model` reconstructions. Undefined errors are NaN.
pub fn case_errors(model: &Model, cases: &[&Case], error_fn: ErrorFn) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(cases.len());
    for chunk in cases.chunks(64) {
        let ys: Vec<_> = chunk.iter().map(|c| &c.y).collect();
        let recon = model.reconstruct_batch(&ys)?;
        for (c, xh) in chunk.iter().zip(&recon) {
            out.push(error_fn.apply(&c.x, xh)?);
        }
    }
    Ok(out)
}

fn finite_mean(v: &[f64], what: &str) -> Result<(f64, usize)> {
    let kept: Vec<f64> = v.iter().copied().filter(|e| e.is_finite()).collect();
    if kept.is_empty() {
        return Err(CoreError::EmptySplit(format!(
            "{what} split has no defined errors"
        )));
    }
    Ok((
        kept.iter().sum::<f64>() / kept.len() as f64,
        v.len() - kept.len(),
    ))
}

/// Gap from precomputed per-case errors.
pub fn gap_from_errors(error_fn: ErrorFn, val: &[f64], shifted: &[f64]) -> Result<GapReport> {
    let (val_error, excluded_val) = finite_mean(val, "validation")?;
    let (shifted_error, excluded_shifted) = finite_mean(shifted, "shifted")?;
    Ok(GapReport {
        error_fn,
        val_error,
        shifted_error,
        gap: shifted_error - val_error,
        n_val: val.len(),
        n_shifted: shifted.len(),
        excluded_val,
        excluded_shifted,
        shifted_error_is_estimate: true,
    })
}

pub fn generalization_gap(
    model: &Model,
    val: &[&Case],
    shifted: &[&Case],
    error_fn: ErrorFn,
) -> Result<GapReport> {
    if val.is_empty() || shifted.is_empty() {
        return Err(CoreError::EmptySplit("generalization gap".into()));
    }
    gap_from_errors(
        error_fn,
        &case_errors(model, val, error_fn)?,
        &case_errors(model, shifted, error_fn)?,
    )
}

/// Central finite-difference stencil around one latent point: the point,
/// `±h` along each axis and the four diagonal corners of every axis pair.
#[derive(Clone, Debug)]
pub struct Stencil {
    pub points: Vec<Vec<f64>>,
    dim: usize,
    h: f64,
}

impl Stencil {
    pub fn new(t: &[f64], h: f64) -> Result<Self> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(CoreError::config(format!(
                "FD step must be positive, got {h}"
            )));
        }
        let d = t.len();
        let shifted = |moves: &[(usize, f64)]| {
            let mut p = t.to_vec();
            for &(k, s) in moves {
                p[k] += s * h;
            }
            p
        };
        let mut points = vec![t.to_vec()];
        for k in 0..d {
            points.push(shifted(&[(k, 1.0)]));
            points.push(shifted(&[(k, -1.0)]));
        }
        for k in 0..d {
            for l in k + 1..d {
                for (a, b) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                    points.push(shifted(&[(k, a), (l, b)]));
                }
            }
        }
        Ok(Self { points, dim: d, h })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Gradient and full symmetric Hessian from loss values at `points`.
    pub fn derivatives(&self, f: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let (d, h) = (self.dim, self.h);
        let f0 = f[0];
        let mut grad = vec![0.0; d];
        let mut hess = vec![vec![0.0; d]; d];
        for k in 0..d {
            let (fp, fm) = (f[1 + 2 * k], f[2 + 2 * k]);
            grad[k] = (fp - fm) / (2.0 * h);
            hess[k][k] = (fp - 2.0 * f0 + fm) / (h * h);
        }
        let mut i = 1 + 2 * d;
        for k in 0..d {
            for l in k + 1..d {
                let v = (f[i] - f[i + 1] - f[i + 2] + f[i + 3]) / (4.0 * h * h);
                hess[k][l] = v;
                hess[l][k] = v;
                i += 4;
            }
        }
        (grad, hess)
    }
}

/// A latent point with the encoder spread at that point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub t: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// First- and second-order derivative magnitudes of the loss over latent
/// space, averaged over (probe, evaluation target) pairs.
///
/// `*_sigma` weights each partial by the matching encoder standard
/// deviations at the probe. `*_range` weights by the per-dimension latent
/// range, which is the derivative after mapping the observed latent box onto
/// the unit cube.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationReport {
    pub order1: f64,
    pub order2: f64,
    pub order1_sigma: f64,
    pub order2_sigma: f64,
    pub order1_range: f64,
    pub order2_range: f64,
    pub probes: usize,
    pub pairs: usize,
    pub excluded_probes: usize,
    pub h: f64,
}

fn order1(grad: &[f64], w: &[f64]) -> f64 {
    grad.iter().zip(w).map(|(g, w)| (w * g).abs()).sum()
}

fn order2(hess: &[Vec<f64>], w: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..hess.len() {
        for l in k..hess.len() {
            s += (w[k] * w[l] * hess[k][l]).abs();
        }
    }
    s
}

/// `loss` maps a list of latent points to, for each point, the loss against
/// every evaluation target. The target count must not change between calls.
pub fn variation_proxy<F>(
    probes: &[Probe],
    range: &[f64],
    h: f64,
    mut loss: F,
) -> Result<VariationReport>
where
    F: FnMut(&[Vec<f64>]) -> Result<Vec<Vec<f64>>>,
{
    if probes.is_empty() {
        return Err(CoreError::EmptySplit("variation probes".into()));
    }
    let d = range.len();
    if probes.iter().any(|p| p.t.len() != d || p.sigma.len() != d) {
        return Err(CoreError::shape(
            "variation_proxy",
            format!("probes must have {d} latent dims"),
        ));
    }
    let ones = vec![1.0; d];
    let mut acc = [0.0; 6];
    let mut pairs = 0usize;
    let mut used = 0usize;
    for p in probes {
        let stencil = Stencil::new(&p.t, h)?;
        let values = loss(&stencil.points)?;
        if values.len() != stencil.len() {
            return Err(CoreError::shape(
                "variation_proxy",
                format!(
                    "loss returned {} points for {}",
                    values.len(),
                    stencil.len()
                ),
            ));
        }
        let n_targets = values[0].len();
        let mut local = [0.0; 6];
        let mut finite = n_targets > 0;
        for j in 0..n_targets {
            let f: Vec<f64> = values.iter().map(|v| v[j]).collect();
            let (grad, hess) = stencil.derivatives(&f);
            let terms = [
                order1(&grad, &ones),
                order2(&hess, &ones),
                order1(&grad, &p.sigma),
                order2(&hess, &p.sigma),
                order1(&grad, range),
                order2(&hess, range),
            ];
            if terms.iter().any(|v| !v.is_finite()) {
                finite = false;
                break;
            }
            for (a, v) in local.iter_mut().zip(terms) {
                *a += v;
            }
        }
        if !finite {
            continue;
        }
        for (a, v) in acc.iter_mut().zip(local) {
            *a += v;
        }
        pairs += n_targets;
        used += 1;
    }
    if pairs == 0 {
        return Err(CoreError::undefined(
            "variation_proxy",
            "every probe gave non-finite derivatives",
        ));
    }
    let m = |v: f64| v / pairs as f64;
    Ok(VariationReport {
        order1: m(acc[0]),
        order2: m(acc[1]),
        order1_sigma: m(acc[2]),
        order2_sigma: m(acc[3]),
        order1_range: m(acc[4]),
        order2_range: m(acc[5]),
        probes: used,
        pairs,
        excluded_probes: probes.len() - used,
        h,
    })
}

/// Decodes `points` in chunks and scores each against every target with the
/// squared Frobenius distance.
pub fn decoder_losses(
    model: &Model,
    points: &[Vec<f64>],
    targets: &[&TmpSequence],
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(points.len());
    for chunk in points.chunks(DECODE_CHUNK) {
        for g in model.decode_batch(chunk)? {
            out.push(
                targets
                    .iter()
                    .map(|x| frobenius_sq(&x.values, &g.g))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
    }
    Ok(out)
}

pub fn model_variation(
    model: &Model,
    probes: &[Probe],
    range: &[f64],
    targets: &[&TmpSequence],
    h: f64,
) -> Result<VariationReport> {
    variation_proxy(probes, range, h, |pts| decoder_losses(model, pts, targets))
}

/// Encoder means and spreads of `cases` as probes.
pub fn probes_from_cases(model: &Model, cases: &[&Case]) -> Result<Vec<Probe>> {
    let ys: Vec<_> = cases.iter().map(|c| &c.y).collect();
    Ok(model
        .encode_batch(&ys)?
        .into_iter()
        .map(|l| Probe {
            t: l.t,
            sigma: l.sigma_t,
        })
        .collect())
}

/// Per-dimension `max − min` of the latent means. A dimension with zero
/// spread gets range 0.
pub fn latent_range(probes: &[Probe]) -> Vec<f64> {
    let d = probes.first().map_or(0, |p| p.t.len());
    (0..d)
        .map(|k| {
            let (lo, hi) = probes
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                    (lo.min(p.t[k]), hi.max(p.t[k]))
                });
            hi - lo
        })
        .collect()
}

/// Second-order expansion of `E_ε ℓ(t + σ⊙ε)` against its Monte-Carlo
/// estimate over the same draws.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaylorReport {
    pub order0: f64,
    pub order1: f64,
    pub order2: f64,
    pub monte_carlo: f64,
    /// `|monte_carlo − (order0 + order1 + order2)|`.
    pub residual: f64,
    pub n_mc: usize,
    pub h: f64,
}

/// `n` standard normal vectors of length `d` from the probe stream of `seed`.
pub fn draw_normals(seed: u64, n: usize, d: usize) -> Vec<Vec<f64>> {
    let mut rng = stream(seed, streams::PROBE);
    (0..n)
        .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect()
}

/// `loss` maps latent points to one scalar each.
pub fn taylor_probe<F>(
    t: &[f64],
    sigma: &[f64],
    eps: &[Vec<f64>],
    h: f64,
    mut loss: F,
) -> Result<TaylorReport>
where
    F: FnMut(&[Vec<f64>]) -> Result<Vec<f64>>,
{
    let d = t.len();
    if sigma.len() != d || eps.iter().any(|e| e.len() != d) {
        return Err(CoreError::shape(
            "taylor_probe",
            format!("t has {d} dims; sigma and every draw must match"),
        ));
    }
    if eps.is_empty() {
        return Err(CoreError::config("taylor_probe needs at least one draw"));
    }
    let n = eps.len() as f64;
    let mut mean = vec![0.0; d];
    let mut second = vec![vec![0.0; d]; d];
    for e in eps {
        for k in 0..d {
            mean[k] += e[k] / n;
            for l in 0..d {
                second[k][l] += e[k] * e[l] / n;
            }
        }
    }

    let stencil = Stencil::new(t, h)?;
    let f = loss(&stencil.points)?;
    let (grad, hess) = stencil.derivatives(&f);
    let order0 = f[0];
    let order1: f64 = (0..d).map(|k| sigma[k] * mean[k] * grad[k]).sum();
    let mut order2 = 0.0;
    for k in 0..d {
        for l in 0..d {
            order2 += sigma[k] * sigma[l] * second[k][l] * hess[k][l];
        }
    }
    order2 *= 0.5;

    let draws: Vec<Vec<f64>> = eps
        .iter()
        .map(|e| (0..d).map(|k| t[k] + sigma[k] * e[k]).collect())
        .collect();
    let monte_carlo = loss(&draws)?.iter().sum::<f64>() / n;
    Ok(TaylorReport {
        order0,
        order1,
        order2,
        monte_carlo,
        residual: (monte_carlo - (order0 + order1 + order2)).abs(),
        n_mc: eps.len(),
        h,
    })
}

pub fn model_taylor(
    model: &Model,
    x: &TmpSequence,
    probe: &Probe,
    eps: &[Vec<f64>],
    h: f64,
) -> Result<TaylorReport> {
    taylor_probe(&probe.t, &probe.sigma, eps, h, |pts| {
        Ok(decoder_losses(model, pts, &[x])?
            .into_iter()
            .map(|v| v[0])
            .collect())
    })
}

/// Scalar chain `x ~ N(0, prior_var)`, `y = x + n`, `w = α·y + e`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianToy {
    pub prior_var: f64,
    pub noise_var: f64,
    pub alpha: f64,
    pub enc_var: f64,
}

impl GaussianToy {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("prior_var", self.prior_var),
            ("noise_var", self.noise_var),
            ("enc_var", self.enc_var),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CoreError::config(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if !self.alpha.is_finite() {
            return Err(CoreError::config("alpha must be finite"));
        }
        Ok(())
    }

    pub fn var_w(&self) -> f64 {
        self.alpha.powi(2) * (self.prior_var + self.noise_var) + self.enc_var
    }

    pub fn var_w_given_x(&self) -> f64 {
        self.alpha.powi(2) * self.noise_var + self.enc_var
    }

    /// Residual variance of the posterior-mean predictor of `x` from `w`.
    pub fn var_x_given_w(&self) -> f64 {
        let c = self.alpha * self.prior_var;
        self.prior_var - c * c / self.var_w()
    }

    pub fn entropy_x(&self) -> f64 {
        gaussian_entropy(self.prior_var)
    }
}

fn gaussian_entropy(var: f64) -> f64 {
    0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * var).ln()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub toy: GaussianToy,
    pub beta: f64,
    pub i_xw: f64,
    pub i_wy: f64,
    /// `−I(x;w) + β·I(w;y)`.
    pub loss_ib: f64,
    /// Variational objective with `r(w) = N(0, 1)`.
    pub l_ib_standard: f64,
    /// Variational objective with `r(w)` the true marginal of `w`.
    pub l_ib_marginal: f64,
    pub entropy_x: f64,
    pub bound_holds: bool,
}

pub fn gaussian_ib_oracle(toy: &GaussianToy, beta: f64) -> Result<OracleResult> {
    toy.validate()?;
    let vw = toy.var_w();
    let i_xw = 0.5 * (vw / toy.var_w_given_x()).ln();
    let i_wy = 0.5 * (vw / toy.enc_var).ln();
    let cond_entropy = gaussian_entropy(toy.var_x_given_w());
    let kl_standard = 0.5
        * (toy.enc_var + toy.alpha.powi(2) * (toy.prior_var + toy.noise_var)
            - 1.0
            - toy.enc_var.ln());
    let loss_ib = -i_xw + beta * i_wy;
    let l_ib_standard = cond_entropy + beta * kl_standard;
    let l_ib_marginal = cond_entropy + beta * i_wy;
    Ok(OracleResult {
        toy: *toy,
        beta,
        i_xw,
        i_wy,
        loss_ib,
        l_ib_standard,
        l_ib_marginal,
        entropy_x: toy.entropy_x(),
        bound_holds: l_ib_standard >= loss_ib && l_ib_marginal >= loss_ib,
    })
}

/// Sample mean and standard error of the per-sample variational objective
/// with `r(w) = N(0, 1)`.
pub fn gaussian_ib_monte_carlo(
    toy: &GaussianToy,
    beta: f64,
    n: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    toy.validate()?;
    if n < 2 {
        return Err(CoreError::config("need at least two samples"));
    }
    let mut rng = stream(seed, streams::PROBE);
    let (vw, vxw) = (toy.var_w(), toy.var_x_given_w());
    let gain = toy.alpha * toy.prior_var / vw;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n {
        let z: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
        let x = toy.prior_var.sqrt() * z[0];
        let y = x + toy.noise_var.sqrt() * z[1];
        let w = toy.alpha * y + toy.enc_var.sqrt() * z[2];
        let nll =
            0.5 * (2.0 * std::f64::consts::PI * vxw).ln() + (x - gain * w).powi(2) / (2.0 * vxw);
        let kl = 0.5 * (toy.enc_var + (toy.alpha * y).powi(2) - 1.0 - toy.enc_var.ln());
        let v = nll + beta * kl;
        sum += v;
        sum_sq += v * v;
    }
    let nf = n as f64;
    let mean = sum / nf;
    let var = (sum_sq / nf - mean * mean).max(0.0) * nf / (nf - 1.0);
    Ok((mean, (var / nf).sqrt()))
}

/// 100 toys on a fixed grid with unit prior variance, β cycling through
/// {0.1, 1, 10, 100}.
pub fn oracle_sweep() -> Result<Vec<OracleResult>> {
    let alphas = [0.1, 0.5, 1.0, 2.0, 5.0];
    let noise = [0.01, 0.1, 1.0, 10.0];
    let enc = [0.01, 0.1, 1.0, 10.0, 100.0];
    let betas = [0.1, 1.0, 10.0, 100.0];
    let mut out = Vec::with_capacity(100);
    for &alpha in &alphas {
        for &noise_var in &noise {
            for &enc_var in &enc {
                let toy = GaussianToy {
                    prior_var: 1.0,
                    noise_var,
                    alpha,
                    enc_var,
                };
                out.push(gaussian_ib_oracle(&toy, betas[out.len() % betas.len()])?);
            }
        }
    }
    Ok(out)
}
