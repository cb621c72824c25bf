#![allow(dead_code)]

use tmpib_core::apsim::SimConfig;

/// Classic RK4 on the single-cell Aliev-Panfilov ODE with the stimulus as a
/// current during the first `stim_time` time units. Returns `u` sampled every
/// `sample_every` time units.
pub fn single_cell_rk4(
    cfg: &SimConfig,
    a: f64,
    stim_amp: f64,
    h: f64,
    sample_every: f64,
) -> Vec<f64> {
    let total = cfg.dt * cfg.n_steps as f64;
    let stim_time = cfg.dt * cfg.stim_duration_steps as f64;
    let f = |t: f64, u: f64, v: f64| {
        let i = if t < stim_time { stim_amp } else { 0.0 };
        let du = -cfg.k * u * (u - a) * (u - 1.0) - u * v + i;
        let dv = (cfg.eps0 + cfg.mu1 * v / (u + cfg.mu2)) * (-v - cfg.k * u * (u - a - 1.0));
        (du, dv)
    };
    let steps = (total / h).round() as usize;
    let stride = (sample_every / h).round() as usize;
    let (mut u, mut v) = (0.0f64, 0.0f64);
    let mut out = Vec::new();
    for n in 0..steps {
        let t = n as f64 * h;
        let (k1u, k1v) = f(t, u, v);
        let (k2u, k2v) = f(t + h / 2.0, u + h / 2.0 * k1u, v + h / 2.0 * k1v);
        let (k3u, k3v) = f(t + h / 2.0, u + h / 2.0 * k2u, v + h / 2.0 * k2v);
        let (k4u, k4v) = f(t + h, u + h * k3u, v + h * k3v);
        u += h / 6.0 * (k1u + 2.0 * k2u + 2.0 * k3u + k4u);
        v += h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v);
        if (n + 1) % stride == 0 {
            out.push(u);
        }
    }
    out
}

pub fn peak(v: &[f64]) -> f64 {
    v.iter().cloned().fold(f64::MIN, f64::max)
}

pub fn rel_frobenius(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}
