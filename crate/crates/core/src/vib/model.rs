use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use tmpib_tensor::{load_checkpoint, save_checkpoint, Dense, Lstm, ParamStore, Tape, Tensor, Var};

use super::{
    kl_to_standard_normal, nll_term, Arch, LatentGaussian, ModelConfig, OutputGaussian,
    LOGVAR_CLAMP,
};
use crate::apsim::{EcgSequence, TmpSequence};
use crate::error::{CoreError, Result};
use crate::rng::{stream, streams};

/// Per-lead standardization of the encoder input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl InputNorm {
    pub fn identity(m: usize) -> Self {
        Self {
            mean: vec![0.0; m],
            std: vec![1.0; m],
        }
    }

    /// Mean and population standard deviation of each lead over every frame
    /// of every sequence. Constant leads keep unit scale.
    pub fn fit(ys: &[&EcgSequence]) -> Result<Self> {
        let first = ys
            .first()
            .ok_or_else(|| CoreError::EmptySplit("normalization".into()))?;
        let m = first.leads();
        let mut mean = vec![0.0; m];
        let mut sq = vec![0.0; m];
        let mut count = 0.0;
        for y in ys {
            if y.leads() != m {
                return Err(CoreError::shape("InputNorm::fit", "lead counts differ"));
            }
            let t = y.frames();
            for l in 0..m {
                for &v in &y.values.data()[l * t..(l + 1) * t] {
                    mean[l] += v;
                    sq[l] += v * v;
                }
            }
            count += y.frames() as f64;
        }
        let std = (0..m)
            .map(|l| {
                mean[l] /= count;
                let var = (sq[l] / count - mean[l] * mean[l]).max(0.0);
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }
}

/// Inputs (and optionally targets) laid out one `B×·` matrix per frame.
#[derive(Clone, Debug)]
pub struct Batch {
    pub size: usize,
    pub y_steps: Vec<Tensor>,
    pub x_steps: Option<Vec<Tensor>>,
}

pub struct LatentVars {
    pub t: Var,
    pub logvar: Option<Var>,
    pub sigma: Option<Var>,
}

pub struct OutputVars {
    /// One `B×U` mean per frame.
    pub g: Vec<Var>,
    pub logvar: Option<Vec<Var>>,
}

#[derive(Clone, Debug)]
struct Layers {
    enc_lstm: Lstm,
    enc_fc: Option<(Dense, Dense)>,
    enc_mean: Dense,
    enc_logvar: Option<Dense>,
    dec_fc: Option<(Dense, Dense)>,
    dec_init: Option<(Dense, Dense)>,
    dec_lstm: Lstm,
    dec_mean: Dense,
    dec_logvar: Option<Dense>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub norm: InputNorm,
    pub store: ParamStore,
    layers: Layers,
}

#[derive(Serialize, Deserialize)]
struct SavedConfig {
    model: ModelConfig,
    norm: InputNorm,
}

fn stack_rows(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Tensor {
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            data.push(f(r, c));
        }
    }
    Tensor::matrix(rows, cols, data).expect("sized above")
}

impl Model {
    /// Fresh parameters drawn from the `INIT` stream of `seed`.
    pub fn new(cfg: ModelConfig, norm: InputNorm, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(seed, streams::INIT);
        let mut s = ParamStore::new();
        let d = cfg.latent_dim;
        let svs = cfg.arch == Arch::Svs;
        let enc_lstm = Lstm::new(&mut s, "enc.lstm", cfg.m, cfg.enc_hidden, &mut rng)?;
        let enc_fc = if svs {
            Some((
                Dense::new(
                    &mut s,
                    "enc.fc1",
                    cfg.t * cfg.enc_hidden,
                    cfg.fc_hidden,
                    &mut rng,
                )?,
                Dense::new(&mut s, "enc.fc2", cfg.fc_hidden, cfg.fc_hidden, &mut rng)?,
            ))
        } else {
            None
        };
        let head_in = if svs { cfg.fc_hidden } else { cfg.enc_hidden };
        let enc_mean = Dense::new(&mut s, "enc.mean", head_in, d, &mut rng)?;
        let enc_logvar = if cfg.stochastic {
            Some(Dense::new(&mut s, "enc.logvar", head_in, d, &mut rng)?)
        } else {
            None
        };
        let (dec_fc, dec_init, dec_in) = if svs {
            let fc = (
                Dense::new(&mut s, "dec.fc1", d, cfg.fc_hidden, &mut rng)?,
                Dense::new(
                    &mut s,
                    "dec.fc2",
                    cfg.fc_hidden,
                    cfg.t * cfg.dec_input,
                    &mut rng,
                )?,
            );
            (Some(fc), None, cfg.dec_input)
        } else {
            let init = (
                Dense::new(&mut s, "dec.h0", d, cfg.dec_hidden, &mut rng)?,
                Dense::new(&mut s, "dec.c0", d, cfg.dec_hidden, &mut rng)?,
            );
            (None, Some(init), 1)
        };
        let dec_lstm = Lstm::new(&mut s, "dec.lstm", dec_in, cfg.dec_hidden, &mut rng)?;
        let dec_mean = Dense::new(&mut s, "dec.mean", cfg.dec_hidden, cfg.u, &mut rng)?;
        let dec_logvar = if cfg.stochastic {
            Some(Dense::new(
                &mut s,
                "dec.logvar",
                cfg.dec_hidden,
                cfg.u,
                &mut rng,
            )?)
        } else {
            None
        };
        let layers = Layers {
            enc_lstm,
            enc_fc,
            enc_mean,
            enc_logvar,
            dec_fc,
            dec_init,
            dec_lstm,
            dec_mean,
            dec_logvar,
        };
        Self::check_norm(&cfg, &norm)?;
        Ok(Self {
            cfg,
            norm,
            store: s,
            layers,
        })
    }

    fn check_norm(cfg: &ModelConfig, norm: &InputNorm) -> Result<()> {
        if norm.mean.len() != cfg.m || norm.std.len() != cfg.m {
            return Err(CoreError::shape(
                "InputNorm",
                format!("{} leads expected, got {}", cfg.m, norm.mean.len()),
            ));
        }
        Ok(())
    }

    /// Rebuilds a model around an existing parameter store, e.g. one loaded
    /// from a checkpoint.
    pub fn from_store(cfg: ModelConfig, norm: InputNorm, store: ParamStore) -> Result<Self> {
        cfg.validate()?;
        Self::check_norm(&cfg, &norm)?;
        let reference = Self::new(cfg.clone(), norm.clone(), 0)?;
        let names = |s: &ParamStore| -> Vec<(String, Vec<usize>)> {
            s.ids()
                .map(|id| (s.name(id).to_string(), s.value(id).shape().to_vec()))
                .collect()
        };
        if names(&reference.store) != names(&store) {
            return Err(CoreError::Contract(
                "checkpoint parameters do not match the model configuration".into(),
            ));
        }
        let mut model = reference;
        model.store.restore(&store.snapshot())?;
        Ok(model)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let cfg = serde_json::to_value(SavedConfig {
            model: self.cfg.clone(),
            norm: self.norm.clone(),
        })?;
        save_checkpoint(dir, &cfg, &self.store)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (cfg, store) = load_checkpoint(dir)?;
        let saved: SavedConfig = serde_json::from_value(cfg)?;
        Self::from_store(saved.model, saved.norm, store)
    }

    /// Sets every parameter to zero.
    pub fn zero_params(&mut self) {
        let ids: Vec<_> = self.store.ids().collect();
        for id in ids {
            self.store.value_mut(id).data_mut().fill(0.0);
        }
    }

    /// Names of encoder (`enc.`) and decoder (`dec.`) parameters.
    pub fn param_partition(&self) -> (Vec<String>, Vec<String>) {
        let names: Vec<String> = self
            .store
            .ids()
            .map(|id| self.store.name(id).to_string())
            .collect();
        names.into_iter().partition(|n| n.starts_with("enc."))
    }

    pub fn batch(&self, ys: &[&EcgSequence], xs: Option<&[&TmpSequence]>) -> Result<Batch> {
        let (m, u, t) = (self.cfg.m, self.cfg.u, self.cfg.t);
        for y in ys {
            if y.values.shape() != [m, t] {
                return Err(CoreError::shape(
                    "encode",
                    format!("y is {:?}, model expects {m}×{t}", y.values.shape()),
                ));
            }
        }
        let n = &self.norm;
        let y_steps = (0..t)
            .map(|f| {
                stack_rows(ys.len(), m, |b, l| {
                    (ys[b].values.data()[l * t + f] - n.mean[l]) / n.std[l]
                })
            })
            .collect();
        let x_steps = match xs {
            Some(xs) => {
                if xs.len() != ys.len() {
                    return Err(CoreError::shape("batch", "x and y counts differ"));
                }
                for x in xs {
                    if x.values.shape() != [u, t] {
                        return Err(CoreError::shape(
                            "batch",
                            format!("x is {:?}, model expects {u}×{t}", x.values.shape()),
                        ));
                    }
                }
                Some(
                    (0..t)
                        .map(|f| stack_rows(xs.len(), u, |b, j| xs[b].values.data()[j * t + f]))
                        .collect(),
                )
            }
            None => None,
        };
        Ok(Batch {
            size: ys.len(),
            y_steps,
            x_steps,
        })
    }

    pub fn encode_vars(&self, tape: &mut Tape, batch: &Batch) -> Result<LatentVars> {
        let l = &self.layers;
        let s = &self.store;
        let hdim = self.cfg.enc_hidden;
        let mut h = tape.constant(Tensor::zeros(&[batch.size, hdim]));
        let mut c = tape.constant(Tensor::zeros(&[batch.size, hdim]));
        let mut hidden = Vec::with_capacity(self.cfg.t);
        for y in &batch.y_steps {
            let x = tape.constant(y.clone());
            (h, c) = l.enc_lstm.step(tape, s, x, h, c)?;
            hidden.push(h);
        }
        let z = match &l.enc_fc {
            Some((fc1, fc2)) => {
                let all = tape.concat_cols(&hidden)?;
                let a = fc1.forward(tape, s, all)?;
                let a = tape.relu(a);
                let a = fc2.forward(tape, s, a)?;
                tape.relu(a)
            }
            None => h,
        };
        let t = l.enc_mean.forward(tape, s, z)?;
        let (logvar, sigma) = match &l.enc_logvar {
            Some(head) => {
                let lv = head.forward(tape, s, z)?;
                let lv = tape.clamp(lv, -LOGVAR_CLAMP, LOGVAR_CLAMP);
                let half = tape.scale(lv, 0.5);
                (Some(lv), Some(tape.exp(half)))
            }
            None => (None, None),
        };
        Ok(LatentVars { t, logvar, sigma })
    }

    /// `w = t + σ ⊙ ε`; `eps` is a `B×d` constant.
    pub fn sample_vars(&self, tape: &mut Tape, lat: &LatentVars, eps: &Tensor) -> Result<Var> {
        match lat.sigma {
            Some(sigma) => {
                let e = tape.constant(eps.clone());
                let noise = tape.mul(sigma, e)?;
                Ok(tape.add(lat.t, noise)?)
            }
            None => Ok(lat.t),
        }
    }

    pub fn decode_vars(&self, tape: &mut Tape, w: Var) -> Result<OutputVars> {
        let l = &self.layers;
        let s = &self.store;
        let (b, d) = tape.value(w).dims()?;
        if d != self.cfg.latent_dim {
            return Err(CoreError::shape(
                "decode",
                format!("w has {d} dims, model expects {}", self.cfg.latent_dim),
            ));
        }
        let hdim = self.cfg.dec_hidden;
        let din = self.cfg.dec_input;
        let (mut h, mut c, seq) = match (&l.dec_fc, &l.dec_init) {
            (Some((fc1, fc2)), _) => {
                let a = fc1.forward(tape, s, w)?;
                let a = tape.relu(a);
                let a = fc2.forward(tape, s, a)?;
                let seq = tape.relu(a);
                let h = tape.constant(Tensor::zeros(&[b, hdim]));
                let c = tape.constant(Tensor::zeros(&[b, hdim]));
                (h, c, Some(seq))
            }
            (None, Some((h0, c0))) => {
                let h = h0.forward(tape, s, w)?;
                let h = tape.tanh(h);
                let c = c0.forward(tape, s, w)?;
                (h, c, None)
            }
            (None, None) => unreachable!("one decoder front end is always built"),
        };
        let zero_in = tape.constant(Tensor::zeros(&[b, 1]));
        let mut g = Vec::with_capacity(self.cfg.t);
        let mut lv = l
            .dec_logvar
            .as_ref()
            .map(|_| Vec::with_capacity(self.cfg.t));
        for f in 0..self.cfg.t {
            let x = match seq {
                Some(seq) => tape.slice_cols(seq, f * din, (f + 1) * din)?,
                None => zero_in,
            };
            (h, c) = l.dec_lstm.step(tape, s, x, h, c)?;
            g.push(l.dec_mean.forward(tape, s, h)?);
            if let (Some(head), Some(lv)) = (&l.dec_logvar, lv.as_mut()) {
                let v = head.forward(tape, s, h)?;
                lv.push(tape.clamp(v, -LOGVAR_CLAMP, LOGVAR_CLAMP));
            }
        }
        Ok(OutputVars { g, logvar: lv })
    }

    /// Batch sum of `Σ (x − g)² e^{−lv} + lv`.
    pub fn nll_vars(&self, tape: &mut Tape, out: &OutputVars, x_steps: &[Tensor]) -> Result<Var> {
        let lvs = out
            .logvar
            .as_ref()
            .ok_or_else(|| CoreError::Contract("NLL needs output variance heads".into()))?;
        let mut total: Option<Var> = None;
        for ((x, &g), &lv) in x_steps.iter().zip(&out.g).zip(lvs) {
            let x = tape.constant(x.clone());
            let diff = tape.sub(x, g)?;
            let sq = tape.mul(diff, diff)?;
            let neg = tape.neg(lv);
            let inv = tape.exp(neg);
            let weighted = tape.mul(sq, inv)?;
            let term = tape.add(weighted, lv)?;
            let s = tape.sum(term);
            total = Some(match total {
                Some(acc) => tape.add(acc, s)?,
                None => s,
            });
        }
        total.ok_or_else(|| CoreError::shape("nll", "no frames"))
    }

    /// Batch sum of `‖x − g‖²`.
    pub fn sq_err_vars(
        &self,
        tape: &mut Tape,
        out: &OutputVars,
        x_steps: &[Tensor],
    ) -> Result<Var> {
        let mut total: Option<Var> = None;
        for (x, &g) in x_steps.iter().zip(&out.g) {
            let x = tape.constant(x.clone());
            let diff = tape.sub(x, g)?;
            let sq = tape.mul(diff, diff)?;
            let s = tape.sum(sq);
            total = Some(match total {
                Some(acc) => tape.add(acc, s)?,
                None => s,
            });
        }
        total.ok_or_else(|| CoreError::shape("sq_err", "no frames"))
    }

    /// Batch sum of `KL(N(t, σ²) ‖ N(0, I))`.
    pub fn kl_vars(&self, tape: &mut Tape, lat: &LatentVars) -> Result<Var> {
        let lv = lat
            .logvar
            .ok_or_else(|| CoreError::Contract("KL of a deterministic latent".into()))?;
        let var = tape.exp(lv);
        let t2 = tape.mul(lat.t, lat.t)?;
        let a = tape.add(var, t2)?;
        let a = tape.sub(a, lv)?;
        let a = tape.add_scalar(a, -1.0);
        let s = tape.sum(a);
        Ok(tape.scale(s, 0.5))
    }

    /// Mean per-example objective of the variant. `eps` holds one `B×d`
    /// standard-normal draw per Monte-Carlo sample and is ignored by
    /// deterministic models.
    pub fn loss_vars(&self, tape: &mut Tape, batch: &Batch, eps: &[Tensor]) -> Result<Var> {
        let x_steps = batch
            .x_steps
            .as_ref()
            .ok_or_else(|| CoreError::Contract("loss needs targets".into()))?;
        let lat = self.encode_vars(tape, batch)?;
        let inv_b = 1.0 / batch.size as f64;
        if !self.cfg.stochastic {
            let out = self.decode_vars(tape, lat.t)?;
            let sq = self.sq_err_vars(tape, &out, x_steps)?;
            return Ok(tape.scale(sq, inv_b));
        }
        if eps.is_empty() {
            return Err(CoreError::Contract("stochastic loss needs ε draws".into()));
        }
        let mut nll: Option<Var> = None;
        for e in eps {
            let w = self.sample_vars(tape, &lat, e)?;
            let out = self.decode_vars(tape, w)?;
            let term = self.nll_vars(tape, &out, x_steps)?;
            nll = Some(match nll {
                Some(acc) => tape.add(acc, term)?,
                None => term,
            });
        }
        let nll = tape.scale(nll.expect("nonempty"), 1.0 / eps.len() as f64);
        let total = if self.cfg.beta > 0.0 {
            let kl = self.kl_vars(tape, &lat)?;
            let kl = tape.scale(kl, self.cfg.beta);
            tape.add(nll, kl)?
        } else {
            nll
        };
        Ok(tape.scale(total, inv_b))
    }

    /// `n_mc` standard-normal `B×d` draws.
    pub fn draw_eps<R: Rng + ?Sized>(&self, rng: &mut R, b: usize) -> Vec<Tensor> {
        let d = self.cfg.latent_dim;
        (0..self.cfg.n_mc)
            .map(|_| {
                let data = (0..b * d).map(|_| rng.sample(StandardNormal)).collect();
                Tensor::matrix(b, d, data).expect("sized above")
            })
            .collect()
    }

    pub fn encode_batch(&self, ys: &[&EcgSequence]) -> Result<Vec<LatentGaussian>> {
        let batch = self.batch(ys, None)?;
        let mut tape = Tape::new();
        let lat = self.encode_vars(&mut tape, &batch)?;
        let d = self.cfg.latent_dim;
        let t = tape.value(lat.t).data();
        let sigma = lat.sigma.map(|s| tape.value(s).data().to_vec());
        Ok((0..batch.size)
            .map(|b| LatentGaussian {
                t: t[b * d..(b + 1) * d].to_vec(),
                sigma_t: match &sigma {
                    Some(s) => s[b * d..(b + 1) * d].to_vec(),
                    None => vec![0.0; d],
                },
            })
            .collect())
    }

    pub fn encode(&self, y: &EcgSequence) -> Result<LatentGaussian> {
        Ok(self.encode_batch(&[y])?.remove(0))
    }

    pub fn decode_batch(&self, ws: &[Vec<f64>]) -> Result<Vec<OutputGaussian>> {
        let d = self.cfg.latent_dim;
        if let Some(w) = ws.iter().find(|w| w.len() != d) {
            return Err(CoreError::shape(
                "decode",
                format!("w has {} dims, model expects {d}", w.len()),
            ));
        }
        let mut tape = Tape::new();
        let w = tape.constant(stack_rows(ws.len(), d, |b, k| ws[b][k]));
        let out = self.decode_vars(&mut tape, w)?;
        let (u, t) = (self.cfg.u, self.cfg.t);
        let gather = |steps: &[Var], b: usize, f: &dyn Fn(f64) -> f64| {
            stack_rows(u, t, |j, k| f(tape.value(steps[k]).data()[b * u + j]))
        };
        Ok((0..ws.len())
            .map(|b| OutputGaussian {
                g: gather(&out.g, b, &|v| v),
                sigma_x2: match &out.logvar {
                    Some(lv) => gather(lv, b, &f64::exp),
                    None => Tensor::full(&[u, t], 1.0),
                },
            })
            .collect())
    }

    pub fn decode(&self, w: &[f64]) -> Result<OutputGaussian> {
        Ok(self.decode_batch(&[w.to_vec()])?.remove(0))
    }

    /// Mean-latent, mean-output reconstruction.
    pub fn reconstruct_batch(&self, ys: &[&EcgSequence]) -> Result<Vec<TmpSequence>> {
        let ws: Vec<Vec<f64>> = self.encode_batch(ys)?.into_iter().map(|l| l.t).collect();
        self.decode_batch(&ws)?
            .into_iter()
            .map(|o| TmpSequence::new(o.g))
            .collect()
    }

    pub fn reconstruct(&self, y: &EcgSequence) -> Result<TmpSequence> {
        Ok(self.reconstruct_batch(&[y])?.remove(0))
    }

    /// Per-example objective with values only: one encode, `n_mc` decodes.
    pub fn loss_ib<R: Rng + ?Sized>(
        &self,
        x: &TmpSequence,
        y: &EcgSequence,
        rng: &mut R,
    ) -> Result<f64> {
        if !self.cfg.stochastic {
            return Err(CoreError::Contract(
                "loss_ib needs a stochastic model".into(),
            ));
        }
        let lat = self.encode(y)?;
        let eps: Vec<Vec<f64>> = (0..self.cfg.n_mc)
            .map(|_| {
                (0..self.cfg.latent_dim)
                    .map(|_| rng.sample(StandardNormal))
                    .collect()
            })
            .collect();
        ib_objective(x, &lat, &eps, self.cfg.beta, |w| self.decode(w))
    }

    pub fn loss_deterministic(&self, x: &TmpSequence, y: &EcgSequence) -> Result<f64> {
        if self.cfg.stochastic {
            return Err(CoreError::Contract(
                "loss_deterministic needs a deterministic model".into(),
            ));
        }
        let g = self.decode(&self.encode(y)?.t)?.g;
        super::frobenius_sq(&x.values, &g)
    }
}

/// `(1/n) Σ_ε nll(x, decode(t + σ⊙ε)) + β·KL`. The KL term is skipped when
/// `beta` is zero, so a point latent is allowed there.
pub fn ib_objective<F>(
    x: &TmpSequence,
    lat: &LatentGaussian,
    eps: &[Vec<f64>],
    beta: f64,
    mut decode: F,
) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<OutputGaussian>,
{
    if eps.is_empty() {
        return Err(CoreError::Contract("need at least one ε draw".into()));
    }
    let mut nll = 0.0;
    for e in eps {
        let w = super::sample_latent(lat, e)?;
        nll += nll_term(x, &decode(&w)?)?;
    }
    nll /= eps.len() as f64;
    if beta == 0.0 {
        Ok(nll)
    } else {
        Ok(nll + beta * kl_to_standard_normal(lat)?)
    }
}
