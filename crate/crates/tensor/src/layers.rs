//! Dense and LSTM layers over a [`Tape`], with their parameters kept in a
//! [`ParamStore`].

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::optim::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Xavier-uniform `rows×cols` matrix with the given fan sizes.
pub fn xavier_uniform<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-limit..=limit))
        .collect();
    Tensor::matrix(rows, cols, data).expect("sized above")
}

/// `y = x·W + b` for a batch of row vectors.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.register(
            format!("{name}.weight"),
            xavier_uniform(in_dim, out_dim, in_dim, out_dim, rng),
        )?;
        let bias = store.register(format!("{name}.bias"), Tensor::zeros(&[out_dim]))?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    /// Looks up an existing layer by name, e.g. after loading a checkpoint.
    pub fn attach(store: &ParamStore, name: &str) -> Result<Self> {
        let weight = store.id(&format!("{name}.weight"))?;
        let bias = store.id(&format!("{name}.bias"))?;
        let (in_dim, out_dim) = store.value(weight).dims()?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let xw = tape.matmul(x, w)?;
        tape.add_bias(xw, b)
    }
}

/// Single-layer LSTM cell. The weight is `(input + hidden) × 4·hidden` with
/// gate blocks ordered input, forget, candidate, output.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let rows = input_dim + hidden;
        let blocks: Vec<Tensor> = (0..4)
            .map(|_| xavier_uniform(rows, hidden, rows, hidden, rng))
            .collect();
        let mut data = Vec::with_capacity(rows * 4 * hidden);
        for r in 0..rows {
            for block in &blocks {
                data.extend_from_slice(&block.data()[r * hidden..(r + 1) * hidden]);
            }
        }
        let weight = store.register(
            format!("{name}.weight"),
            Tensor::matrix(rows, 4 * hidden, data)?,
        )?;
        let mut bias = vec![0.0; 4 * hidden];
        bias[hidden..2 * hidden].fill(1.0);
        let bias = store.register(format!("{name}.bias"), Tensor::new(vec![4 * hidden], bias)?)?;
        Ok(Self {
            weight,
            bias,
            input_dim,
            hidden,
        })
    }

    pub fn attach(store: &ParamStore, name: &str) -> Result<Self> {
        let weight = store.id(&format!("{name}.weight"))?;
        let bias = store.id(&format!("{name}.bias"))?;
        let (rows, cols) = store.value(weight).dims()?;
        if cols % 4 != 0 || rows < cols / 4 {
            return Err(TensorError::Checkpoint(format!(
                "`{name}` weight shape {rows}×{cols} is not an LSTM weight"
            )));
        }
        let hidden = cols / 4;
        Ok(Self {
            weight,
            bias,
            input_dim: rows - hidden,
            hidden,
        })
    }

    /// One step: returns `(h_t, c_t)` for batched `x_t`, `h_prev`, `c_prev`.
    pub fn step(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        h_prev: Var,
        c_prev: Var,
    ) -> Result<(Var, Var)> {
        let (_, xin) = tape.value(x).dims()?;
        let (_, hin) = tape.value(h_prev).dims()?;
        if xin != self.input_dim || hin != self.hidden {
            return Err(TensorError::ShapeMismatch {
                op: "lstm_step",
                lhs: vec![self.input_dim, self.hidden],
                rhs: vec![xin, hin],
            });
        }
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let xh = tape.concat_cols(&[x, h_prev])?;
        let pre = tape.matmul(xh, w)?;
        let pre = tape.add_bias(pre, b)?;
        let h = self.hidden;
        let i = tape.slice_cols(pre, 0, h)?;
        let f = tape.slice_cols(pre, h, 2 * h)?;
        let g = tape.slice_cols(pre, 2 * h, 3 * h)?;
        let o = tape.slice_cols(pre, 3 * h, 4 * h)?;
        let i = tape.sigmoid(i);
        let f = tape.sigmoid(f);
        let g = tape.tanh(g);
        let o = tape.sigmoid(o);
        let keep = tape.mul(f, c_prev)?;
        let write = tape.mul(i, g)?;
        let c = tape.add(keep, write)?;
        let tc = tape.tanh(c);
        let h_new = tape.mul(o, tc)?;
        Ok((h_new, c))
    }
}
