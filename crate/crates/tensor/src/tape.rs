//! Reverse-mode gradient tape.
//!
//! Operations append nodes in evaluation order, so the node list is already
//! topologically sorted; [`Tape::gradients`] walks it once in reverse.

use crate::error::{Result, TensorError};
use crate::optim::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
}

/// Gradients of one scalar with respect to every tracked node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.param_nodes.clear();
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, var: Var) -> bool {
        self.nodes[var.0].tracked
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Tape::gradients`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records parameter `id`; repeated calls on one tape share a node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let slot = id.index();
        if let Some(Some(var)) = self.param_nodes.get(slot) {
            return *var;
        }
        let var = self.push(store.value(id).clone(), Op::Param(id), true);
        if self.param_nodes.len() <= slot {
            self.param_nodes.resize(slot + 1, None);
        }
        self.param_nodes[slot] = Some(var);
        var
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims()?;
        let (k2, n) = tb.dims()?;
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            ta.data(),
            (k as isize, 1),
            tb.data(),
            (n as isize, 1),
            &mut out,
            false,
        );
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), tracked))
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.dims()? != tb.dims()? {
            return Err(mismatch(name, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, op, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `a + b` with the `1×c` row `b` added to every row of the `r×c` matrix `a`.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (r, c) = ta.dims()?;
        if tb.dims()? != (1, c) {
            return Err(mismatch("add_bias", ta, tb));
        }
        let bias = tb.data();
        let mut data = ta.data().to_vec();
        for row in data.chunks_exact_mut(c.max(1)).take(r) {
            for (x, b) in row.iter_mut().zip(bias) {
                *x += b;
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::AddBias(a, b), tracked))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let tracked = self.tracked(a);
        self.push(value, op, tracked)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// Natural log; every entry must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| !(x > 0.0)) {
            return Err(TensorError::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Clamps to `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let tracked = self.tracked(a);
        self.push(Tensor::scalar(s), Op::Sum(a), tracked)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(TensorError::Domain {
                op: "mean",
                detail: "empty tensor".into(),
            });
        }
        let m = t.sum() / t.len() as f64;
        let tracked = self.tracked(a);
        Ok(self.push(Tensor::scalar(m), Op::Mean(a), tracked))
    }

    /// Columns `start..end` of every row.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims()?;
        if start > end || end > c {
            return Err(TensorError::Domain {
                op: "slice_cols",
                detail: format!("range {start}..{end} outside {c} columns"),
            });
        }
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for row in 0..r {
            data.extend_from_slice(&t.data()[row * c + start..row * c + end]);
        }
        let value = Tensor::matrix(r, w, data)?;
        let tracked = self.tracked(a);
        Ok(self.push(value, Op::SliceCols(a, start), tracked))
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| TensorError::Domain {
            op: "concat_cols",
            detail: "no inputs".into(),
        })?;
        let (r, _) = self.value(first).dims()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).dims()?;
            if pr != r {
                return Err(mismatch("concat_cols", self.value(first), self.value(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for row in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[row * w..(row + 1) * w]);
            }
        }
        let tracked = parts.iter().any(|&p| self.tracked(p));
        let value = Tensor::matrix(r, total, data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), tracked))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let out = self.value(loss);
        if out.len() != 1 {
            return Err(TensorError::NonScalarLoss(out.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(out.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, delta: Tensor) {
        if !self.tracked(var) {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn elementwise_back(
        &self,
        grads: &mut [Option<Tensor>],
        parent: Var,
        g: &Tensor,
        local: impl Fn(usize) -> f64,
    ) {
        if !self.tracked(parent) {
            return;
        }
        let data = g
            .data()
            .iter()
            .enumerate()
            .map(|(i, &gi)| gi * local(i))
            .collect();
        let delta = Tensor::new(self.value(parent).shape().to_vec(), data).expect("same length");
        self.accumulate(grads, parent, delta);
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        if !node.tracked {
            return Ok(());
        }
        let out = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims()?;
                let (_, n) = tb.dims()?;
                if self.tracked(*a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        g.data(),
                        (n as isize, 1),
                        tb.data(),
                        (1, n as isize),
                        &mut da,
                        false,
                    );
                    self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), da)?);
                }
                if self.tracked(*b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0; k * n];
                    gemm(
                        k,
                        m,
                        n,
                        ta.data(),
                        (1, k as isize),
                        g.data(),
                        (n as isize, 1),
                        &mut db,
                        false,
                    );
                    self.accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), db)?);
                }
            }
            Op::Add(a, b) => {
                self.elementwise_back(grads, *a, g, |_| 1.0);
                self.elementwise_back(grads, *b, g, |_| 1.0);
            }
            Op::Sub(a, b) => {
                self.elementwise_back(grads, *a, g, |_| 1.0);
                self.elementwise_back(grads, *b, g, |_| -1.0);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.elementwise_back(grads, *a, g, |i| vb[i]);
                self.elementwise_back(grads, *b, g, |i| va[i]);
            }
            Op::AddBias(a, b) => {
                self.elementwise_back(grads, *a, g, |_| 1.0);
                if self.tracked(*b) {
                    let tb = self.value(*b);
                    let (_, c) = tb.dims()?;
                    let mut db = vec![0.0; c];
                    for row in g.data().chunks_exact(c.max(1)) {
                        for (acc, x) in db.iter_mut().zip(row) {
                            *acc += x;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), db)?);
                }
            }
            Op::Scale(a, s) => self.elementwise_back(grads, *a, g, |_| *s),
            Op::AddScalar(a) => self.elementwise_back(grads, *a, g, |_| 1.0),
            Op::Exp(a) => self.elementwise_back(grads, *a, g, |i| out[i]),
            Op::Log(a) => {
                let va = self.value(*a).data();
                self.elementwise_back(grads, *a, g, |i| 1.0 / va[i]);
            }
            Op::Tanh(a) => self.elementwise_back(grads, *a, g, |i| 1.0 - out[i] * out[i]),
            Op::Sigmoid(a) => self.elementwise_back(grads, *a, g, |i| out[i] * (1.0 - out[i])),
            Op::Relu(a) => {
                let va = self.value(*a).data();
                self.elementwise_back(grads, *a, g, |i| if va[i] > 0.0 { 1.0 } else { 0.0 });
            }
            Op::Clamp(a, lo, hi) => {
                let va = self.value(*a).data();
                self.elementwise_back(grads, *a, g, |i| {
                    if va[i] >= *lo && va[i] <= *hi {
                        1.0
                    } else {
                        0.0
                    }
                });
            }
            Op::Sum(a) => {
                if self.tracked(*a) {
                    let delta = Tensor::full(self.value(*a).shape(), g.data()[0]);
                    self.accumulate(grads, *a, delta);
                }
            }
            Op::Mean(a) => {
                if self.tracked(*a) {
                    let ta = self.value(*a);
                    let delta = Tensor::full(ta.shape(), g.data()[0] / ta.len() as f64);
                    self.accumulate(grads, *a, delta);
                }
            }
            Op::SliceCols(a, start) => {
                if self.tracked(*a) {
                    let ta = self.value(*a);
                    let (r, c) = ta.dims()?;
                    let (_, w) = g.dims()?;
                    let mut da = vec![0.0; r * c];
                    for row in 0..r {
                        da[row * c + start..row * c + start + w]
                            .copy_from_slice(&g.data()[row * w..(row + 1) * w]);
                    }
                    self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), da)?);
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = g.dims()?;
                let mut offset = 0;
                for &p in parts {
                    let tp = self.value(p);
                    let (_, w) = tp.dims()?;
                    if self.tracked(p) {
                        let mut dp = Vec::with_capacity(r * w);
                        for row in 0..r {
                            dp.extend_from_slice(
                                &g.data()[row * total + offset..row * total + offset + w],
                            );
                        }
                        self.accumulate(grads, p, Tensor::new(tp.shape().to_vec(), dp)?);
                    }
                    offset += w;
                }
            }
        }
        Ok(())
    }

    /// Accumulates d`loss`/dθ into `store` for every recorded parameter and
    /// clears the tape.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (slot, var) in self.param_nodes.iter().enumerate() {
            if let Some(var) = var {
                if let Op::Param(id) = self.nodes[var.0].op {
                    debug_assert_eq!(id.index(), slot);
                    let g = grads
                        .get(*var)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(self.value(*var).shape()));
                    store.accumulate_grad(id, &g)?;
                }
            }
        }
        self.clear();
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
