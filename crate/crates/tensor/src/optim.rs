use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Param {
    name: String,
    value: Tensor,
    grad: Tensor,
    has_grad: bool,
    m: Tensor,
    v: Tensor,
    step: u64,
}

/// Named parameters in registration order, with their gradients and Adam
/// moments.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        let id = ParamId(self.params.len());
        let shape = value.shape().to_vec();
        self.params.push(Param {
            name: name.clone(),
            grad: Tensor::zeros(&shape),
            has_grad: false,
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
            step: 0,
            value,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor> {
        let p = &self.params[id.0];
        p.has_grad.then_some(&p.grad)
    }

    /// Adam steps taken by parameter `id`.
    pub fn step_count(&self, id: ParamId) -> u64 {
        self.params[id.0].step
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != grad.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "accumulate_grad",
                lhs: p.value.shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        p.grad.add_assign(grad);
        p.has_grad = true;
        Ok(())
    }

    /// Overwrites the gradient of `id`.
    pub fn set_grad(&mut self, id: ParamId, grad: Tensor) -> Result<()> {
        self.params[id.0].grad = Tensor::zeros(self.params[id.0].value.shape());
        self.params[id.0].has_grad = false;
        self.accumulate_grad(id, &grad)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
            p.has_grad = false;
        }
    }

    /// Scales every populated gradient, e.g. to average over a minibatch.
    pub fn scale_grads(&mut self, factor: f64) {
        for p in self.params.iter_mut().filter(|p| p.has_grad) {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= factor);
        }
    }

    /// One bias-corrected Adam update of every parameter; gradients are zeroed
    /// afterwards.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if let Some(p) = self.params.iter().find(|p| !p.has_grad) {
            return Err(TensorError::MissingGradient(p.name.clone()));
        }
        for p in &mut self.params {
            p.step += 1;
            let t = p.step as i32;
            let c1 = 1.0 - cfg.beta1.powi(t);
            let c2 = 1.0 - cfg.beta2.powi(t);
            let values = p.value.data_mut();
            let (m, v) = (p.m.data_mut(), p.v.data_mut());
            for (i, &g) in p.grad.data().iter().enumerate() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                values[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        self.zero_grad();
        Ok(())
    }

    /// Parameter values only; Adam moments and gradients are dropped.
    pub fn snapshot(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, values: &[Tensor]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(TensorError::Checkpoint(format!(
                "snapshot holds {} tensors, store has {}",
                values.len(),
                self.params.len()
            )));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "restore",
                    lhs: p.value.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            p.value = v.clone();
        }
        Ok(())
    }

    /// Rounds every value to the nearest `f32`, the checkpoint storage type.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            for x in p.value.data_mut() {
                *x = *x as f32 as f64;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: Vec<f64>) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let n = values.len();
        let id = s
            .register("w", Tensor::new(vec![n], values).unwrap())
            .unwrap();
        (s, id)
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut s, id) = store_with(vec![0.5, -2.0]);
        s.set_grad(id, Tensor::new(vec![2], vec![1.0, 1.0]).unwrap())
            .unwrap();
        s.adam_step(&AdamConfig::default()).unwrap();
        let v = s.value(id).data();
        // m̂ = v̂ = 1, so the step is lr / (1 + eps)
        assert!((v[0] - (0.5 - 1e-3)).abs() < 1e-10);
        assert!((v[1] - (-2.0 - 1e-3)).abs() < 1e-10);
        assert_eq!(s.step_count(id), 1);
        assert!(s.grad(id).is_none());
    }

    #[test]
    fn zero_gradient_leaves_values() {
        let (mut s, id) = store_with(vec![0.25, 3.0]);
        s.set_grad(id, Tensor::zeros(&[2])).unwrap();
        s.adam_step(&AdamConfig::default()).unwrap();
        assert_eq!(s.value(id).data(), &[0.25, 3.0]);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let (mut s, _) = store_with(vec![1.0]);
        assert!(matches!(
            s.adam_step(&AdamConfig::default()),
            Err(TensorError::MissingGradient(_))
        ));
    }

    #[test]
    fn duplicate_names_rejected() {
        let (mut s, _) = store_with(vec![1.0]);
        assert!(s.register("w", Tensor::scalar(0.0)).is_err());
    }
}
