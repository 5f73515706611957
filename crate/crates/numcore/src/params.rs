use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 3.5e-4,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

#[derive(Debug, Clone)]
struct Entry<T: Scalar> {
    name: String,
    tensor: Tensor<T>,
    state: MomentState<T>,
}

/// Named tensors of a model. Trainable entries have `requires_grad` set;
/// the rest are buffers such as batchnorm running statistics.
#[derive(Debug, Clone, Default)]
pub struct ParameterSet<T: Scalar = f32> {
    entries: Vec<Entry<T>>,
    index: BTreeMap<String, usize>,
    has_grads: bool,
}

impl<T: Scalar> ParameterSet<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: BTreeMap::new(),
            has_grads: false,
        }
    }

    fn insert(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        let n = tensor.numel();
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            tensor,
            state: MomentState {
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
                step: 0,
            },
        });
        Ok(())
    }

    pub fn add_param(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        self.insert(name, tensor.with_requires_grad(true))
    }

    pub fn add_buffer(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        self.insert(name, tensor.with_requires_grad(false))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub(crate) fn tensor_at(&self, idx: usize) -> &Tensor<T> {
        &self.entries[idx].tensor
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.entries[self.index_of(name)?].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        let i = self.index_of(name)?;
        Ok(&mut self.entries[i].tensor)
    }

    /// Names in insertion order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.tensor))
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.tensor.requires_grad)
            .map(|e| e.tensor.numel())
            .sum()
    }

    pub fn state(&self, name: &str) -> Result<&MomentState<T>> {
        Ok(&self.entries[self.index_of(name)?].state)
    }

    pub fn set_state(&mut self, name: &str, state: MomentState<T>) -> Result<()> {
        let i = self.index_of(name)?;
        let n = self.entries[i].tensor.numel();
        if state.m.len() != n || state.v.len() != n {
            return Err(Error::shape("set_state", name.to_string(), format!("moments must hold {n} values")));
        }
        self.entries[i].state = state;
        Ok(())
    }

    /// Replaces a tensor's values, keeping its role and optimizer state.
    pub fn set_values(&mut self, name: &str, values: &Tensor<T>) -> Result<()> {
        let t = self.get_mut(name)?;
        if t.shape() != values.shape() {
            return Err(Error::shape(
                "set_values",
                name.to_string(),
                format!("{:?} vs stored {:?}", values.shape(), t.shape()),
            ));
        }
        t.data_mut().copy_from_slice(values.data());
        Ok(())
    }

    pub(crate) fn accumulate_grad(&mut self, idx: usize, g: &[T]) -> Result<()> {
        let t = &mut self.entries[idx].tensor;
        if !t.requires_grad {
            return Ok(());
        }
        if g.len() != t.numel() {
            return Err(Error::shape("accumulate_grad", self.entries[idx].name.clone(), "gradient length"));
        }
        match &mut t.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &d)| *a += d),
            slot => *slot = Some(g.to_vec()),
        }
        Ok(())
    }

    pub(crate) fn mark_backward(&mut self) {
        self.has_grads = true;
    }

    pub fn grad(&self, name: &str) -> Result<Option<&[T]>> {
        Ok(self.get(name)?.grad.as_deref())
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.grad = None;
        }
        self.has_grads = false;
    }

    /// Applies one optimizer update to every parameter holding a gradient,
    /// then clears all gradients. Parameters without a gradient are skipped,
    /// including their step counters.
    pub fn optimizer_step(&mut self, cfg: &OptimizerConfig) -> Result<()> {
        if !self.has_grads {
            return Err(Error::Contract("optimizer step requested before any backward pass".into()));
        }
        let lr = T::lit(cfg.lr);
        let wd = T::lit(cfg.weight_decay);
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let eps = T::lit(cfg.eps);
        for e in &mut self.entries {
            let Some(grad) = e.tensor.grad.take() else { continue };
            let st = &mut e.state;
            st.step += 1;
            match cfg.kind {
                OptimizerKind::Sgd => {
                    for (p, g) in e.tensor.data_mut().iter_mut().zip(grad) {
                        let g = g + wd * *p;
                        *p -= lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    let t = st.step as i32;
                    let bc1 = T::one() - b1.powi(t);
                    let bc2 = T::one() - b2.powi(t);
                    for (((p, g), m), v) in e
                        .tensor
                        .data_mut()
                        .iter_mut()
                        .zip(grad)
                        .zip(st.m.iter_mut())
                        .zip(st.v.iter_mut())
                    {
                        let g = g + wd * *p;
                        *m = b1 * *m + (T::one() - b1) * g;
                        *v = b2 * *v + (T::one() - b2) * g * g;
                        let m_hat = *m / bc1;
                        let v_hat = *v / bc2;
                        *p -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        self.has_grads = false;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    tensor: e.tensor.cast(),
                    state: MomentState {
                        m: e.state.m.iter().map(|&x| U::lit(x.as_f64())).collect(),
                        v: e.state.v.iter().map(|&x| U::lit(x.as_f64())).collect(),
                        step: e.state.step,
                    },
                })
                .collect(),
            index: self.index.clone(),
            has_grads: self.has_grads,
        }
    }
}
