//! Named parameter storage and the AdamW optimizer.

use std::collections::HashMap;

use crate::error::{dim_err, Result};
use crate::scalar::Scalar;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(dim_err("param_store", format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Register every parameter on `tape`, tracked for gradients.
    pub fn bind(&self, tape: &mut Tape<T>) -> Binding {
        Binding {
            vars: self.values.iter().map(|v| tape.leaf(v.clone())).collect(),
        }
    }

    /// Register every parameter as a constant (inference).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Binding {
        Binding {
            vars: self.values.iter().map(|v| tape.constant(v.clone())).collect(),
        }
    }

    /// Replace a parameter value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(dim_err(
                "param_store",
                format!("{}: shape {:?} != {:?}", self.names[id.0], value.shape(), self.values[id.0].shape()),
            ));
        }
        self.values[id.0] = value;
        Ok(())
    }
}

/// Tape variables of a [`ParamStore`] bound for one forward pass.
#[derive(Debug, Clone)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    /// Binding over variables already on a tape, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Collect per-parameter gradients in store order.
    pub fn gradients<T: Scalar>(&self, grads: &mut Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.vars.iter().map(|&v| grads.take(v)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// AdamW with bias correction and decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, config: AdamWConfig) -> Self {
        let first: Vec<Tensor<T>> = store.values.iter().map(|v| Tensor::zeros(v.shape())).collect();
        Self {
            config,
            step: 0,
            second: first.clone(),
            first,
        }
    }

    /// One update at learning rate `lr`. Parameters without a gradient are
    /// left untouched, including weight decay.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.first.len() != store.len() {
            return Err(dim_err("adamw", "gradient list does not match parameter store"));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (ob1, ob2) = (T::ONE - b1, T::ONE - b2);
        let step_size = T::from_f64(lr / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        let eps = T::from_f64(c.eps);
        let decay = T::from_f64(lr * c.weight_decay);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = store.values[i].data_mut();
            if g.len() != p.len() {
                return Err(dim_err("adamw", format!("gradient for {} has wrong size", store.names[i])));
            }
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + ob1 * gj;
                v[j] = b2 * v[j] + ob2 * gj * gj;
                let denom = (v[j] * inv_bc2).sqrt() + eps;
                p[j] = p[j] - step_size * m[j] / denom - decay * p[j];
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.add("w", Tensor::zeros(&[2])).unwrap();
        assert!(s.add("w", Tensor::zeros(&[2])).is_err());
        assert_eq!(s.param_count(), 2);
    }

    #[test]
    fn first_adamw_step_moves_by_lr() {
        // With bias correction the first step is lr * sign(g) (up to eps), plus decay.
        let mut s = ParamStore::<f64>::new();
        let id = s.add("w", Tensor::from_f64(&[2], &[1.0, -1.0]).unwrap()).unwrap();
        let mut opt = AdamW::<f64>::new(&s, AdamWConfig { weight_decay: 0.0, ..Default::default() });
        let g = Tensor::from_f64(&[2], &[0.3, -5.0]).unwrap();
        opt.step(&mut s, &[Some(g)], 0.01).unwrap();
        let w = s.get(id).data();
        assert!((w[0] - 0.99).abs() < 1e-9 && (w[1] + 0.99).abs() < 1e-9);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("w", Tensor::from_f64(&[1], &[2.0]).unwrap()).unwrap();
        let mut opt = AdamW::<f64>::new(&s, AdamWConfig::default());
        opt.step(&mut s, &[Some(Tensor::zeros(&[1]))], 0.1).unwrap();
        // zero gradient: only the decay term lr * wd * w acts.
        assert!((s.get(id).data()[0] - (2.0 - 0.1 * 1e-4 * 2.0)).abs() < 1e-12);
    }
}
