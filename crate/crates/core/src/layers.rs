//! Parameterized building blocks shared by the attention and model modules.

use numkit::{rng_normal, Binding, ParamId, ParamStore, Rng, Scalar, Tape, Tensor, Var};

use crate::error::Result;

pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Weights `[fan_in, fan_out]` drawn from `N(0, std^2)`, zero bias.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), rng_normal(rng, &[fan_in, fan_out], std))?;
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]))?);
        Ok(Self {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Binding, x: Var) -> Result<Var> {
        Ok(tape.linear(x, p.var(self.weight), self.bias.map(|b| p.var(b)))?)
    }

    /// Zero the weights and bias so the layer outputs zeros.
    pub fn zero<T: Scalar>(&self, store: &mut ParamStore<T>) {
        store.get_mut(self.weight).data_mut().fill(T::ZERO);
        if let Some(b) = self.bias {
            store.get_mut(b).data_mut().fill(T::ZERO);
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], T::ONE))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Binding, x: Var) -> Result<Var> {
        Ok(tape.layernorm(x, p.var(self.gamma), p.var(self.beta), LN_EPS)?)
    }
}
