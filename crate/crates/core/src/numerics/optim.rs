use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::param::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(lr: f32) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            ..Self::default()
        }
    }

    pub fn adam(lr: f32) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
    t: u32,
}

/// SGD or Adam over the trainable parameters of a [`ParamStore`].
///
/// Adam moments are kept per parameter and the bias-correction counter
/// advances only when that parameter is stepped.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    state: HashMap<ParamId, Moments>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            state: HashMap::new(),
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Updates every trainable parameter in place, then zeroes all gradients.
    /// A non-finite gradient aborts before any value is modified.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<ParamId> = store.ids().collect();
        for &id in &ids {
            let p = store.get(id);
            if !p.trainable {
                continue;
            }
            if let Some(index) = p.grad.data().iter().position(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    param: store.name(id).to_string(),
                    index,
                });
            }
        }
        let c = self.config;
        for &id in &ids {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            match c.kind {
                OptimizerKind::Sgd => {
                    for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                        *v -= c.lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    let n = p.value.numel();
                    let st = self.state.entry(id).or_insert_with(|| Moments {
                        m: vec![0.0; n],
                        v: vec![0.0; n],
                        t: 0,
                    });
                    st.t += 1;
                    let bc1 = 1.0 - c.beta1.powi(st.t as i32);
                    let bc2 = 1.0 - c.beta2.powi(st.t as i32);
                    let grad = p.grad.data();
                    for (i, v) in p.value.data_mut().iter_mut().enumerate() {
                        let g = grad[i];
                        st.m[i] = c.beta1 * st.m[i] + (1.0 - c.beta1) * g;
                        st.v[i] = c.beta2 * st.v[i] + (1.0 - c.beta2) * g * g;
                        let mhat = st.m[i] / bc1;
                        let vhat = st.v[i] / bc2;
                        *v -= c.lr * mhat / (vhat.sqrt() + c.eps);
                    }
                }
            }
        }
        store.zero_grads();
        Ok(())
    }
}
