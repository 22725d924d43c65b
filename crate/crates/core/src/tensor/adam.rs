use serde::{Deserialize, Serialize};

use super::{GroupId, ParamStore, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// Moment buffers for one parameter group.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

/// Adam with a separate moment state per [`ParamGroup`](super::ParamGroup),
/// so moments never mix between phases that train different groups.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    states: Vec<Option<AdamState>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            states: Vec::new(),
        }
    }

    pub fn state(&self, group: GroupId) -> Option<&AdamState> {
        self.states.get(group.0).and_then(Option::as_ref)
    }

    /// Updates every trainable group that holds gradients, then clears all
    /// gradients in the store. Frozen groups are left bit-identical.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        if self.states.len() < store.groups().len() {
            self.states.resize(store.groups().len(), None);
        }
        for gi in 0..store.groups().len() {
            let group = store.group_mut(GroupId(gi));
            if !group.trainable || group.params.iter().all(|p| p.grad.is_none()) {
                continue;
            }
            let state = self.states[gi].get_or_insert_with(|| AdamState {
                step: 0,
                m: group.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
                v: group.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            });
            if state.m.len() != group.params.len() {
                return Err(TensorError::Invalid(format!(
                    "optimizer state for group `{}` is out of date",
                    group.name
                )));
            }
            state.step += 1;
            let bc1 = 1.0 - beta1.powi(state.step as i32);
            let bc2 = 1.0 - beta2.powi(state.step as i32);
            for (k, p) in group.params.iter_mut().enumerate() {
                let Some(grad) = p.grad.as_ref() else { continue };
                if grad.shape() != p.value.shape() {
                    return Err(TensorError::ShapeMismatch {
                        op: "adam_step",
                        lhs: p.value.shape().to_vec(),
                        rhs: grad.shape().to_vec(),
                    });
                }
                let m = state.m[k].data_mut();
                let v = state.v[k].data_mut();
                for (((w, &g), mi), vi) in p
                    .value
                    .data_mut()
                    .iter_mut()
                    .zip(grad.data())
                    .zip(m.iter_mut())
                    .zip(v.iter_mut())
                {
                    *mi = beta1 * *mi + (1.0 - beta1) * g;
                    *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                    let m_hat = *mi / bc1;
                    let v_hat = *vi / bc2;
                    *w -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        store.zero_grads();
        Ok(())
    }
}
