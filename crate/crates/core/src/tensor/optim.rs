use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::params::ParamStore;
use super::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, max_grad_norm: Some(1.0) }
    }
}

/// First/second moment estimates, one pair per parameter of a store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

/// Adam bound to the layout of a single [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    state: AdamState,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let zeros = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        let m = store.iter().map(|(_, p)| zeros(p)).collect::<Vec<_>>();
        Self { cfg, state: AdamState { step: 0, v: m.clone(), m } }
    }

    pub fn from_state(cfg: AdamConfig, state: AdamState) -> Self {
        Self { cfg, state }
    }

    pub fn state(&self) -> &AdamState {
        &self.state
    }

    /// Applies one update to `store` from whatever gradients exist for it.
    /// Parameters without a gradient keep their value but still age their moments.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        let AdamConfig { lr, beta1, beta2, eps, max_grad_norm } = self.cfg;
        let scale = match max_grad_norm {
            Some(max) => {
                let n = grads.norm_for_store(store.tag());
                if n > max {
                    max / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for i in 0..store.len() {
            let Some(g) = grads.get(store.key(i)) else { continue };
            let m = self.state.m[i].data_mut();
            let v = self.state.v[i].data_mut();
            let p = store.get_mut(i).data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j] * scale;
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}
