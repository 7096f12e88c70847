//! Adam with bias correction, and the cosine-annealed learning rate.

use std::f64::consts::PI;

use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

/// Adam optimizer state for every parameter of a [`ParamStore`].
///
/// Parameters whose gradient is `None` (not part of the last graph) and
/// frozen parameters are skipped; their moments and step count are left
/// untouched.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    state: Vec<Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: Vec::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        let AdamConfig { beta1, beta2, eps } = self.config;
        if self.state.len() < store.len() {
            self.state.resize_with(store.len(), Moments::default);
        }
        for (entry, st) in store.entries_mut().iter_mut().zip(&mut self.state) {
            if entry.frozen {
                continue;
            }
            let Some(grad) = &entry.grad else { continue };
            let n = entry.value.numel();
            if st.m.len() != n {
                st.m = vec![0.0; n];
                st.v = vec![0.0; n];
                st.step = 0;
            }
            st.step += 1;
            let bc1 = 1.0 - beta1.powi(st.step as i32);
            let bc2 = 1.0 - beta2.powi(st.step as i32);
            let values = entry.value.data_mut();
            for (i, &g) in grad.data().iter().enumerate() {
                st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * g;
                st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * g * g;
                let m_hat = st.m[i] / bc1;
                let v_hat = st.v[i] / bc2;
                values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// `lr0 · (1 + cos(π · step / total)) / 2`, with `step` clamped to `total`.
pub fn cosine_anneal(lr0: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    let step = step.min(total);
    lr0 * (1.0 + (PI * step as f64 / total as f64).cos()) / 2.0
}
