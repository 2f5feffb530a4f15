//! Adamax: Adam with the second moment replaced by an infinity norm.

use serde::{Deserialize, Serialize};

use crate::error::{HahtError, Result};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamaxConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamaxConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: AdamaxConfig,
    pub step: u64,
    first_moment: Vec<Tensor>,
    inf_norm: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(store: &ParameterStore, config: AdamaxConfig) -> Self {
        let zeros = || -> Vec<Tensor> {
            (0..store.len())
                .map(|i| {
                    let v = store.value(i);
                    Tensor::zeros(v.rows(), v.cols())
                })
                .collect()
        };
        Self {
            config,
            step: 0,
            first_moment: zeros(),
            inf_norm: zeros(),
        }
    }

    pub fn first_moment(&self, idx: usize) -> &Tensor {
        &self.first_moment[idx]
    }

    pub fn inf_norm(&self, idx: usize) -> &Tensor {
        &self.inf_norm[idx]
    }
}

/// Applies one update from the gradients held in `store`, then zeroes them.
///
/// All gradients are validated before any parameter moves, so a non-finite
/// gradient leaves both the store and the state untouched.
pub fn adamax_step(store: &mut ParameterStore, state: &mut OptimizerState) -> Result<()> {
    for idx in 0..store.len() {
        if !store.grad(idx).is_finite() {
            return Err(HahtError::NonFiniteGradient(store.name(idx).to_string()));
        }
    }
    state.step += 1;
    let AdamaxConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let step_size = lr / (1.0 - beta1.powi(state.step as i32));
    for idx in 0..store.len() {
        let grad = store.grad(idx).data().to_vec();
        let m = state.first_moment[idx].data_mut();
        let u = state.inf_norm[idx].data_mut();
        let theta = store.value_mut(idx).data_mut();
        for (k, &g) in grad.iter().enumerate() {
            m[k] = beta1 * m[k] + (1.0 - beta1) * g;
            u[k] = (beta2 * u[k]).max(g.abs());
            if m[k] != 0.0 {
                theta[k] -= step_size * m[k] / (u[k] + eps);
            }
        }
    }
    store.zero_grad();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn scalar(v: f64) -> ParameterStore {
        let mut m = BTreeMap::new();
        m.insert("theta".to_string(), Tensor::filled(1, 1, v));
        ParameterStore::new(m)
    }

    fn cfg(lr: f64) -> AdamaxConfig {
        AdamaxConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 0.0,
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = scalar(0.25);
        let mut state = OptimizerState::new(&store, AdamaxConfig::default());
        adamax_step(&mut store, &mut state).unwrap();
        assert_eq!(store.value(0).data()[0], 0.25);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn two_hand_computed_steps() {
        let mut store = scalar(0.0);
        let mut state = OptimizerState::new(&store, cfg(1e-3));
        store.grad_mut(0).data_mut()[0] = 1.0;
        adamax_step(&mut store, &mut state).unwrap();
        assert!((store.value(0).data()[0] + 1e-3).abs() < 1e-15);
        assert_eq!(store.grad(0).data()[0], 0.0);

        store.grad_mut(0).data_mut()[0] = 1.0;
        adamax_step(&mut store, &mut state).unwrap();
        assert!((state.first_moment(0).data()[0] - 0.19).abs() < 1e-15);
        assert_eq!(state.inf_norm(0).data()[0], 1.0);
        assert!((store.value(0).data()[0] + 2e-3).abs() < 1e-15);
    }

    #[test]
    fn zero_learning_rate_is_inert() {
        let mut store = scalar(1.5);
        let mut state = OptimizerState::new(&store, cfg(0.0));
        for _ in 0..5 {
            store.grad_mut(0).data_mut()[0] = -3.0;
            adamax_step(&mut store, &mut state).unwrap();
        }
        assert_eq!(store.value(0).data()[0], 1.5);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut store = scalar(0.0);
        let mut state = OptimizerState::new(&store, AdamaxConfig::default());
        store.grad_mut(0).data_mut()[0] = f64::NAN;
        let err = adamax_step(&mut store, &mut state).unwrap_err();
        assert!(err.to_string().contains("theta"));
        assert_eq!(state.step, 0);
    }
}
