//! Adam with bias correction, driven by the gradient buffers of a
//! [`ParamStore`]. Deterministic: same store + same gradients -> same update.

use crate::error::{Error, Result};
use crate::numerics::params::ParamStore;
use crate::numerics::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let m = (0..params.len())
            .map(|i| Tensor::zeros(params.value_at(i).shape()))
            .collect();
        let v = (0..params.len())
            .map(|i| Tensor::zeros(params.value_at(i).shape()))
            .collect();
        AdamState { m, v, t: 0 }
    }
}

/// One Adam update from the currently populated gradients.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::UninitializedState(format!(
            "state holds {} entries, store has {}",
            state.m.len(),
            params.len()
        )));
    }
    state.t += 1;
    let t = state.t as f64;
    let bc1 = 1.0 - (cfg.beta1 as f64).powf(t);
    let bc2 = 1.0 - (cfg.beta2 as f64).powf(t);
    for i in 0..params.len() {
        let g = params.grad_at(i).data().to_vec();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = params.value_at_mut(i).data_mut();
        for j in 0..g.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let m_hat = m[j] as f64 / bc1;
            let v_hat = v[j] as f64 / bc2;
            p[j] -= (cfg.lr as f64 * m_hat / (v_hat.sqrt() + cfg.eps as f64)) as f32;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut store = ParamStore::new(0);
        store.insert("w", Tensor::full(&[3], 1.5));
        let mut state = AdamState::new(&store);
        adam_step(&mut store, &mut state, &AdamConfig::default()).unwrap();
        assert!(store.value("w").unwrap().data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        let mut store = ParamStore::new(0);
        store.insert("w", Tensor::scalar(1.0));
        store.grad_at_mut(0).data_mut()[0] = 1.0;
        let mut state = AdamState::new(&store);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        adam_step(&mut store, &mut state, &cfg).unwrap();
        let w = store.value("w").unwrap().item();
        assert!((w - 0.9).abs() < 1e-4, "got {w}");
    }

    #[test]
    fn identical_runs_are_bitwise_identical() {
        let run = || {
            let mut store = ParamStore::new(0);
            store.insert("w", Tensor::full(&[4], 0.3));
            let mut state = AdamState::new(&store);
            let cfg = AdamConfig::default();
            for step in 0..10 {
                for (j, g) in store.grad_at_mut(0).data_mut().iter_mut().enumerate() {
                    *g = ((step * 7 + j) as f32 * 0.13).sin();
                }
                adam_step(&mut store, &mut state, &cfg).unwrap();
            }
            store.value("w").unwrap().data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let mut store = ParamStore::new(0);
        store.insert("w", Tensor::scalar(0.0));
        let mut state = AdamState::new(&store);
        store.insert("extra", Tensor::scalar(0.0));
        assert!(matches!(
            adam_step(&mut store, &mut state, &AdamConfig::default()),
            Err(Error::UninitializedState(_))
        ));
    }
}
