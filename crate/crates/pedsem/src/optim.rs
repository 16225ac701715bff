//! Adam with bias correction and a linearly decaying learning rate.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// lr(t) = lr0 * (1 - t / (total_steps + 1)).
///
/// The +1 keeps the final optimizer step strictly positive.
#[derive(Debug, Clone, Copy)]
pub struct LrSchedule {
    pub lr0: f64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(lr0: f64, total_steps: u64) -> Self {
        assert!(lr0 > 0.0 && total_steps > 0);
        LrSchedule { lr0, total_steps }
    }

    pub fn lr(&self, step: u64) -> f64 {
        self.lr0 * (1.0 - step as f64 / (self.total_steps as f64 + 1.0))
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    /// Fresh state with moments matching the store's parameter shapes.
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam update over every parameter in the store,
/// scaled by `sched.lr(state.step)`; increments the step counter.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &[Tensor],
    state: &mut AdamState,
    sched: &LrSchedule,
) -> Result<()> {
    if grads.len() != store.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} gradients for {} parameters", grads.len(), store.len()),
        ));
    }
    for (i, grad) in grads.iter().enumerate() {
        let (m, v) = (&state.m[i], &state.v[i]);
        if grad.shape() != m.shape() || grad.shape() != v.shape() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "gradient {i} shape {:?} does not match state {:?}",
                    grad.shape(),
                    m.shape()
                ),
            ));
        }
    }

    let lr = sched.lr(state.step);
    let t = (state.step + 1) as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (i, grad) in grads.iter().enumerate() {
        let m = state.m[i].data_mut();
        for (mv, &gv) in m.iter_mut().zip(grad.data()) {
            *mv = state.beta1 * *mv + (1.0 - state.beta1) * gv;
        }
        let v = state.v[i].data_mut();
        for (vv, &gv) in v.iter_mut().zip(grad.data()) {
            *vv = state.beta2 * *vv + (1.0 - state.beta2) * gv * gv;
        }
        let param = store.tensors_mut()[i].data_mut();
        for ((pv, &mv), &vv) in param.iter_mut().zip(state.m[i].data()).zip(state.v[i].data()) {
            let m_hat = mv / bc1;
            let v_hat = vv / bc2;
            *pv -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    state.step += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        let n = values.len();
        s.add("w", Tensor::new(vec![n], values).unwrap());
        s
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut store = store_with(vec![1.0, -2.0, 0.5]);
        let before = store.to_flat();
        let mut state = AdamState::new(&store);
        let sched = LrSchedule::new(1e-3, 10);
        adam_step(&mut store, &[Tensor::zeros(&[3])], &mut state, &sched).unwrap();
        assert_eq!(store.to_flat(), before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_moves_by_roughly_lr_times_sign() {
        // Closed form: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps).
        let mut store = store_with(vec![0.0, 0.0]);
        let mut state = AdamState::new(&store);
        let sched = LrSchedule::new(1e-2, 100);
        let g = Tensor::new(vec![2], vec![3.0, -0.7]).unwrap();
        adam_step(&mut store, &[g.clone()], &mut state, &sched).unwrap();
        let lr = sched.lr(0);
        for (p, gv) in store.to_flat().iter().zip(g.data()) {
            let want = -lr * gv / (gv.abs() + state.epsilon);
            assert!((p - want).abs() < 1e-12, "{p} vs {want}");
        }
    }

    #[test]
    fn schedule_stays_positive_through_final_step() {
        let sched = LrSchedule::new(1e-4, 50);
        assert_eq!(sched.lr(0), 1e-4);
        let last = sched.lr(50);
        assert!((last - 1e-4 / 51.0).abs() < 1e-18);
        assert!(last > 0.0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut store = store_with(vec![1.0]);
        let mut state = AdamState::new(&store);
        let sched = LrSchedule::new(1e-3, 10);
        let bad = Tensor::zeros(&[2]);
        assert!(adam_step(&mut store, &[bad], &mut state, &sched).is_err());
        assert!(adam_step(&mut store, &[], &mut state, &sched).is_err());
    }
}
