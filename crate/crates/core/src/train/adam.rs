use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter in store
/// order, and the number of completed steps.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || {
            store
                .params()
                .iter()
                .map(|p| Tensor::zeros(p.value.shape().to_vec()))
                .collect()
        };
        AdamState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Whether the moment shapes mirror the parameters of `store`.
    pub fn matches(&self, store: &ParamStore<T>) -> bool {
        let n = store.num_params();
        self.m.len() == n
            && self.v.len() == n
            && store
                .params()
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|(p, (m, v))| m.shape() == p.value.shape() && v.shape() == p.value.shape())
    }
}

/// One bias-corrected Adam update of every parameter. Gradients are
/// cleared afterwards.
pub fn adam_step<T: Real>(store: &mut ParamStore<T>, state: &mut AdamState<T>, lr: f64, hp: &AdamParams) -> Result<()> {
    if !state.matches(store) {
        return Err(Error::Training("optimizer state does not match the parameters".into()));
    }
    if let Some(p) = store.params().iter().find(|p| p.grad.is_none()) {
        return Err(Error::Training(format!("parameter {:?} has no gradient", p.name)));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    let (b1, b2) = (T::of(hp.beta1), T::of(hp.beta2));
    let (one_b1, one_b2) = (T::of(1.0 - hp.beta1), T::of(1.0 - hp.beta2));
    let step_size = T::of(lr / c1);
    let c2_sqrt = T::of(c2.sqrt());
    let eps = T::of(hp.eps);
    for (p, (m, v)) in store
        .params_mut()
        .iter_mut()
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let g = p.grad.take().expect("checked above");
        for (((w, &g), m), v) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            *w = *w - step_size * *m / ((*v).sqrt() / c2_sqrt + eps);
        }
    }
    Ok(())
}
