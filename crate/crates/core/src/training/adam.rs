use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// First and second moment estimates for every parameter of a store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update using the gradients held by `store`.
/// Nothing is modified when any gradient is non-finite.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, lr: f64) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::InvalidArgument(format!(
            "optimizer tracks {} tensors, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    for (name, t) in store.iter() {
        if let Some(g) = t.grad() {
            if let Some(bad) = g.iter().find(|x| !x.is_finite()) {
                return Err(Error::numeric(
                    format!("adam_step {name}"),
                    format!("gradient {bad}"),
                ));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for ((p, m), v) in store
        .tensors_mut()
        .iter_mut()
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        let Some(g) = p.grad().map(<[f64]>::to_vec) else {
            continue;
        };
        let (m, v) = (m.data_mut(), v.data_mut());
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            *w -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// Global L2 norm of all gradients in the store.
pub fn grad_norm(store: &ParamStore) -> f64 {
    store
        .iter()
        .filter_map(|(_, t)| t.grad())
        .flatten()
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the factor applied (1.0 when nothing changed).
pub fn clip_gradients(store: &mut ParamStore, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::InvalidArgument(format!("max_norm must be positive, got {max_norm}")));
    }
    let norm = grad_norm(store);
    if norm <= max_norm || !norm.is_finite() {
        return Ok(1.0);
    }
    let scale = max_norm / norm;
    for t in store.tensors_mut() {
        if let Some(g) = t.grad_mut() {
            g.iter_mut().for_each(|x| *x *= scale);
        }
    }
    Ok(scale)
}
