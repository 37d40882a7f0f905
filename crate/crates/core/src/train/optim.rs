use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::model::ParameterSet;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// Per-parameter first and second moments plus the update counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T: Scalar> {
    pub first: IndexMap<String, Tensor<T>>,
    pub second: IndexMap<String, Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    /// Zero moments mirroring the shapes of `params`.
    pub fn new(params: &ParameterSet<T>) -> Self {
        let zeros = || -> IndexMap<String, Tensor<T>> {
            params
                .iter()
                .map(|(k, t)| (k.to_string(), Tensor::zeros(t.shape())))
                .collect()
        };
        Self {
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }
}

/// Rescales all stored gradients so their global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(params: &mut ParameterSet<T>, max_norm: f64) -> f64 {
    let sq: f64 = params
        .iter()
        .filter_map(|(_, t)| t.grad_slice())
        .flat_map(|g| g.iter())
        .map(|v| {
            let v = v.to_f64().unwrap_or(f64::NAN);
            v * v
        })
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = T::of(max_norm / norm);
        for (_, t) in params.iter_mut() {
            if let Some(g) = t.grad_slice() {
                let scaled = g.iter().map(|&v| v * scale).collect();
                t.set_grad_data(scaled);
            }
        }
    }
    norm
}

/// One decoupled-weight-decay Adam update over every parameter.
pub fn adamw_step<T: Scalar>(
    params: &mut ParameterSet<T>,
    state: &mut OptimizerState<T>,
    hp: &AdamW,
) -> Result<()> {
    if let Some((name, _)) = params.iter().find(|(_, t)| t.grad_slice().is_none()) {
        return Err(Error::State(format!("no gradient for parameter {name}")));
    }
    let t = state.step + 1;
    let bc1 = T::of(1.0 - hp.beta1.powf(t as f64));
    let bc2 = T::of(1.0 - hp.beta2.powf(t as f64));
    let (b1, b2) = (T::of(hp.beta1), T::of(hp.beta2));
    let (one_b1, one_b2) = (T::of(1.0 - hp.beta1), T::of(1.0 - hp.beta2));
    let (lr, eps, wd) = (T::of(hp.lr), T::of(hp.eps), T::of(hp.weight_decay));

    for (name, p) in params.iter_mut() {
        let missing = || Error::State(format!("no moment buffers for parameter {name}"));
        let m = state.first.get_mut(name).ok_or_else(missing)?;
        let v = state.second.get_mut(name).ok_or_else(missing)?;
        if m.shape() != p.shape() || v.shape() != p.shape() {
            return Err(Error::State(format!(
                "moment shape mismatch for parameter {name}"
            )));
        }
        let g = p.grad_slice().expect("checked above").to_vec();
        let (m, v) = (m.data_mut(), v.data_mut());
        for (i, theta) in p.data_mut().iter_mut().enumerate() {
            m[i] = b1 * m[i] + one_b1 * g[i];
            v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *theta -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *theta);
        }
    }
    state.step = t;
    Ok(())
}
