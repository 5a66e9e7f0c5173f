use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Scalar, Tensor};

use super::config::{OptimizerConfig, Schedule};

/// Learning rate for 0-based `step`.
pub fn scheduled_lr(cfg: &OptimizerConfig, step: usize) -> f64 {
    match cfg.schedule {
        Schedule::Constant => cfg.lr,
        Schedule::Cosine => {
            let t = (step as f64 / cfg.total_steps.max(1) as f64).min(1.0);
            0.5 * cfg.lr * (1.0 + (PI * t).cos())
        }
    }
}

/// AdamW moments, kept in f64 regardless of the parameter precision.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    /// Completed update steps.
    pub step: usize,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<T: Scalar>(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Moments as named tensors for checkpointing.
    pub fn to_tensors<T: Scalar>(&self, store: &ParamStore<T>) -> Vec<(String, Tensor<f64>)> {
        let mut out = Vec::with_capacity(2 * self.m.len());
        for (k, (name, t)) in store.iter().enumerate() {
            out.push((format!("adam.m.{name}"), Tensor::from_vec(t.shape(), self.m[k].clone()).expect("shape")));
            out.push((format!("adam.v.{name}"), Tensor::from_vec(t.shape(), self.v[k].clone()).expect("shape")));
        }
        out
    }

    pub fn from_tensors<T: Scalar>(store: &ParamStore<T>, step: usize, find: impl Fn(&str) -> Option<Tensor<f64>>) -> Result<Self> {
        let mut st = Self::new(store);
        st.step = step;
        for (k, (name, t)) in store.iter().enumerate() {
            for (which, dst) in [("m", &mut st.m[k]), ("v", &mut st.v[k])] {
                let key = format!("adam.{which}.{name}");
                let src = find(&key).ok_or_else(|| Error::Format(format!("checkpoint lacks {key}")))?;
                if src.shape() != t.shape() {
                    return Err(Error::Format(format!("{key}: shape {:?} vs {:?}", src.shape(), t.shape())));
                }
                *dst = src.into_data();
            }
        }
        Ok(st)
    }
}

/// One decoupled-weight-decay Adam update with gradients `grads` (one per
/// parameter, in store order). Returns the learning rate used.
pub fn adamw_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &[Vec<f64>],
    state: &mut AdamState,
    cfg: &OptimizerConfig,
) -> Result<f64> {
    if grads.len() != store.len() {
        return Err(Error::shape("adamw_step", format!("{} gradients for {} parameters", grads.len(), store.len())));
    }
    let lr = scheduled_lr(cfg, state.step);
    let clip = if cfg.grad_clip > 0.0 {
        let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        if norm > cfg.grad_clip {
            cfg.grad_clip / norm
        } else {
            1.0
        }
    } else {
        1.0
    };
    state.step += 1;
    let (b1, b2) = cfg.betas;
    let bc1 = 1.0 - b1.powi(state.step as i32);
    let bc2 = 1.0 - b2.powi(state.step as i32);
    for (k, t) in store.tensors_mut().enumerate() {
        let (m, v, gk) = (&mut state.m[k], &mut state.v[k], &grads[k]);
        if gk.len() != t.numel() {
            return Err(Error::shape("adamw_step", format!("gradient {k} has {} of {} elements", gk.len(), t.numel())));
        }
        if lr == 0.0 {
            for i in 0..gk.len() {
                let g = gk[i] * clip;
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            }
            continue;
        }
        for (i, p) in t.data_mut().iter_mut().enumerate() {
            let g = gk[i] * clip;
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.eps) + cfg.weight_decay * p.as_f64();
            *p = T::from_f64(p.as_f64() - lr * update);
        }
    }
    Ok(lr)
}
