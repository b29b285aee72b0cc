//! Adam optimizer with bias correction and per-tensor learning rates.

use crate::error::{Error, Result};
use crate::mat::Mat;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment accumulators for a fixed list of tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl AdamState {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        Self {
            step: 0,
            m: shapes.iter().map(|&(r, c)| Mat::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Mat::zeros(r, c)).collect(),
        }
    }

    pub fn from_parts(step: u64, m: Vec<Mat>, v: Vec<Mat>) -> Result<Self> {
        if m.len() != v.len() {
            return Err(Error::InvalidInput("moment lists must have equal length".into()));
        }
        Ok(Self { step, m, v })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Mat] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Mat] {
        &self.v
    }

    pub fn tensor_count(&self) -> usize {
        self.m.len()
    }
}

/// One Adam update over a list of tensors. `lrs[k]` is the learning rate
/// for tensor `k`, which lets parameter groups run at different rates.
pub fn adam_step(
    tensors: &mut [&mut Mat],
    grads: &[&Mat],
    lrs: &[f64],
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<()> {
    if tensors.len() != grads.len() || tensors.len() != lrs.len() || tensors.len() != state.m.len() {
        return Err(Error::DimensionMismatch(format!(
            "adam over {} tensors, {} grads, {} lrs, state of {}",
            tensors.len(),
            grads.len(),
            lrs.len(),
            state.m.len()
        )));
    }
    for &lr in lrs {
        if lr <= 0.0 || !lr.is_finite() {
            return Err(Error::InvalidHyperparameter(format!("learning rate must be positive, got {lr}")));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - hyper.beta1.powi(state.step as i32);
    let bc2 = 1.0 - hyper.beta2.powi(state.step as i32);
    debug_assert!(t >= 1.0);

    for k in 0..tensors.len() {
        let g = grads[k];
        if g.rows() != tensors[k].rows() || g.cols() != tensors[k].cols() {
            return Err(Error::DimensionMismatch(format!(
                "gradient {k} is {}x{} for a {}x{} tensor",
                g.rows(),
                g.cols(),
                tensors[k].rows(),
                tensors[k].cols()
            )));
        }
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        let theta = tensors[k].data_mut();
        for i in 0..theta.len() {
            let gi = g.data()[i];
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * gi;
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            theta[i] -= lrs[k] * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}
