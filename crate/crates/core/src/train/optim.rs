//! AdamW with linear warmup and linear decay.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_LR_MAX: f64 = 5e-5;
pub const DEFAULT_WEIGHT_DECAY: f64 = 0.01;
pub const DEFAULT_WARMUP_RATIO: f64 = 0.06;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr_max: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub total_steps: usize,
}

impl AdamWConfig {
    pub fn new(total_steps: usize) -> Self {
        Self {
            lr_max: DEFAULT_LR_MAX,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            warmup_ratio: DEFAULT_WARMUP_RATIO,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            total_steps,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    /// Updates applied so far.
    pub step: usize,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, shapes: &[usize]) -> Self {
        Self {
            config,
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn for_params(config: AdamWConfig, params: &[&mut Tensor]) -> Self {
        let sizes: Vec<usize> = params.iter().map(|p| p.len()).collect();
        Self::new(config, &sizes)
    }
}

/// Linear ramp `0 → lr_max` over the first `warmup_ratio · total_steps` steps, then
/// linear decay to `0` at `total_steps`.
pub fn lr_at(step: usize, config: &AdamWConfig) -> f64 {
    let total = config.total_steps as f64;
    let warmup = config.warmup_ratio * total;
    let s = step as f64;
    if s < warmup {
        config.lr_max * s / warmup
    } else if total > warmup {
        config.lr_max * ((total - s) / (total - warmup)).max(0.0)
    } else {
        0.0
    }
}

/// One AdamW update at learning rate `lr_at(state.step)`.
///
/// Bias-corrected Adam step first, then decoupled decay `p ← p·(1 − lr·wd)`.
pub fn adamw_step(params: &mut [&mut Tensor], grads: &[Option<Tensor>], state: &mut OptimizerState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::contract(format!(
            "adamw_step got {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    if let Some(i) = grads.iter().position(Option::is_none) {
        return Err(Error::contract(format!("missing gradient for trainable parameter #{i}")));
    }
    let c = state.config;
    let lr = lr_at(state.step, &c);
    let t = (state.step + 1) as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let decay = 1.0 - lr * c.weight_decay;

    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.first)
        .zip(&mut state.second)
    {
        let g = g.as_ref().expect("checked above");
        if g.len() != p.len() || m.len() != p.len() {
            return Err(Error::Dimension {
                op: "adamw_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
            *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + c.eps);
            *w *= decay;
        }
    }
    state.step += 1;
    Ok(())
}
