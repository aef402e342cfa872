//! Bias-corrected ADAM over a list of parameter tensors.

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    fn validate(&self) -> Result<()> {
        if !(0.0 <= self.beta1 && self.beta1 < 1.0) || !(0.0 <= self.beta2 && self.beta2 < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "adam betas must lie in [0, 1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "adam epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "adam learning rate must be finite and non-negative, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

/// First/second moment estimates, one pair per parameter tensor, plus the
/// shared step counter used for bias correction.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    pub fn new(param_shapes: &[&[usize]], config: AdamConfig) -> Result<AdamState> {
        config.validate()?;
        Ok(AdamState {
            config,
            m: param_shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: param_shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            t: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// Restores a previously saved state (moments and step counter).
    pub fn restore(config: AdamConfig, m: Vec<Tensor>, v: Vec<Tensor>, t: u64) -> Result<AdamState> {
        config.validate()?;
        if m.len() != v.len() {
            return Err(Error::shape(
                "adam restore",
                format!("{} second-moment tensors", m.len()),
                format!("{}", v.len()),
            ));
        }
        Ok(AdamState { config, m, v, t })
    }
}

/// One ADAM update over all parameters. The step counter advances once per
/// call, not once per tensor, so bias correction is shared.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} parameter tensors", state.m.len()),
            format!("{} params / {} grads", params.len(), grads.len()),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::shape(
                format!("adam_step parameter {i}"),
                format!("{:?}", p.shape()),
                format!("{:?}", g.shape()),
            ));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient for parameter tensor {i}")));
        }
    }

    state.t += 1;
    let t = state.t;
    let b1 = state.config.beta1 as f64;
    let b2 = state.config.beta2 as f64;
    let lr = state.config.lr as f64;
    let eps = state.config.epsilon as f64;
    let bias1 = 1.0 - b1.powi(t as i32);
    let bias2 = 1.0 - b2.powi(t as i32);

    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let pd = p.data_mut();
        let gd = g.data();
        let md = m.data_mut();
        let vd = v.data_mut();
        for i in 0..pd.len() {
            let gi = gd[i] as f64;
            let mi = b1 * md[i] as f64 + (1.0 - b1) * gi;
            let vi = b2 * vd[i] as f64 + (1.0 - b2) * gi * gi;
            md[i] = mi as f32;
            vd[i] = vi as f32;
            let m_hat = mi / bias1;
            let v_hat = vi / bias2;
            pd[i] = (pd[i] as f64 - lr * m_hat / (v_hat.sqrt() + eps)) as f32;
        }
    }
    Ok(())
}
