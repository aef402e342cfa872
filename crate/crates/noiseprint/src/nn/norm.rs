//! Per-channel batch normalization and ReLU.

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f32,
    /// Fraction of the previous running estimate kept on each training step.
    pub momentum: f32,
}

impl BatchNorm {
    pub fn new(channels: usize, eps: f32, momentum: f32) -> Result<BatchNorm> {
        if channels == 0 {
            return Err(Error::InvalidArgument("batchnorm needs at least one channel".into()));
        }
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!("batchnorm eps must be positive, got {eps}")));
        }
        if !(0.0 < momentum && momentum < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "batchnorm momentum must lie in (0, 1), got {momentum}"
            )));
        }
        Ok(BatchNorm {
            gamma: Tensor::filled(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], 1.0),
            eps,
            momentum,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Values cached by the training forward pass for the backward pass.
#[derive(Debug)]
pub struct BnCache {
    /// The standardized activations x̂ (before scale and shift).
    pub normalized: Tensor,
    /// Per-channel 1/sqrt(var + eps) from batch statistics.
    pub inv_std: Vec<f64>,
}

pub struct BnGrads {
    pub input: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

fn check_channels(input: &Tensor, bn: &BatchNorm, context: &str) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = input.dims4(context)?;
    if c != bn.channels() {
        return Err(Error::shape(
            context,
            format!("{} channels", bn.channels()),
            format!("{c}"),
        ));
    }
    if n * h * w == 0 {
        return Err(Error::InvalidArgument(format!(
            "{context}: batchnorm over zero elements per channel (shape {:?})",
            input.shape()
        )));
    }
    Ok((n, c, h, w))
}

/// Training-mode forward pass: normalizes with batch statistics and folds
/// them into the running estimates.
pub fn batchnorm_forward_train(input: &Tensor, bn: &mut BatchNorm) -> Result<(Tensor, BnCache)> {
    let (n, c, h, w) = check_channels(input, bn, "batchnorm_forward_train")?;
    let plane = h * w;
    let m = (n * plane) as f64;
    let data = input.data();

    let mut out = Tensor::zeros(input.shape());
    let mut normalized = Tensor::zeros(input.shape());
    let mut inv_stds = vec![0.0f64; c];

    for ch in 0..c {
        let mut sum = 0.0f64;
        let mut sum_sq = 0.0f64;
        for sn in 0..n {
            let p = &data[(sn * c + ch) * plane..(sn * c + ch + 1) * plane];
            for &v in p {
                let v = v as f64;
                sum += v;
                sum_sq += v * v;
            }
        }
        let mean = sum / m;
        let var = (sum_sq / m - mean * mean).max(0.0);
        let inv_std = 1.0 / (var + bn.eps as f64).sqrt();
        inv_stds[ch] = inv_std;

        let gamma = bn.gamma.data()[ch] as f64;
        let beta = bn.beta.data()[ch] as f64;
        for sn in 0..n {
            let base = (sn * c + ch) * plane;
            for i in 0..plane {
                let xhat = (data[base + i] as f64 - mean) * inv_std;
                normalized.data_mut()[base + i] = xhat as f32;
                out.data_mut()[base + i] = (gamma * xhat + beta) as f32;
            }
        }

        let mom = bn.momentum as f64;
        let rm = bn.running_mean.data()[ch] as f64;
        let rv = bn.running_var.data()[ch] as f64;
        bn.running_mean.data_mut()[ch] = (mom * rm + (1.0 - mom) * mean) as f32;
        bn.running_var.data_mut()[ch] = (mom * rv + (1.0 - mom) * var) as f32;
    }

    Ok((out, BnCache { normalized, inv_std: inv_stds }))
}

/// Inference-mode forward pass: normalizes with the running statistics only.
pub fn batchnorm_forward_infer(input: &Tensor, bn: &BatchNorm) -> Result<Tensor> {
    let (n, c, h, w) = check_channels(input, bn, "batchnorm_forward_infer")?;
    let plane = h * w;
    let data = input.data();
    let mut out = Tensor::zeros(input.shape());
    for ch in 0..c {
        let mean = bn.running_mean.data()[ch] as f64;
        let var = bn.running_var.data()[ch] as f64;
        let inv_std = 1.0 / (var + bn.eps as f64).sqrt();
        let gamma = bn.gamma.data()[ch] as f64;
        let beta = bn.beta.data()[ch] as f64;
        for sn in 0..n {
            let base = (sn * c + ch) * plane;
            for i in 0..plane {
                let xhat = (data[base + i] as f64 - mean) * inv_std;
                out.data_mut()[base + i] = (gamma * xhat + beta) as f32;
            }
        }
    }
    Ok(out)
}

/// Backward pass through training-mode normalization (batch statistics).
pub fn batchnorm_backward(grad_out: &Tensor, cache: &BnCache, bn: &BatchNorm) -> Result<BnGrads> {
    let (n, c, h, w) = check_channels(grad_out, bn, "batchnorm_backward")?;
    if grad_out.shape() != cache.normalized.shape() {
        return Err(Error::shape(
            "batchnorm_backward",
            format!("{:?}", cache.normalized.shape()),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let plane = h * w;
    let m = (n * plane) as f64;
    let go = grad_out.data();
    let xhat = cache.normalized.data();

    let mut grad_input = Tensor::zeros(grad_out.shape());
    let mut grad_gamma = Tensor::zeros(&[c]);
    let mut grad_beta = Tensor::zeros(&[c]);

    for ch in 0..c {
        let mut sum_g = 0.0f64;
        let mut sum_gx = 0.0f64;
        for sn in 0..n {
            let base = (sn * c + ch) * plane;
            for i in 0..plane {
                let g = go[base + i] as f64;
                sum_g += g;
                sum_gx += g * xhat[base + i] as f64;
            }
        }
        grad_beta.data_mut()[ch] = sum_g as f32;
        grad_gamma.data_mut()[ch] = sum_gx as f32;

        let gamma = bn.gamma.data()[ch] as f64;
        let scale = gamma * cache.inv_std[ch];
        let mean_g = sum_g / m;
        let mean_gx = sum_gx / m;
        for sn in 0..n {
            let base = (sn * c + ch) * plane;
            for i in 0..plane {
                let g = go[base + i] as f64;
                let xh = xhat[base + i] as f64;
                grad_input.data_mut()[base + i] = (scale * (g - mean_g - xh * mean_gx)) as f32;
            }
        }
    }

    Ok(BnGrads {
        input: grad_input,
        gamma: grad_gamma,
        beta: grad_beta,
    })
}

/// Elementwise max(x, 0).
pub fn relu_forward(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Passes gradient where the forward input was strictly positive; the
/// subgradient at exactly zero is taken as zero.
pub fn relu_backward(grad_out: &Tensor, input: &Tensor) -> Result<Tensor> {
    if grad_out.shape() != input.shape() {
        return Err(Error::shape(
            "relu_backward",
            format!("{:?}", input.shape()),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let mut out = grad_out.clone();
    for (g, &x) in out.data_mut().iter_mut().zip(input.data()) {
        if x <= 0.0 {
            *g = 0.0;
        }
    }
    Ok(out)
}
