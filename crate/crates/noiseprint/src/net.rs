//! The noiseprint extractor network.
//!
//! A DnCNN-style residual stack: one conv+ReLU layer, depth−2 conv+BN+ReLU
//! layers, and a final linear conv mapping back to one channel. The network
//! output *is* the residual (the noiseprint); for denoising use, subtract it
//! from the input. Same-padding everywhere keeps the output the size of the
//! input, and the receptive field of an output pixel is a
//! (2·depth+1)-pixel square for 3×3 kernels.

use crate::error::{Error, Result};
use crate::io::{read_container, write_container, TensorContainer};
use crate::nn::{
    batchnorm_backward, batchnorm_forward_infer, batchnorm_forward_train, conv2d_backward,
    conv2d_forward, relu_backward, relu_forward, BatchNorm, BnCache, ConvLayer, Tensor,
};
use crate::plane::Plane;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetConfig {
    pub depth: usize,
    pub channels: usize,
    pub kernel: usize,
}

impl Default for NetConfig {
    fn default() -> NetConfig {
        NetConfig { depth: 8, channels: 16, kernel: 3 }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::InvalidArgument(format!(
                "network depth must be at least 2 (first and last layer), got {}",
                self.depth
            )));
        }
        if self.channels == 0 {
            return Err(Error::InvalidArgument("channel width must be positive".into()));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "kernel size must be odd and positive, got {}",
                self.kernel
            )));
        }
        Ok(())
    }

    /// Side length of the input square influencing one output pixel.
    pub fn receptive_field(&self) -> usize {
        self.depth * (self.kernel - 1) + 1
    }
}

/// Identifies a parameter's role so optimizers can treat them differently
/// (weight decay applies to conv weights only).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    BnGamma,
    BnBeta,
}

#[derive(Debug, Clone)]
pub struct NoiseprintNet {
    config: NetConfig,
    bn_eps: f32,
    bn_momentum: f32,
    first: ConvLayer,
    middle: Vec<(ConvLayer, BatchNorm)>,
    last: ConvLayer,
}

/// Per-layer values cached by a training-mode forward pass.
pub struct NetTrace {
    input: Tensor,
    first_pre: Tensor,
    middle: Vec<MiddleTrace>,
    last_input: Tensor,
}

struct MiddleTrace {
    conv_in: Tensor,
    bn_cache: BnCache,
    bn_out: Tensor,
}

pub struct NetGrads {
    /// Parameter gradients in [`NoiseprintNet::params`] order.
    pub params: Vec<Tensor>,
    pub input: Tensor,
}

impl NoiseprintNet {
    /// Fan-in-scaled random initialization.
    pub fn he_init(config: NetConfig, rng: &mut ChaCha8Rng) -> Result<NoiseprintNet> {
        config.validate()?;
        let c = config.channels;
        let k = config.kernel;
        let mut middle = Vec::with_capacity(config.depth - 2);
        let first = ConvLayer::he_init(1, c, k, rng)?;
        for _ in 0..config.depth - 2 {
            middle.push((ConvLayer::he_init(c, c, k, rng)?, BatchNorm::new(c, 1e-5, 0.9)?));
        }
        let last = ConvLayer::he_init(c, 1, k, rng)?;
        Ok(NoiseprintNet { config, bn_eps: 1e-5, bn_momentum: 0.9, first, middle, last })
    }

    pub fn config(&self) -> NetConfig {
        self.config
    }

    pub fn receptive_field(&self) -> usize {
        self.config.receptive_field()
    }

    /// Inference-mode forward pass over a [n, 1, h, w] batch; batch
    /// normalization uses running statistics, so single images and batches
    /// produce identical outputs.
    pub fn forward_infer(&self, input: &Tensor) -> Result<Tensor> {
        let mut x = relu_forward(&conv2d_forward(input, &self.first)?);
        for (conv, bn) in &self.middle {
            x = relu_forward(&batchnorm_forward_infer(&conv2d_forward(&x, conv)?, bn)?);
        }
        conv2d_forward(&x, &self.last)
    }

    /// Training-mode forward pass; batch normalization uses batch statistics
    /// and updates running estimates. The trace carries everything
    /// [`backward`](Self::backward) needs.
    pub fn forward_train(&mut self, input: &Tensor) -> Result<(Tensor, NetTrace)> {
        let first_pre = conv2d_forward(input, &self.first)?;
        let mut x = relu_forward(&first_pre);
        let mut middle_traces = Vec::with_capacity(self.middle.len());
        for (conv, bn) in &mut self.middle {
            let conv_in = x;
            let conv_out = conv2d_forward(&conv_in, conv)?;
            let (bn_out, bn_cache) = batchnorm_forward_train(&conv_out, bn)?;
            x = relu_forward(&bn_out);
            middle_traces.push(MiddleTrace { conv_in, bn_cache, bn_out });
        }
        let last_input = x;
        let out = conv2d_forward(&last_input, &self.last)?;
        Ok((
            out,
            NetTrace {
                input: input.clone(),
                first_pre,
                middle: middle_traces,
                last_input,
            },
        ))
    }

    /// Backpropagates `grad_out` through the trace of a training-mode
    /// forward pass. Gradients come back in [`params`](Self::params) order.
    pub fn backward(&self, trace: &NetTrace, grad_out: &Tensor) -> Result<NetGrads> {
        let last = conv2d_backward(&trace.last_input, &self.last, grad_out)?;
        let mut grad = relu_backward(
            &last.input,
            trace.middle.last().map(|m| &m.bn_out).unwrap_or(&trace.first_pre),
        )?;

        // Middle gradients are collected innermost-last, then reversed into
        // declaration order.
        let mut middle_grads = Vec::with_capacity(self.middle.len());
        for (i, (conv, bn)) in self.middle.iter().enumerate().rev() {
            let mt = &trace.middle[i];
            let bg = batchnorm_backward(&grad, &mt.bn_cache, bn)?;
            let cg = conv2d_backward(&mt.conv_in, conv, &bg.input)?;
            let upstream_pre = if i == 0 { &trace.first_pre } else { &trace.middle[i - 1].bn_out };
            grad = relu_backward(&cg.input, upstream_pre)?;
            middle_grads.push((cg.weight, cg.bias, bg.gamma, bg.beta));
        }
        middle_grads.reverse();

        let first = conv2d_backward(&trace.input, &self.first, &grad)?;

        let mut params = Vec::with_capacity(4 + 4 * self.middle.len());
        params.push(first.weight);
        params.push(first.bias);
        for (w, b, g, beta) in middle_grads {
            params.push(w);
            params.push(b);
            params.push(g);
            params.push(beta);
        }
        params.push(last.weight);
        params.push(last.bias);
        Ok(NetGrads { params, input: first.input })
    }

    /// Trainable parameters in a fixed order: first conv (weight, bias),
    /// then per middle layer (conv weight, conv bias, gamma, beta), then
    /// last conv (weight, bias). Running statistics are not parameters.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(4 + 4 * self.middle.len());
        out.push(self.first.weight());
        out.push(self.first.bias());
        for (conv, bn) in &self.middle {
            out.push(conv.weight());
            out.push(conv.bias());
            out.push(&bn.gamma);
            out.push(&bn.beta);
        }
        out.push(self.last.weight());
        out.push(self.last.bias());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(4 + 4 * self.middle.len());
        let (w, b) = self.first.params_mut();
        out.push(w);
        out.push(b);
        for (conv, bn) in &mut self.middle {
            let (w, b) = conv.params_mut();
            out.push(w);
            out.push(b);
            out.push(&mut bn.gamma);
            out.push(&mut bn.beta);
        }
        let (w, b) = self.last.params_mut();
        out.push(w);
        out.push(b);
        out
    }

    /// Kinds aligned with the [`params`](Self::params) ordering.
    pub fn param_kinds(&self) -> Vec<ParamKind> {
        let mut out = Vec::with_capacity(4 + 4 * self.middle.len());
        out.push(ParamKind::ConvWeight);
        out.push(ParamKind::ConvBias);
        for _ in &self.middle {
            out.push(ParamKind::ConvWeight);
            out.push(ParamKind::ConvBias);
            out.push(ParamKind::BnGamma);
            out.push(ParamKind::BnBeta);
        }
        out.push(ParamKind::ConvWeight);
        out.push(ParamKind::ConvBias);
        out
    }

    /// Extracts the noiseprint of one image. The image must hold values in
    /// [0, 1] and be at least the receptive field on each side, so every
    /// output pixel sees a full neighborhood.
    pub fn extract_residual(&self, image: &Plane) -> Result<Plane> {
        let rf = self.receptive_field();
        if image.width() < rf || image.height() < rf {
            return Err(Error::InvalidArgument(format!(
                "image {}x{} is smaller than the {rf}-pixel receptive field",
                image.width(),
                image.height()
            )));
        }
        let (lo, hi) = image.min_max();
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) {
            return Err(Error::InvalidArgument(format!(
                "image values must lie in [0, 1], found range [{lo}, {hi}]"
            )));
        }
        let out = self.forward_infer(&image.to_tensor())?;
        Plane::from_tensor(&out)
    }

    /// Content-addressed identifier of the weights (and architecture), used
    /// to stamp artifacts derived from this network.
    pub fn weights_digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(
            format!(
                "depth {} channels {} kernel {} eps {} momentum {}\n",
                self.config.depth, self.config.channels, self.config.kernel, self.bn_eps,
                self.bn_momentum
            )
            .as_bytes(),
        );
        for (name, tensor) in self.named_tensors() {
            hasher.update(name.as_bytes());
            for &v in tensor.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        let mut hex = String::with_capacity(16);
        for byte in digest.iter().take(8) {
            hex.push_str(&format!("{byte:02x}"));
        }
        hex
    }

    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        out.push(("layer00.conv.weight".to_string(), self.first.weight()));
        out.push(("layer00.conv.bias".to_string(), self.first.bias()));
        for (i, (conv, bn)) in self.middle.iter().enumerate() {
            let l = i + 1;
            out.push((format!("layer{l:02}.conv.weight"), conv.weight()));
            out.push((format!("layer{l:02}.conv.bias"), conv.bias()));
            out.push((format!("layer{l:02}.bn.gamma"), &bn.gamma));
            out.push((format!("layer{l:02}.bn.beta"), &bn.beta));
            out.push((format!("layer{l:02}.bn.running_mean"), &bn.running_mean));
            out.push((format!("layer{l:02}.bn.running_var"), &bn.running_var));
        }
        let l = self.config.depth - 1;
        out.push((format!("layer{l:02}.conv.weight"), self.last.weight()));
        out.push((format!("layer{l:02}.conv.bias"), self.last.bias()));
        out
    }

    pub fn to_container(&self) -> TensorContainer {
        let mut c = TensorContainer::new();
        c.push_meta("kind", "noiseprint-net").expect("fixed key");
        c.push_meta("depth", &self.config.depth.to_string()).expect("fixed key");
        c.push_meta("channels", &self.config.channels.to_string()).expect("fixed key");
        c.push_meta("kernel", &self.config.kernel.to_string()).expect("fixed key");
        c.push_meta("bn.eps", &self.bn_eps.to_string()).expect("fixed key");
        c.push_meta("bn.momentum", &self.bn_momentum.to_string()).expect("fixed key");
        for (name, tensor) in self.named_tensors() {
            c.push_tensor(&name, tensor.clone()).expect("names are unique by construction");
        }
        c
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_container(path, &self.to_container())
    }

    pub fn from_container(container: &TensorContainer) -> Result<NoiseprintNet> {
        let meta_usize = |key: &str| -> Result<usize> {
            container
                .meta_value(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::InvalidArgument(format!("weights file lacks numeric meta \"{key}\"")))
        };
        let meta_f32 = |key: &str| -> Result<f32> {
            container
                .meta_value(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::InvalidArgument(format!("weights file lacks numeric meta \"{key}\"")))
        };
        let config = NetConfig {
            depth: meta_usize("depth")?,
            channels: meta_usize("channels")?,
            kernel: meta_usize("kernel")?,
        };
        config.validate()?;
        let bn_eps = meta_f32("bn.eps")?;
        let bn_momentum = meta_f32("bn.momentum")?;
        let c = config.channels;
        let k = config.kernel;

        let conv = |layer: usize, ic: usize, oc: usize| -> Result<ConvLayer> {
            let w = container.tensor_with_shape(&format!("layer{layer:02}.conv.weight"), &[oc, ic, k, k])?;
            let b = container.tensor_with_shape(&format!("layer{layer:02}.conv.bias"), &[oc])?;
            ConvLayer::new(w.clone(), b.clone())
        };
        let first = conv(0, 1, c)?;
        let mut middle = Vec::with_capacity(config.depth - 2);
        for i in 1..config.depth - 1 {
            let conv_layer = conv(i, c, c)?;
            let mut bn = BatchNorm::new(c, bn_eps, bn_momentum)?;
            bn.gamma = container.tensor_with_shape(&format!("layer{i:02}.bn.gamma"), &[c])?.clone();
            bn.beta = container.tensor_with_shape(&format!("layer{i:02}.bn.beta"), &[c])?.clone();
            bn.running_mean =
                container.tensor_with_shape(&format!("layer{i:02}.bn.running_mean"), &[c])?.clone();
            bn.running_var =
                container.tensor_with_shape(&format!("layer{i:02}.bn.running_var"), &[c])?.clone();
            middle.push((conv_layer, bn));
        }
        let last = conv(config.depth - 1, c, 1)?;
        Ok(NoiseprintNet { config, bn_eps, bn_momentum, first, middle, last })
    }

    pub fn load(path: &Path) -> Result<NoiseprintNet> {
        let container = read_container(path)?;
        if container.meta_value("kind") != Some("noiseprint-net") {
            return Err(Error::InvalidArgument(format!(
                "{} is not a network weights file",
                path.display()
            )));
        }
        NoiseprintNet::from_container(&container)
    }
}

/// Double-precision mirror of a network, used as a gradient-check oracle.
///
/// Parameters are widened from the f32 network once, and the forward pass
/// then runs entirely in f64 (training-mode batch statistics, no running
/// average updates). Finite differences through this mirror are free of f32
/// store noise, so comparing them against the analytic backward pass
/// measures the backward implementation itself instead of rounding effects.
/// Perturb parameters through [`param_mut`](Self::param_mut), indexed in
/// [`NoiseprintNet::params`] order.
pub struct ReferenceNet {
    config: NetConfig,
    eps: f64,
    params: Vec<Vec<f64>>,
}

impl NoiseprintNet {
    /// Widens this network's parameters into a [`ReferenceNet`].
    pub fn reference_net(&self) -> ReferenceNet {
        ReferenceNet {
            config: self.config,
            eps: self.bn_eps as f64,
            params: self
                .params()
                .iter()
                .map(|t| t.data().iter().map(|&v| v as f64).collect())
                .collect(),
        }
    }
}

/// Same-padding convolution in f64: `input` is `[n, ci, h, w]` flat,
/// `weight` is `[co, ci, k, k]` flat.
fn conv_f64(
    input: &[f64],
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    bias: &[f64],
    co: usize,
    k: usize,
) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let mut out = vec![0.0f64; n * co * h * w];
    for s in 0..n {
        for o in 0..co {
            let ob = (s * co + o) * h * w;
            for y in 0..h {
                for x in 0..w {
                    let mut acc = bias[o];
                    for i in 0..ci {
                        let ib = (s * ci + i) * h * w;
                        for dy in 0..k {
                            let sy = y as isize + dy as isize - pad;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for dx in 0..k {
                                let sx = x as isize + dx as isize - pad;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                acc += input[ib + sy as usize * w + sx as usize]
                                    * weight[((o * ci + i) * k + dy) * k + dx];
                            }
                        }
                    }
                    out[ob + y * w + x] = acc;
                }
            }
        }
    }
    out
}

impl ReferenceNet {
    /// Mutable access to one parameter tensor's f64 values.
    pub fn param_mut(&mut self, ti: usize) -> &mut [f64] {
        &mut self.params[ti]
    }

    /// Training-mode forward over an `[n, 1, h, w]` batch, entirely in f64.
    /// Returns the flat residual batch (same shape).
    pub fn forward_train(&self, input: &Tensor) -> Result<Vec<f64>> {
        let (n, c_in, h, w) = input.dims4("reference forward")?;
        if c_in != 1 {
            return Err(Error::InvalidArgument(format!(
                "reference forward expects single-channel input, got {c_in} channels"
            )));
        }
        let c = self.config.channels;
        let k = self.config.kernel;
        let relu = |v: &mut Vec<f64>| {
            for x in v.iter_mut() {
                if *x < 0.0 {
                    *x = 0.0;
                }
            }
        };

        let widened: Vec<f64> = input.data().iter().map(|&v| v as f64).collect();
        let mut x = conv_f64(&widened, n, 1, h, w, &self.params[0], &self.params[1], c, k);
        relu(&mut x);
        for i in 0..self.config.depth - 2 {
            let base = 2 + 4 * i;
            let mut pre = conv_f64(
                &x,
                n,
                c,
                h,
                w,
                &self.params[base],
                &self.params[base + 1],
                c,
                k,
            );
            let gamma = &self.params[base + 2];
            let beta = &self.params[base + 3];
            let m = (n * h * w) as f64;
            for ch in 0..c {
                let mut sum = 0.0;
                let mut sum_sq = 0.0;
                for s in 0..n {
                    let cb = (s * c + ch) * h * w;
                    for v in &pre[cb..cb + h * w] {
                        sum += v;
                        sum_sq += v * v;
                    }
                }
                let mean = sum / m;
                let var = (sum_sq / m - mean * mean).max(0.0);
                let inv_std = 1.0 / (var + self.eps).sqrt();
                for s in 0..n {
                    let cb = (s * c + ch) * h * w;
                    for v in &mut pre[cb..cb + h * w] {
                        *v = gamma[ch] * ((*v - mean) * inv_std) + beta[ch];
                    }
                }
            }
            relu(&mut pre);
            x = pre;
        }
        let base = 2 + 4 * (self.config.depth - 2);
        Ok(conv_f64(&x, n, c, h, w, &self.params[base], &self.params[base + 1], 1, k))
    }
}

/// How large images are split for extraction: fixed-size tiles whose
/// interiors are stitched back together. Each output pixel takes its value
/// from the tile whose center is nearest, which keeps every used pixel at
/// least `overlap` away from interior tile borders.
#[derive(Debug, Clone, Copy)]
pub struct TilingPolicy {
    pub tile: usize,
    pub overlap: usize,
}

impl TilingPolicy {
    pub fn new(tile: usize, overlap: usize) -> Result<TilingPolicy> {
        if tile == 0 || tile <= 2 * overlap {
            return Err(Error::InvalidArgument(format!(
                "tile size {tile} must exceed twice the overlap {overlap}"
            )));
        }
        Ok(TilingPolicy { tile, overlap })
    }
}

/// Tile origins along one axis: step `tile − 2·overlap`, with the last tile
/// clamped flush to the far edge.
fn tile_origins(dim: usize, tile: usize, overlap: usize) -> Vec<usize> {
    if dim <= tile {
        return vec![0];
    }
    let step = tile - 2 * overlap;
    let mut origins = Vec::new();
    let mut o = 0;
    loop {
        if o + tile >= dim {
            origins.push(dim - tile);
            break;
        }
        origins.push(o);
        o += step;
    }
    origins
}

/// Per-tile ownership intervals along one axis: Voronoi cells of the tile
/// centers, spanning the whole axis.
fn ownership(origins: &[usize], tile: usize, dim: usize) -> Vec<(usize, usize)> {
    let mut cells = Vec::with_capacity(origins.len());
    for i in 0..origins.len() {
        let start = if i == 0 { 0 } else { (origins[i - 1] + origins[i] + tile).div_ceil(2) };
        let end = if i + 1 == origins.len() {
            dim
        } else {
            (origins[i] + origins[i + 1] + tile).div_ceil(2)
        };
        cells.push((start, end));
    }
    cells
}

/// Extracts a residual tile by tile, exactly reproducing whole-image
/// extraction away from interior tile borders (and everywhere, given the
/// overlap precondition). Images no larger than one tile fall through to
/// [`NoiseprintNet::extract_residual`].
pub fn tiled_extract(net: &NoiseprintNet, image: &Plane, policy: &TilingPolicy) -> Result<Plane> {
    let rf = net.receptive_field();
    let needed = rf.div_ceil(2);
    if policy.overlap < needed {
        return Err(Error::InvalidArgument(format!(
            "tile overlap {} is insufficient for a {rf}-pixel receptive field (need at least {needed})",
            policy.overlap
        )));
    }
    if image.width() <= policy.tile && image.height() <= policy.tile {
        return net.extract_residual(image);
    }
    if image.width() < rf || image.height() < rf {
        return Err(Error::InvalidArgument(format!(
            "image {}x{} is smaller than the {rf}-pixel receptive field",
            image.width(),
            image.height()
        )));
    }
    let (lo, hi) = image.min_max();
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) {
        return Err(Error::InvalidArgument(format!(
            "image values must lie in [0, 1], found range [{lo}, {hi}]"
        )));
    }

    let xs = tile_origins(image.width(), policy.tile, policy.overlap);
    let ys = tile_origins(image.height(), policy.tile, policy.overlap);
    let x_cells = ownership(&xs, policy.tile, image.width());
    let y_cells = ownership(&ys, policy.tile, image.height());
    let tile_w = policy.tile.min(image.width());
    let tile_h = policy.tile.min(image.height());

    let mut out = Plane::zeros(image.width(), image.height());
    for (yi, &oy) in ys.iter().enumerate() {
        for (xi, &ox) in xs.iter().enumerate() {
            let tile = image.crop(ox, oy, tile_w, tile_h)?;
            let residual = Plane::from_tensor(&net.forward_infer(&tile.to_tensor())?)?;
            let (cx0, cx1) = x_cells[xi];
            let (cy0, cy1) = y_cells[yi];
            let owned = residual.crop(cx0 - ox, cy0 - oy, cx1 - cx0, cy1 - cy0)?;
            out.paste(&owned, cx0, cy0)?;
        }
    }
    Ok(out)
}
