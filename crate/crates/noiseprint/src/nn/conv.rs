//! 2-D convolution with stride 1 and zero same-padding.
//!
//! Layout: inputs and outputs are rank-4 `[batch, channels, height, width]`,
//! weights are `[out_ch, in_ch, k, k]` with odd `k`. Every output element is
//! accumulated in f64 in a fixed order, so results do not depend on the
//! number of worker threads: parallelism is only across samples, and the
//! per-sample loops always run in the same sequence.
//!
//! The hot paths widen each input plane to f64 once per sample and then run
//! fused-tap kernels (specialized for k = 3) and fixed-lane dot products,
//! which keeps the f64 accumulation mandated for gradient stability from
//! dominating the training budget.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct ConvLayer {
    weight: Tensor,
    bias: Tensor,
}

impl ConvLayer {
    /// Wraps a `[out_ch, in_ch, k, k]` weight tensor and a `[out_ch]` bias.
    pub fn new(weight: Tensor, bias: Tensor) -> Result<ConvLayer> {
        let (oc, _ic, kh, kw) = weight.dims4("conv weight")?;
        if kh != kw {
            return Err(Error::shape(
                "conv weight",
                "square kernel",
                format!("{kh}x{kw}"),
            ));
        }
        if kh % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv kernel size must be odd for same padding, got {kh}"
            )));
        }
        if bias.shape() != [oc] {
            return Err(Error::shape(
                "conv bias",
                format!("[{oc}]"),
                format!("{:?}", bias.shape()),
            ));
        }
        Ok(ConvLayer { weight, bias })
    }

    pub fn he_init(in_ch: usize, out_ch: usize, k: usize, rng: &mut impl rand::Rng) -> Result<ConvLayer> {
        let fan_in = (in_ch * k * k) as f32;
        let std = (2.0 / fan_in).sqrt();
        ConvLayer::new(
            Tensor::randn(&[out_ch, in_ch, k, k], std, rng),
            Tensor::zeros(&[out_ch]),
        )
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn weight_mut(&mut self) -> &mut Tensor {
        &mut self.weight
    }

    pub fn bias_mut(&mut self) -> &mut Tensor {
        &mut self.bias
    }

    /// Both parameter tensors at once, for callers that collect disjoint
    /// mutable borrows across several layers.
    pub fn params_mut(&mut self) -> (&mut Tensor, &mut Tensor) {
        (&mut self.weight, &mut self.bias)
    }

    /// Weights widened to f64, laid out `[oc][ic][k*k]`.
    fn weights_f64(&self) -> Vec<f64> {
        self.weight.data().iter().map(|&v| v as f64).collect()
    }

    /// Adjoint weights widened to f64: channel roles swapped and both
    /// spatial directions flipped, laid out `[ic][oc][k*k]`. Convolving the
    /// output gradient with these taps yields the input gradient.
    fn adjoint_weights_f64(&self) -> Vec<f64> {
        let (oc, ic, k, _) = self.weight.dims4("conv weight").expect("validated at construction");
        let src = self.weight.data();
        let mut flipped = vec![0.0f64; src.len()];
        for o in 0..oc {
            for i in 0..ic {
                for t in 0..k * k {
                    flipped[(i * oc + o) * k * k + (k * k - 1 - t)] = src[(o * ic + i) * k * k + t] as f64;
                }
            }
        }
        flipped
    }
}

/// Gradients produced by [`conv2d_backward`].
#[derive(Debug)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

fn check_input(input: &Tensor, layer: &ConvLayer, context: &str) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = input.dims4(context)?;
    if c != layer.in_channels() {
        return Err(Error::shape(
            context,
            format!("{} input channels", layer.in_channels()),
            format!("{c}"),
        ));
    }
    Ok((n, c, h, w))
}

#[inline]
fn widen(src: &[f32], dst: &mut [f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *s as f64;
    }
}

/// Adds the 3x3-filtered `plane` into `acc`, all three column taps fused.
fn accumulate_k3(acc: &mut [f64], plane: &[f64], taps: &[f64], h: usize, w: usize) {
    for ky in 0..3 {
        let w0 = taps[ky * 3];
        let w1 = taps[ky * 3 + 1];
        let w2 = taps[ky * 3 + 2];
        let y0 = 1usize.saturating_sub(ky);
        let y1 = (h + 1).saturating_sub(ky).min(h);
        for y in y0..y1 {
            let iy = y + ky - 1;
            let row = &plane[iy * w..(iy + 1) * w];
            let arow = &mut acc[y * w..(y + 1) * w];
            if w >= 2 {
                let n = w - 2;
                let s0 = &row[0..n];
                let s1 = &row[1..1 + n];
                let s2 = &row[2..2 + n];
                let dst = &mut arow[1..1 + n];
                for i in 0..n {
                    dst[i] += w0 * s0[i] + w1 * s1[i] + w2 * s2[i];
                }
                arow[0] += w1 * row[0] + w2 * row[1];
                arow[w - 1] += w0 * row[w - 2] + w1 * row[w - 1];
            } else {
                arow[0] += w1 * row[0];
            }
        }
    }
}

/// Generic odd-k tap accumulation (per-tap shifted rows).
fn accumulate_generic(acc: &mut [f64], plane: &[f64], taps: &[f64], h: usize, w: usize, k: usize) {
    let pad = k / 2;
    for ky in 0..k {
        let y0 = pad.saturating_sub(ky);
        let y1 = (h + pad).saturating_sub(ky).min(h);
        for kx in 0..k {
            let wgt = taps[ky * k + kx];
            let x0 = pad.saturating_sub(kx);
            let x1 = (w + pad).saturating_sub(kx).min(w);
            if x0 >= x1 {
                continue;
            }
            let dx = kx as isize - pad as isize;
            for y in y0..y1 {
                let iy = y + ky - pad;
                let src = &plane[iy * w..(iy + 1) * w];
                let src = &src[(x0 as isize + dx) as usize..(x1 as isize + dx) as usize];
                let dst = &mut acc[y * w + x0..y * w + x1];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += wgt * *s;
                }
            }
        }
    }
}

/// Convolves one widened input sample into all `oc` output planes of `out`.
/// `taps` is `[oc][ic][k*k]`.
fn conv_sample(
    out: &mut [f32],
    in64: &[f64],
    taps: &[f64],
    bias: &[f32],
    ic: usize,
    oc: usize,
    h: usize,
    w: usize,
    k: usize,
) {
    let plane = h * w;
    let mut acc = vec![0.0f64; plane];
    for o in 0..oc {
        acc.fill(bias[o] as f64);
        for c in 0..ic {
            let t = &taps[(o * ic + c) * k * k..(o * ic + c + 1) * k * k];
            let p = &in64[c * plane..(c + 1) * plane];
            if k == 3 {
                accumulate_k3(&mut acc, p, t, h, w);
            } else {
                accumulate_generic(&mut acc, p, t, h, w, k);
            }
        }
        for (dst, src) in out[o * plane..(o + 1) * plane].iter_mut().zip(&acc) {
            *dst = *src as f32;
        }
    }
}

/// Same-padded convolution; output shape equals `[n, out_ch, h, w]`.
pub fn conv2d_forward(input: &Tensor, layer: &ConvLayer) -> Result<Tensor> {
    let (n, ic, h, w) = check_input(input, layer, "conv2d_forward")?;
    let oc = layer.out_channels();
    let k = layer.kernel();
    let taps = layer.weights_f64();
    let bias = layer.bias.data();
    let in_data = input.data();
    let mut out = Tensor::zeros(&[n, oc, h, w]);

    out.data_mut()
        .par_chunks_mut(oc * h * w)
        .enumerate()
        .for_each(|(sn, out_sample)| {
            let mut in64 = vec![0.0f64; ic * h * w];
            widen(&in_data[sn * ic * h * w..(sn + 1) * ic * h * w], &mut in64);
            conv_sample(out_sample, &in64, &taps, bias, ic, oc, h, w, k);
        });
    Ok(out)
}

/// Dot product over fixed four-lane partial sums; the summation order is a
/// function of the slice length only.
#[inline]
fn dot_lanes(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let mut lanes = [0.0f64; 4];
    let chunks = n / 4;
    for ch in 0..chunks {
        let i = ch * 4;
        lanes[0] += a[i] * b[i];
        lanes[1] += a[i + 1] * b[i + 1];
        lanes[2] += a[i + 2] * b[i + 2];
        lanes[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0f64;
    for i in chunks * 4..n {
        tail += a[i] * b[i];
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

/// Per-sample contribution to the weight and bias gradients.
fn weight_grads_sample(
    g64: &[f64],
    in64: &[f64],
    ic: usize,
    oc: usize,
    h: usize,
    w: usize,
    k: usize,
) -> (Vec<f64>, Vec<f64>) {
    let pad = k / 2;
    let plane = h * w;
    let mut gw = vec![0.0f64; oc * ic * k * k];
    let mut gb = vec![0.0f64; oc];
    for o in 0..oc {
        let g_plane = &g64[o * plane..(o + 1) * plane];
        gb[o] = {
            let mut lanes = [0.0f64; 4];
            let chunks = plane / 4;
            for ch in 0..chunks {
                let i = ch * 4;
                lanes[0] += g_plane[i];
                lanes[1] += g_plane[i + 1];
                lanes[2] += g_plane[i + 2];
                lanes[3] += g_plane[i + 3];
            }
            let mut tail = 0.0f64;
            for v in &g_plane[chunks * 4..] {
                tail += v;
            }
            (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
        };
        for c in 0..ic {
            let i_plane = &in64[c * plane..(c + 1) * plane];
            let cell = &mut gw[(o * ic + c) * k * k..(o * ic + c + 1) * k * k];
            for ky in 0..k {
                let y0 = pad.saturating_sub(ky);
                let y1 = (h + pad).saturating_sub(ky).min(h);
                for kx in 0..k {
                    let x0 = pad.saturating_sub(kx);
                    let x1 = (w + pad).saturating_sub(kx).min(w);
                    if x0 >= x1 {
                        continue;
                    }
                    let dx = kx as isize - pad as isize;
                    let mut sum = 0.0f64;
                    for y in y0..y1 {
                        let iy = y + ky - pad;
                        let g_row = &g_plane[y * w + x0..y * w + x1];
                        let i_row = &i_plane
                            [(iy * w) as usize + (x0 as isize + dx) as usize..iy * w + (x1 as isize + dx) as usize];
                        sum += dot_lanes(g_row, i_row);
                    }
                    cell[ky * k + kx] += sum;
                }
            }
        }
    }
    (gw, gb)
}

/// Gradients of the convolution with respect to input, weight, and bias.
///
/// `input` must be the tensor the forward pass saw; `grad_out` has the
/// forward output's shape.
pub fn conv2d_backward(input: &Tensor, layer: &ConvLayer, grad_out: &Tensor) -> Result<ConvGrads> {
    let (n, ic, h, w) = check_input(input, layer, "conv2d_backward")?;
    let oc = layer.out_channels();
    let k = layer.kernel();
    let expected = [n, oc, h, w];
    if grad_out.shape() != expected {
        return Err(Error::shape(
            "conv2d_backward",
            format!("grad shape {expected:?}"),
            format!("{:?}", grad_out.shape()),
        ));
    }

    let plane = h * w;
    let adjoint = layer.adjoint_weights_f64();
    let zero_bias = vec![0.0f32; ic];
    let go = grad_out.data();
    let in_data = input.data();

    let mut grad_input = Tensor::zeros(&[n, ic, h, w]);
    let mut partials: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(n);

    grad_input
        .data_mut()
        .par_chunks_mut(ic * plane)
        .enumerate()
        .map(|(sn, gi_sample)| {
            let mut g64 = vec![0.0f64; oc * plane];
            widen(&go[sn * oc * plane..(sn + 1) * oc * plane], &mut g64);
            // Input gradient: the adjoint convolution of the output gradient.
            conv_sample(gi_sample, &g64, &adjoint, &zero_bias, oc, ic, h, w, k);
            let mut in64 = vec![0.0f64; ic * plane];
            widen(&in_data[sn * ic * plane..(sn + 1) * ic * plane], &mut in64);
            weight_grads_sample(&g64, &in64, ic, oc, h, w, k)
        })
        .collect_into_vec(&mut partials);

    // Merge the per-sample contributions in sample order so the result does
    // not depend on scheduling.
    let mut gw = vec![0.0f64; oc * ic * k * k];
    let mut gb = vec![0.0f64; oc];
    for (pw, pb) in &partials {
        for (a, b) in gw.iter_mut().zip(pw) {
            *a += b;
        }
        for (a, b) in gb.iter_mut().zip(pb) {
            *a += b;
        }
    }

    Ok(ConvGrads {
        input: grad_input,
        weight: Tensor::from_vec(&[oc, ic, k, k], gw.iter().map(|&v| v as f32).collect())?,
        bias: Tensor::from_vec(&[oc], gb.iter().map(|&v| v as f32).collect())?,
    })
}
