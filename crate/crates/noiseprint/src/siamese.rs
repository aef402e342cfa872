//! Siamese training of the noiseprint network.
//!
//! Minibatches are built from sets of patches that share a camera model and
//! a spatial position (modulo the artifact alignment grid) but come from
//! distinct images. All patch pairs in a batch are compared at once: pairs
//! from the same model and position are positives, everything else is a
//! negative, and a distance-based logistic loss pushes positive residual
//! distances below negative ones.

use crate::error::{Error, Result};
use crate::io::{write_atomic, write_container, read_container, TensorContainer};
use crate::net::{NoiseprintNet, ParamKind};
use crate::nn::{adam_step, AdamConfig, AdamState, Tensor};
use crate::plane::Plane;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// A training image with its origin labels.
#[derive(Debug, Clone)]
pub struct TrainImage {
    pub model_id: usize,
    pub device_id: usize,
    pub image_id: usize,
    pub pixels: Plane,
}

/// One sampled patch, tagged with everything the pairing rule needs.
#[derive(Debug, Clone)]
pub struct PatchSample {
    pub model_id: usize,
    pub device_id: usize,
    pub image_id: usize,
    pub position: (usize, usize),
    pub pixels: Plane,
}

/// Minibatch structure: `n_sets` sets of `set_size` patches each; a set
/// shares one camera model and one position, across distinct images.
/// Positions snap to a grid of the given modulus so that same-position
/// patches are exactly aligned with the periodic artifact phase.
#[derive(Debug, Clone, Copy)]
pub struct BatchSpec {
    pub n_sets: usize,
    pub set_size: usize,
    pub patch: usize,
    pub position_modulus: usize,
}

impl Default for BatchSpec {
    fn default() -> BatchSpec {
        BatchSpec { n_sets: 16, set_size: 4, patch: 32, position_modulus: 8 }
    }
}

impl BatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_sets == 0 {
            return Err(Error::InvalidArgument("a batch needs at least one set".into()));
        }
        if self.set_size < 2 {
            return Err(Error::InvalidArgument(format!(
                "set size must be at least 2 so every patch has a positive partner, got {}",
                self.set_size
            )));
        }
        if self.patch == 0 {
            return Err(Error::InvalidArgument("patch side must be positive".into()));
        }
        if self.position_modulus == 0 {
            return Err(Error::InvalidArgument("position modulus must be positive".into()));
        }
        Ok(())
    }

    pub fn total_patches(&self) -> usize {
        self.n_sets * self.set_size
    }
}

/// How two patches are declared a positive pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelRule {
    /// Positive iff same camera model and same position (the real rule).
    ModelAndPosition,
    /// Positive iff same camera model, any position. Kept for the ablation
    /// experiment showing the position constraint matters.
    ModelOnly,
}

/// Symmetric ±1 pair labels over a batch; the diagonal is excluded.
#[derive(Debug, Clone)]
pub struct PairLabels {
    n: usize,
    positive: Vec<bool>,
}

impl PairLabels {
    pub fn from_samples(samples: &[PatchSample]) -> PairLabels {
        PairLabels::with_rule(samples, LabelRule::ModelAndPosition)
    }

    pub fn with_rule(samples: &[PatchSample], rule: LabelRule) -> PairLabels {
        let n = samples.len();
        let mut positive = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let same_model = samples[i].model_id == samples[j].model_id;
                positive[i * n + j] = match rule {
                    LabelRule::ModelAndPosition => {
                        same_model && samples[i].position == samples[j].position
                    }
                    LabelRule::ModelOnly => same_model,
                };
            }
        }
        PairLabels { n, positive }
    }

    /// Builds labels directly from a boolean matrix; used by tests and by
    /// callers with externally defined pairings. The diagonal is forced off
    /// and the matrix is symmetrized (an entry is positive only if both
    /// directions agree).
    pub fn from_matrix(n: usize, positive: Vec<bool>) -> Result<PairLabels> {
        if positive.len() != n * n {
            return Err(Error::shape("pair labels", format!("{n}x{n}"), format!("{}", positive.len())));
        }
        let mut p = positive;
        for i in 0..n {
            p[i * n + i] = false;
            for j in 0..i {
                let both = p[i * n + j] && p[j * n + i];
                p[i * n + j] = both;
                p[j * n + i] = both;
            }
        }
        Ok(PairLabels { n, positive: p })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// +1 for a positive pair, −1 otherwise; 0 on the diagonal.
    pub fn label(&self, i: usize, j: usize) -> i8 {
        if i == j {
            0
        } else if self.positive[i * self.n + j] {
            1
        } else {
            -1
        }
    }

    pub fn is_positive(&self, i: usize, j: usize) -> bool {
        i != j && self.positive[i * self.n + j]
    }

    /// Number of unordered pairs in the batch: n(n−1)/2.
    pub fn unordered_pairs(&self) -> usize {
        self.n * (self.n - 1) / 2
    }

    pub fn positive_unordered_pairs(&self) -> usize {
        let mut count = 0;
        for i in 0..self.n {
            for j in 0..i {
                if self.positive[i * self.n + j] {
                    count += 1;
                }
            }
        }
        count
    }

    pub fn positive_partners(&self, i: usize) -> usize {
        (0..self.n).filter(|&j| self.is_positive(i, j)).count()
    }
}

/// Models with at least `set_size` usable images (large enough for the
/// patch size), plus the models that had images but not enough of them.
pub fn eligible_models(images: &[TrainImage], spec: &BatchSpec) -> (Vec<usize>, Vec<usize>) {
    let mut models: Vec<usize> = images
        .iter()
        .filter(|im| im.pixels.width() >= spec.patch && im.pixels.height() >= spec.patch)
        .map(|im| im.model_id)
        .collect();
    models.sort_unstable();
    models.dedup();
    let mut eligible = Vec::new();
    let mut skipped = Vec::new();
    for m in models {
        let count = images
            .iter()
            .filter(|im| {
                im.model_id == m
                    && im.pixels.width() >= spec.patch
                    && im.pixels.height() >= spec.patch
            })
            .count();
        if count >= spec.set_size {
            eligible.push(m);
        } else {
            skipped.push(m);
        }
    }
    (eligible, skipped)
}

/// Draws one structured minibatch. Each set picks an eligible camera model,
/// `set_size` distinct images of that model, and one grid-aligned position
/// shared by the whole set. Models with too few images are skipped with a
/// warning on stderr; if no model is eligible the batch is infeasible.
pub fn sample_minibatch(
    images: &[TrainImage],
    spec: &BatchSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<PatchSample>, PairLabels)> {
    spec.validate()?;
    let (eligible, skipped) = eligible_models(images, spec);
    for m in &skipped {
        eprintln!(
            "warning: camera model {m} has fewer than {} usable images and was skipped",
            spec.set_size
        );
    }
    if eligible.is_empty() {
        return Err(Error::Infeasible(format!(
            "no camera model has {} or more images of at least {}x{} pixels",
            spec.set_size, spec.patch, spec.patch
        )));
    }

    let mut samples = Vec::with_capacity(spec.total_patches());
    let mut used_set_keys: HashSet<(usize, usize, usize)> = HashSet::new();
    for _ in 0..spec.n_sets {
        // Avoid two sets landing on the same (model, position): that would
        // merge them into one larger positive group. With a roomy position
        // grid a few retries always succeed; if the grid is tiny we accept
        // the collision (labels stay consistent with the rule either way).
        let mut chosen: Option<(usize, Vec<usize>, usize, usize)> = None;
        for attempt in 0..64 {
            let model = eligible[rng.gen_range(0..eligible.len())];
            let mut indices: Vec<usize> = images
                .iter()
                .enumerate()
                .filter(|(_, im)| {
                    im.model_id == model
                        && im.pixels.width() >= spec.patch
                        && im.pixels.height() >= spec.patch
                })
                .map(|(i, _)| i)
                .collect();
            indices.shuffle(rng);
            indices.truncate(spec.set_size);
            let min_w = indices.iter().map(|&i| images[i].pixels.width()).min().unwrap();
            let min_h = indices.iter().map(|&i| images[i].pixels.height()).min().unwrap();
            let nx = (min_w - spec.patch) / spec.position_modulus + 1;
            let ny = (min_h - spec.patch) / spec.position_modulus + 1;
            let x = rng.gen_range(0..nx) * spec.position_modulus;
            let y = rng.gen_range(0..ny) * spec.position_modulus;
            if used_set_keys.insert((model, x, y)) || attempt == 63 {
                chosen = Some((model, indices, x, y));
                break;
            }
        }
        let (model, indices, x, y) = chosen.expect("loop always chooses on the last attempt");
        for idx in indices {
            let image = &images[idx];
            samples.push(PatchSample {
                model_id: model,
                device_id: image.device_id,
                image_id: image.image_id,
                position: (x, y),
                pixels: image.pixels.crop(x, y, spec.patch, spec.patch)?,
            });
        }
    }
    let labels = PairLabels::from_samples(&samples);
    Ok((samples, labels))
}

/// Stacks patch planes into an [n, 1, P, P] batch tensor.
pub fn patches_to_tensor(samples: &[PatchSample]) -> Result<Tensor> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("cannot stack an empty batch".into()));
    }
    let w = samples[0].pixels.width();
    let h = samples[0].pixels.height();
    let mut data = Vec::with_capacity(samples.len() * w * h);
    for s in samples {
        if s.pixels.width() != w || s.pixels.height() != h {
            return Err(Error::shape(
                "patch stack",
                format!("{w}x{h}"),
                format!("{}x{}", s.pixels.width(), s.pixels.height()),
            ));
        }
        data.extend_from_slice(s.pixels.data());
    }
    Tensor::from_vec(&[samples.len(), 1, h, w], data)
}

/// Symmetric n×n matrix of f64 values with a zero diagonal.
#[derive(Debug, Clone)]
pub struct SquareMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(n: usize) -> SquareMatrix {
        SquareMatrix { n, data: vec![0.0; n * n] }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    /// Sets both (i, j) and (j, i).
    pub fn set_sym(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
        self.data[j * self.n + i] = v;
    }
}

/// All-pairs mean squared distances between the per-sample residuals of an
/// [n, c, h, w] batch. Entry (i, j) is the mean over all c·h·w positions of
/// the squared difference; the matrix is symmetric with a zero diagonal.
pub fn pairwise_sq_distances(residuals: &Tensor) -> Result<SquareMatrix> {
    let (n, c, h, w) = residuals.dims4("pairwise distances")?;
    let per = c * h * w;
    if per == 0 {
        return Err(Error::InvalidArgument("residuals have no pixels".into()));
    }
    let data = residuals.data();
    let mut out = SquareMatrix::zeros(n);
    for i in 0..n {
        let ri = &data[i * per..(i + 1) * per];
        for j in 0..i {
            let rj = &data[j * per..(j + 1) * per];
            let mut acc = 0.0f64;
            for (a, b) in ri.iter().zip(rj) {
                let d = (*a - *b) as f64;
                acc += d * d;
            }
            out.set_sym(i, j, acc / per as f64);
        }
    }
    Ok(out)
}

/// Loss value plus the gradient with respect to each pair distance.
pub struct DblEval {
    pub loss: f64,
    /// Symmetric zero-diagonal matrix: d(loss)/d(distance of pair (i, j)),
    /// with both anchors' contributions folded into one entry.
    pub pair_grad: SquareMatrix,
    pub anchors: usize,
}

/// Distance-based logistic loss. For each anchor patch i with at least one
/// positive partner:
///
/// ```text
/// L_i = −log( Σ_{j: positive} exp(−d_ij) / Σ_{j≠i} exp(−d_ij) )
/// ```
///
/// and the total is the mean of L_i over such anchors. Log-sum-exp keeps
/// the evaluation stable for large distances. A batch with no positive pair
/// is rejected.
pub fn dbl_loss(distances: &SquareMatrix, labels: &PairLabels) -> Result<DblEval> {
    let n = distances.n();
    if labels.n() != n {
        return Err(Error::shape("dbl_loss", format!("{n} labels"), format!("{}", labels.n())));
    }
    for i in 0..n {
        for j in 0..n {
            if !distances.get(i, j).is_finite() {
                return Err(Error::NonFinite(format!("distance between patches {i} and {j}")));
            }
        }
    }

    // Log-sum-exp over −d for a set of partner indices.
    let lse = |i: usize, include: &dyn Fn(usize) -> bool| -> Option<f64> {
        let mut max = f64::NEG_INFINITY;
        for j in 0..n {
            if j != i && include(j) {
                max = max.max(-distances.get(i, j));
            }
        }
        if max == f64::NEG_INFINITY {
            return None;
        }
        let mut sum = 0.0f64;
        for j in 0..n {
            if j != i && include(j) {
                sum += (-distances.get(i, j) - max).exp();
            }
        }
        Some(max + sum.ln())
    };

    let mut anchors = 0usize;
    let mut loss_sum = 0.0f64;
    // Per-anchor directional gradients, combined below.
    let mut directional = vec![0.0f64; n * n];
    for i in 0..n {
        let lse_pos = match lse(i, &|j| labels.is_positive(i, j)) {
            Some(v) => v,
            None => continue,
        };
        let lse_all = lse(i, &|_| true).expect("anchor with a positive has partners");
        anchors += 1;
        loss_sum += lse_all - lse_pos;
        for j in 0..n {
            if j == i {
                continue;
            }
            let w_all = (-distances.get(i, j) - lse_all).exp();
            let w_pos = if labels.is_positive(i, j) {
                (-distances.get(i, j) - lse_pos).exp()
            } else {
                0.0
            };
            directional[i * n + j] = w_pos - w_all;
        }
    }
    if anchors == 0 {
        return Err(Error::InvalidArgument(
            "batch has no positive pair; the loss is undefined".into(),
        ));
    }

    let scale = 1.0 / anchors as f64;
    let mut pair_grad = SquareMatrix::zeros(n);
    for i in 0..n {
        for j in 0..i {
            let g = scale * (directional[i * n + j] + directional[j * n + i]);
            pair_grad.set_sym(i, j, g);
        }
    }
    Ok(DblEval { loss: loss_sum * scale, pair_grad, anchors })
}

/// Mean distance over positive and negative pairs: (positive mean,
/// negative mean). An empty class yields NaN for its mean.
pub fn distance_stats(distances: &SquareMatrix, labels: &PairLabels) -> (f64, f64) {
    let n = distances.n();
    let (mut pos_sum, mut pos_n, mut neg_sum, mut neg_n) = (0.0f64, 0usize, 0.0f64, 0usize);
    for i in 0..n {
        for j in 0..i {
            if labels.is_positive(i, j) {
                pos_sum += distances.get(i, j);
                pos_n += 1;
            } else {
                neg_sum += distances.get(i, j);
                neg_n += 1;
            }
        }
    }
    (
        if pos_n > 0 { pos_sum / pos_n as f64 } else { f64::NAN },
        if neg_n > 0 { neg_sum / neg_n as f64 } else { f64::NAN },
    )
}

/// Chain rule from pair-distance gradients back to the residual batch:
/// dL/dr_i = Σ_j G_ij · 2 (r_i − r_j) / P².
pub fn residual_grad(residuals: &Tensor, pair_grad: &SquareMatrix) -> Result<Tensor> {
    let (n, c, h, w) = residuals.dims4("residual gradient")?;
    if pair_grad.n() != n {
        return Err(Error::shape(
            "residual gradient",
            format!("{n} samples"),
            format!("{}", pair_grad.n()),
        ));
    }
    let per = c * h * w;
    let data = residuals.data();
    let mut out = vec![0.0f32; n * per];
    let scale = 2.0f64 / per as f64;
    for i in 0..n {
        let row_sum: f64 = (0..n).map(|j| pair_grad.get(i, j)).sum();
        let ri = &data[i * per..(i + 1) * per];
        let mut acc = vec![0.0f64; per];
        for j in 0..n {
            let g = pair_grad.get(i, j);
            if g == 0.0 {
                continue;
            }
            let rj = &data[j * per..(j + 1) * per];
            for (a, b) in acc.iter_mut().zip(rj) {
                *a += g * *b as f64;
            }
        }
        let dst = &mut out[i * per..(i + 1) * per];
        for (p, (d, a)) in dst.iter_mut().zip(ri.iter().zip(acc)) {
            *p = (scale * (row_sum * *d as f64 - a)) as f32;
        }
    }
    Tensor::from_vec(&[n, c, h, w], out)
}

/// Summary numbers for one batch evaluation.
#[derive(Debug, Clone, Copy)]
pub struct BatchEval {
    pub loss: f64,
    pub pos_mean: f64,
    pub neg_mean: f64,
}

/// Training-mode loss plus gradients: runs the batch through the network,
/// applies the distance loss, and backpropagates into both the network
/// parameters and the input patches. Exposed so the whole chain can be
/// checked against finite differences.
pub fn batch_loss_and_grads(
    net: &mut NoiseprintNet,
    patches: &Tensor,
    labels: &PairLabels,
) -> Result<(BatchEval, Vec<Tensor>, Tensor)> {
    let (out, trace) = net.forward_train(patches)?;
    let distances = pairwise_sq_distances(&out)?;
    let eval = dbl_loss(&distances, labels)?;
    let (pos_mean, neg_mean) = distance_stats(&distances, labels);
    let grad_residual = residual_grad(&out, &eval.pair_grad)?;
    let grads = net.backward(&trace, &grad_residual)?;
    Ok((
        BatchEval { loss: eval.loss, pos_mean, neg_mean },
        grads.params,
        grads.input,
    ))
}

/// Inference-mode batch evaluation (no gradients, running statistics).
pub fn eval_batch(net: &NoiseprintNet, patches: &Tensor, labels: &PairLabels) -> Result<BatchEval> {
    let out = net.forward_infer(patches)?;
    let distances = pairwise_sq_distances(&out)?;
    let eval = dbl_loss(&distances, labels)?;
    let (pos_mean, neg_mean) = distance_stats(&distances, labels);
    Ok(BatchEval { loss: eval.loss, pos_mean, neg_mean })
}

/// Outcome of [`chain_grad_check`]: a finite-difference report over the
/// parameters that can influence the loss, plus direct invariance
/// measurements for the bias entries that cannot.
#[derive(Debug, Clone, Copy)]
pub struct ChainCheckReport {
    /// Finite-difference comparison over the checked parameters. Tensor
    /// indices refer to [`NoiseprintNet::params`] order.
    pub fd: crate::nn::GradCheckReport,
    /// Number of bias entries exempt from finite differences (see below).
    pub invariant_entries: usize,
    /// Largest analytic gradient magnitude over the exempt entries. Should
    /// be rounding dust.
    pub max_invariant_grad: f64,
    /// Largest training-mode loss change observed when shifting an exempt
    /// entry by ±0.25. Should be rounding dust.
    pub max_invariant_loss_shift: f64,
}

/// Checks the analytic gradients of the whole patch → residual → loss chain
/// against central finite differences.
///
/// The analytic side is the production backward pass
/// ([`batch_loss_and_grads`]). The finite-difference side perturbs one
/// parameter entry at a time and re-evaluates the training-mode loss through
/// [`crate::net::ReferenceNet`], a double-precision mirror of the same
/// forward math. Probing the mirror instead of the f32 network removes f32
/// store noise from the quotients, so what the comparison measures is the
/// correctness of the backward implementation across the convolution stack,
/// the batch-norm layers, the pairwise distances and the distance loss.
///
/// Two groups of bias entries provably cannot change the loss, which makes
/// a finite-difference quotient on them a ratio of rounding noise: biases
/// of batch-normalised convolutions (the batch mean subtraction absorbs any
/// constant shift) and the final convolution's bias (only residual
/// differences enter the pairwise distances). Those entries are instead
/// checked for invariance directly: the loss is re-evaluated with the entry
/// shifted by ±0.25 and the largest change reported.
pub fn chain_grad_check(
    net: &mut NoiseprintNet,
    patches: &Tensor,
    labels: &PairLabels,
    step: f64,
) -> Result<ChainCheckReport> {
    let (_, param_grads, _) = batch_loss_and_grads(net, patches, labels)?;
    let mirror = net.reference_net();
    let chain_loss = |mirror: &crate::net::ReferenceNet| -> Result<f64> {
        let residuals = mirror.forward_train(patches)?;
        let (n, _, h, w) = patches.dims4("chain check")?;
        let distances = sq_distances_f64(&residuals, n, h * w)?;
        Ok(dbl_loss(&distances, labels)?.loss)
    };
    let base_loss = chain_loss(&mirror)?;
    let mut mirror = mirror;

    // Every conv bias except the first layer's feeds either a batch norm or
    // the pairwise distances; both absorb constant shifts exactly.
    let kinds = net.param_kinds();
    let invariant = |ti: usize| ti != 1 && kinds[ti] == ParamKind::ConvBias;
    let checked: Vec<usize> = (0..kinds.len()).filter(|&ti| !invariant(ti)).collect();
    let checked_grads: Vec<Tensor> =
        checked.iter().map(|&ti| param_grads[ti].clone()).collect();

    let mut probe_error = None;
    let mut fd = {
        let probe_error = &mut probe_error;
        let mirror = &mut mirror;
        crate::nn::grad_check(&checked_grads, step, |ti, ei, delta| {
            let ti = checked[ti];
            let saved = mirror.param_mut(ti)[ei];
            mirror.param_mut(ti)[ei] = saved + delta;
            let applied = mirror.param_mut(ti)[ei] - saved;
            let loss = match chain_loss(mirror) {
                Ok(loss) => loss,
                Err(e) => {
                    probe_error.get_or_insert(e);
                    f64::NAN
                }
            };
            mirror.param_mut(ti)[ei] = saved;
            (applied, loss)
        })?
    };
    if let Some(e) = probe_error {
        return Err(e);
    }
    fd.worst.0 = checked[fd.worst.0];

    let mut report = ChainCheckReport {
        fd,
        invariant_entries: 0,
        max_invariant_grad: 0.0,
        max_invariant_loss_shift: 0.0,
    };
    for ti in (0..kinds.len()).filter(|&ti| invariant(ti)) {
        for ei in 0..param_grads[ti].len() {
            report.invariant_entries += 1;
            report.max_invariant_grad =
                report.max_invariant_grad.max(param_grads[ti].data()[ei].abs() as f64);
            for delta in [0.25, -0.25] {
                let saved = mirror.param_mut(ti)[ei];
                mirror.param_mut(ti)[ei] = saved + delta;
                let shifted = chain_loss(&mirror)?;
                mirror.param_mut(ti)[ei] = saved;
                report.max_invariant_loss_shift =
                    report.max_invariant_loss_shift.max((shifted - base_loss).abs());
            }
        }
    }
    Ok(report)
}

/// Pixel-mean squared distances between flat f64 residuals: `residuals`
/// holds `n` blocks of `per` values.
fn sq_distances_f64(residuals: &[f64], n: usize, per: usize) -> Result<SquareMatrix> {
    if residuals.len() != n * per || per == 0 {
        return Err(Error::shape(
            "f64 distances",
            format!("{n}x{per}"),
            format!("{} values", residuals.len()),
        ));
    }
    let mut out = SquareMatrix::zeros(n);
    for i in 0..n {
        let ri = &residuals[i * per..(i + 1) * per];
        for j in 0..i {
            let rj = &residuals[j * per..(j + 1) * per];
            let mut acc = 0.0f64;
            for (a, b) in ri.iter().zip(rj) {
                let d = a - b;
                acc += d * d;
            }
            out.set_sym(i, j, acc / per as f64);
        }
    }
    Ok(out)
}

/// Rescales the final convolution so the mean pairwise squared residual
/// distance over `patches` (training mode) lands at `target`. Returns the
/// factor applied to the residual output.
///
/// A freshly initialised network tends to produce distances deep in the
/// saturated tail of the distance loss, where every gradient is numerically
/// zero. In real training the denoiser pretraining stage leaves residuals
/// at noise scale, which keeps distances in the loss's sensitive range;
/// this helper creates the same operating point for synthetic instances,
/// such as gradient checks on untrained networks.
pub fn calibrate_residual_scale(
    net: &mut NoiseprintNet,
    patches: &Tensor,
    target: f64,
) -> Result<f64> {
    if !(target > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "target mean distance must be positive, got {target}"
        )));
    }
    let (out, _) = net.forward_train(patches)?;
    let distances = pairwise_sq_distances(&out)?;
    let n = distances.n();
    if n < 2 {
        return Err(Error::InvalidArgument(
            "calibration needs at least two patches".into(),
        ));
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sum += distances.get(i, j);
            }
        }
    }
    let mean = sum / (n * (n - 1)) as f64;
    if !(mean > 0.0) {
        return Err(Error::InvalidArgument(
            "patches produce zero residual distances; cannot calibrate".into(),
        ));
    }
    let alpha = (target / mean).sqrt() as f32;
    let mut params = net.params_mut();
    let last = params.len() - 2;
    for t in &mut params[last..] {
        for v in t.data_mut() {
            *v *= alpha;
        }
    }
    Ok(alpha as f64)
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch: BatchSpec,
    pub iters: usize,
    pub adam: AdamConfig,
    /// L2 weight decay added to conv-weight gradients only.
    pub weight_decay: f32,
    /// Validation cadence in iterations.
    pub val_every: usize,
    /// Number of fixed validation batches, presampled before training.
    pub val_batches: usize,
    pub seed: u64,
    pub label_rule: LabelRule,
    /// Where to write the CSV training log, if anywhere.
    pub log_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            batch: BatchSpec::default(),
            iters: 2000,
            adam: AdamConfig { lr: 1e-4, ..AdamConfig::default() },
            weight_decay: 1e-5,
            val_every: 50,
            val_batches: 2,
            seed: 0,
            label_rule: LabelRule::ModelAndPosition,
            log_path: None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainRecord {
    pub iteration: usize,
    pub loss: f64,
    pub pos_mean: f64,
    pub neg_mean: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct ValPoint {
    pub iteration: usize,
    pub loss: f64,
    pub pos_mean: f64,
    pub neg_mean: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub log: Vec<TrainRecord>,
    pub validations: Vec<ValPoint>,
    /// The validation point whose weights were kept (earliest best loss).
    pub best: ValPoint,
}

fn render_log(records: &[TrainRecord]) -> String {
    let mut out = String::from("iteration,loss,positive_mean_distance,negative_mean_distance,wall_seconds\n");
    for r in records {
        out.push_str(&format!(
            "{},{:.9e},{:.9e},{:.9e},{:.3}\n",
            r.iteration, r.loss, r.pos_mean, r.neg_mean, r.wall_seconds
        ));
    }
    out
}

/// Trains the network with the Siamese distance loss.
///
/// Train and validation images must come from disjoint camera models. A
/// fixed set of validation batches is sampled up front; the weights with
/// the best (earliest, on ties) validation loss are restored into the net
/// before returning. A non-finite loss or gradient aborts training, also
/// restoring the best weights seen so far.
pub fn train_siamese(
    net: &mut NoiseprintNet,
    train_images: &[TrainImage],
    val_images: &[TrainImage],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.batch.validate()?;
    if config.iters == 0 {
        return Err(Error::InvalidArgument("training needs at least one iteration".into()));
    }
    let train_models: HashSet<usize> = train_images.iter().map(|im| im.model_id).collect();
    let val_models: HashSet<usize> = val_images.iter().map(|im| im.model_id).collect();
    if let Some(shared) = train_models.intersection(&val_models).next() {
        return Err(Error::InvalidArgument(format!(
            "camera model {shared} appears in both the training and validation split"
        )));
    }
    if config.batch.patch < net.receptive_field() {
        return Err(Error::InvalidArgument(format!(
            "patch side {} is smaller than the network receptive field {}",
            config.batch.patch,
            net.receptive_field()
        )));
    }

    // Pre-filter to eligible models so the per-iteration sampler never
    // re-warns about the same skipped model.
    let (eligible, skipped) = eligible_models(train_images, &config.batch);
    for m in &skipped {
        eprintln!(
            "warning: camera model {m} has fewer than {} usable images and was skipped",
            config.batch.set_size
        );
    }
    if eligible.is_empty() {
        return Err(Error::Infeasible("no eligible camera model in the training split".into()));
    }
    let train_pool: Vec<TrainImage> = train_images
        .iter()
        .filter(|im| eligible.contains(&im.model_id))
        .cloned()
        .collect();

    // Fixed validation batches, comparable across the whole run.
    let mut val_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9E37_79B9_7F4A_7C15);
    let mut val_sets = Vec::with_capacity(config.val_batches);
    for _ in 0..config.val_batches {
        let (samples, labels) = sample_minibatch(val_images, &config.batch, &mut val_rng)?;
        let labels = match config.label_rule {
            LabelRule::ModelAndPosition => labels,
            LabelRule::ModelOnly => PairLabels::with_rule(&samples, LabelRule::ModelOnly),
        };
        val_sets.push((patches_to_tensor(&samples)?, labels));
    }

    let validate = |net: &NoiseprintNet, iteration: usize| -> Result<ValPoint> {
        let mut loss = 0.0f64;
        let mut pos = 0.0f64;
        let mut neg = 0.0f64;
        for (patches, labels) in &val_sets {
            let eval = eval_batch(net, patches, labels)?;
            loss += eval.loss;
            pos += eval.pos_mean;
            neg += eval.neg_mean;
        }
        let k = val_sets.len().max(1) as f64;
        Ok(ValPoint { iteration, loss: loss / k, pos_mean: pos / k, neg_mean: neg / k })
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = AdamState::new(
        &net.params().iter().map(|t| t.shape()).collect::<Vec<_>>(),
        config.adam,
    )?;
    let kinds = net.param_kinds();
    let mut log: Vec<TrainRecord> = Vec::with_capacity(config.iters);
    let mut validations: Vec<ValPoint> = Vec::new();
    let mut best: Option<(ValPoint, NoiseprintNet)> = None;
    let started = Instant::now();

    let write_log = |log: &[TrainRecord]| -> Result<()> {
        if let Some(path) = &config.log_path {
            write_atomic(path, render_log(log).as_bytes())?;
        }
        Ok(())
    };

    for iteration in 0..config.iters {
        let (samples, labels) = sample_minibatch(&train_pool, &config.batch, &mut rng)?;
        let labels = match config.label_rule {
            LabelRule::ModelAndPosition => labels,
            LabelRule::ModelOnly => PairLabels::with_rule(&samples, LabelRule::ModelOnly),
        };
        let patches = patches_to_tensor(&samples)?;

        let abort = |net: &mut NoiseprintNet,
                     best: &Option<(ValPoint, NoiseprintNet)>,
                     log: &[TrainRecord],
                     cause: String|
         -> Error {
            if let Err(e) = write_log(log) {
                return e;
            }
            let detail = match best {
                Some((point, snapshot)) => {
                    *net = snapshot.clone();
                    format!(
                        "weights restored to the best checkpoint from iteration {}",
                        point.iteration
                    )
                }
                None => "no validation checkpoint existed; weights left as-is".to_string(),
            };
            Error::NonFinite(format!(
                "training diverged at iteration {iteration} ({cause}); {detail}"
            ))
        };

        let (eval, mut grads, _) = match batch_loss_and_grads(net, &patches, &labels) {
            Ok(step) => step,
            Err(Error::NonFinite(cause)) => return Err(abort(net, &best, &log, cause)),
            Err(e) => return Err(e),
        };
        if !eval.loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(abort(net, &best, &log, "non-finite loss or gradients".into()));
        }

        if config.weight_decay != 0.0 {
            let params = net.params();
            for ((g, kind), p) in grads.iter_mut().zip(&kinds).zip(params) {
                if *kind == ParamKind::ConvWeight {
                    for (gv, pv) in g.data_mut().iter_mut().zip(p.data()) {
                        *gv += config.weight_decay * *pv;
                    }
                }
            }
        }

        {
            let mut params = net.params_mut();
            adam_step(&mut params, &grads, &mut state)?;
        }

        log.push(TrainRecord {
            iteration,
            loss: eval.loss,
            pos_mean: eval.pos_mean,
            neg_mean: eval.neg_mean,
            wall_seconds: started.elapsed().as_secs_f64(),
        });

        let is_last = iteration + 1 == config.iters;
        if (config.val_every > 0 && (iteration + 1) % config.val_every == 0) || is_last {
            let point = validate(net, iteration + 1)?;
            validations.push(point);
            let improves = match &best {
                Some((b, _)) => point.loss < b.loss,
                None => true,
            };
            if improves {
                best = Some((point, net.clone()));
            }
        }
    }

    write_log(&log)?;
    let (best_point, best_net) = best.expect("at least the final validation ran");
    *net = best_net;
    Ok(TrainOutcome { log, validations, best: best_point })
}

/// Writes a training checkpoint: network weights plus optimizer moments and
/// step counter, all in the shared container format.
pub fn save_checkpoint(
    path: &Path,
    net: &NoiseprintNet,
    state: &AdamState,
    iteration: u64,
) -> Result<()> {
    let net_container = net.to_container();
    let mut c = TensorContainer::new();
    c.push_meta("kind", "training-checkpoint")?;
    c.push_meta("iteration", &iteration.to_string())?;
    c.push_meta("adam.t", &state.step_count().to_string())?;
    c.push_meta("adam.lr", &state.config.lr.to_string())?;
    c.push_meta("adam.beta1", &state.config.beta1.to_string())?;
    c.push_meta("adam.beta2", &state.config.beta2.to_string())?;
    c.push_meta("adam.epsilon", &state.config.epsilon.to_string())?;
    for (k, v) in net_container.meta() {
        if k != "kind" {
            c.push_meta(k, v)?;
        }
    }
    for (name, t) in net_container.tensors() {
        c.push_tensor(name, t.clone())?;
    }
    let (m, v) = state.moments();
    for (i, t) in m.iter().enumerate() {
        c.push_tensor(&format!("adam.m.{i:03}"), t.clone())?;
    }
    for (i, t) in v.iter().enumerate() {
        c.push_tensor(&format!("adam.v.{i:03}"), t.clone())?;
    }
    write_container(path, &c)
}

/// Restores a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(NoiseprintNet, AdamState, u64)> {
    let c = read_container(path)?;
    if c.meta_value("kind") != Some("training-checkpoint") {
        return Err(Error::InvalidArgument(format!(
            "{} is not a training checkpoint",
            path.display()
        )));
    }
    let net = NoiseprintNet::from_container(&c)?;
    let meta = |key: &str| -> Result<&str> {
        c.meta_value(key)
            .ok_or_else(|| Error::InvalidArgument(format!("checkpoint lacks meta \"{key}\"")))
    };
    let parse_f32 = |key: &str| -> Result<f32> {
        meta(key)?.parse().map_err(|_| {
            Error::InvalidArgument(format!("checkpoint meta \"{key}\" is not a number"))
        })
    };
    let config = AdamConfig {
        lr: parse_f32("adam.lr")?,
        beta1: parse_f32("adam.beta1")?,
        beta2: parse_f32("adam.beta2")?,
        epsilon: parse_f32("adam.epsilon")?,
    };
    let t: u64 = meta("adam.t")?
        .parse()
        .map_err(|_| Error::InvalidArgument("checkpoint meta \"adam.t\" is not a number".into()))?;
    let iteration: u64 = meta("iteration")?
        .parse()
        .map_err(|_| Error::InvalidArgument("checkpoint meta \"iteration\" is not a number".into()))?;
    let n_params = net.params().len();
    let mut m = Vec::with_capacity(n_params);
    let mut v = Vec::with_capacity(n_params);
    for (i, p) in net.params().iter().enumerate() {
        m.push(c.tensor_with_shape(&format!("adam.m.{i:03}"), p.shape())?.clone());
        v.push(c.tensor_with_shape(&format!("adam.v.{i:03}"), p.shape())?.clone());
    }
    let state = AdamState::restore(config, m, v, t)?;
    Ok((net, state, iteration))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetConfig;

    fn synthetic_sample(model: usize, pos: (usize, usize)) -> PatchSample {
        PatchSample {
            model_id: model,
            device_id: 0,
            image_id: 0,
            position: pos,
            pixels: Plane::zeros(4, 4),
        }
    }

    /// A small image pool: `models` camera models, `per_model` images each,
    /// with deterministic smooth content distinct per image.
    fn image_pool(models: usize, per_model: usize, side: usize) -> Vec<TrainImage> {
        let mut out = Vec::new();
        for m in 0..models {
            for i in 0..per_model {
                let mut p = Plane::zeros(side, side);
                for y in 0..side {
                    for x in 0..side {
                        let fx = x as f32 / side as f32;
                        let fy = y as f32 / side as f32;
                        let v = 0.5
                            + 0.3 * ((fx * 4.1 + m as f32) * 1.7 + i as f32 * 0.31).sin() * (fy * 3.3).cos();
                        p.set(x, y, v.clamp(0.0, 1.0));
                    }
                }
                out.push(TrainImage { model_id: m, device_id: m * 10, image_id: m * 100 + i, pixels: p });
            }
        }
        out
    }

    fn tiny_net(seed: u64) -> NoiseprintNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        NoiseprintNet::he_init(NetConfig { depth: 3, channels: 4, kernel: 3 }, &mut rng).unwrap()
    }

    #[test]
    fn single_set_of_two_has_one_positive_pair() {
        let samples =
            vec![synthetic_sample(1, (8, 8)), synthetic_sample(1, (8, 8))];
        let labels = PairLabels::from_samples(&samples);
        assert_eq!(labels.label(0, 1), 1);
        assert_eq!(labels.label(1, 0), 1);
        assert_eq!(labels.label(0, 0), 0);
        assert_eq!(labels.unordered_pairs(), 1);
        assert_eq!(labels.positive_unordered_pairs(), 1);
    }

    #[test]
    fn paper_scale_batch_has_expected_pair_counts() {
        // 50 sets of 4 patches, every set a distinct (model, position).
        let mut samples = Vec::new();
        for set in 0..50 {
            for _ in 0..4 {
                samples.push(synthetic_sample(set / 2, (set * 8, 0)));
            }
        }
        let labels = PairLabels::from_samples(&samples);
        assert_eq!(labels.unordered_pairs(), 19_900, "200 patches give C(200,2) pairs");
        assert_eq!(labels.positive_unordered_pairs(), 300, "50 sets × C(4,2) positives");
        for i in 0..200 {
            assert_eq!(labels.positive_partners(i), 3);
        }
    }

    #[test]
    fn same_model_different_position_is_negative() {
        let samples = vec![
            synthetic_sample(2, (0, 0)),
            synthetic_sample(2, (8, 0)),
            synthetic_sample(2, (0, 0)),
        ];
        let labels = PairLabels::from_samples(&samples);
        assert_eq!(labels.label(0, 1), -1, "same model, shifted position");
        assert_eq!(labels.label(0, 2), 1, "same model, same position");
        let loose = PairLabels::with_rule(&samples, LabelRule::ModelOnly);
        assert_eq!(loose.label(0, 1), 1, "position constraint dropped");
    }

    #[test]
    fn sampled_batch_honors_set_structure() {
        let images = image_pool(3, 6, 64);
        let spec = BatchSpec { n_sets: 5, set_size: 3, patch: 16, position_modulus: 8 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (samples, labels) = sample_minibatch(&images, &spec, &mut rng).unwrap();
        assert_eq!(samples.len(), 15);
        for set in samples.chunks(3) {
            let pos = set[0].position;
            let model = set[0].model_id;
            let mut image_ids: Vec<usize> = set.iter().map(|s| s.image_id).collect();
            image_ids.sort_unstable();
            image_ids.dedup();
            assert_eq!(image_ids.len(), 3, "images are distinct within a set");
            for s in set {
                assert_eq!(s.position, pos, "position is shared within a set");
                assert_eq!(s.model_id, model, "model is shared within a set");
                assert_eq!(s.position.0 % 8, 0, "positions snap to the grid");
                assert_eq!(s.position.1 % 8, 0);
                assert_eq!(s.pixels.width(), 16);
                // Patch content matches the source image crop exactly.
                let src = images.iter().find(|im| im.image_id == s.image_id).unwrap();
                let crop = src.pixels.crop(s.position.0, s.position.1, 16, 16).unwrap();
                assert_eq!(crop.data(), s.pixels.data());
            }
        }
        for i in 0..15 {
            assert_eq!(labels.positive_partners(i), 2, "patch {i} has set_size−1 positives");
        }
    }

    #[test]
    fn infeasible_batches_are_rejected() {
        let spec = BatchSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // No images at all.
        assert!(sample_minibatch(&[], &spec, &mut rng).is_err());
        // Images too small for the patch size.
        let small = image_pool(2, 8, 16);
        let err = sample_minibatch(&small, &spec, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Infeasible(_)), "{err}");
        // A set size of 1 would have no positive pairs.
        let bad = BatchSpec { set_size: 1, ..BatchSpec::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn model_with_too_few_images_is_skipped() {
        let mut images = image_pool(1, 6, 64);
        // Model 7 has a single image: not enough for a set of 3.
        images.push(TrainImage {
            model_id: 7,
            device_id: 70,
            image_id: 999,
            pixels: Plane::filled(64, 64, 0.5),
        });
        let spec = BatchSpec { n_sets: 8, set_size: 3, patch: 16, position_modulus: 8 };
        let (eligible, skipped) = eligible_models(&images, &spec);
        assert_eq!(eligible, vec![0]);
        assert_eq!(skipped, vec![7]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (samples, _) = sample_minibatch(&images, &spec, &mut rng).unwrap();
        assert!(samples.iter().all(|s| s.model_id == 0), "skipped model never sampled");
    }

    #[test]
    fn identical_residuals_have_zero_distance() {
        let t = Tensor::filled(&[2, 1, 4, 4], 0.37);
        let d = pairwise_sq_distances(&t).unwrap();
        assert_eq!(d.get(0, 1), 0.0);
        assert_eq!(d.get(0, 0), 0.0);
    }

    #[test]
    fn constant_offset_gives_squared_constant_distance() {
        let mut data = vec![0.25f32; 16];
        data.extend(vec![0.25f32 + 0.5; 16]);
        let t = Tensor::from_vec(&[2, 1, 4, 4], data).unwrap();
        let d = pairwise_sq_distances(&t).unwrap();
        assert!((d.get(0, 1) - 0.25).abs() < 1e-12, "offset c gives distance c², got {}", d.get(0, 1));
        assert_eq!(d.get(0, 1), d.get(1, 0));
    }

    #[test]
    fn three_patch_distances_match_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = Tensor::randn(&[3, 1, 5, 5], 1.0, &mut rng);
        let d = pairwise_sq_distances(&t).unwrap();
        let per = 25usize;
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = 0.0f64;
                for p in 0..per {
                    let a = t.data()[i * per + p] as f64;
                    let b = t.data()[j * per + p] as f64;
                    acc += (a - b) * (a - b);
                }
                let expect = acc / per as f64;
                assert!(
                    (d.get(i, j) - expect).abs() < 1e-6,
                    "entry ({i},{j}): {} vs oracle {expect}",
                    d.get(i, j)
                );
            }
        }
    }

    fn pair_labels_pattern(n: usize, positive_pairs: &[(usize, usize)]) -> PairLabels {
        let mut m = vec![false; n * n];
        for &(i, j) in positive_pairs {
            m[i * n + j] = true;
            m[j * n + i] = true;
        }
        PairLabels::from_matrix(n, m).unwrap()
    }

    #[test]
    fn uniform_distances_give_log_m_plus_one() {
        // 3 sets of 2: each anchor has 1 positive and m = 4 negatives.
        let n = 6;
        let labels = pair_labels_pattern(n, &[(0, 1), (2, 3), (4, 5)]);
        let mut d = SquareMatrix::zeros(n);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    d.set(i, j, 0.7);
                }
            }
        }
        let eval = dbl_loss(&d, &labels).unwrap();
        let expect = (4.0f64 + 1.0).ln();
        assert!(
            (eval.loss - expect).abs() < 1e-12,
            "uniform distances: loss {} vs log(m+1) = {expect}",
            eval.loss
        );
        assert_eq!(eval.anchors, 6);
    }

    #[test]
    fn perfect_separation_drives_loss_to_zero() {
        let n = 4;
        let labels = pair_labels_pattern(n, &[(0, 1), (2, 3)]);
        let mut d = SquareMatrix::zeros(n);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    d.set(i, j, if labels.is_positive(i, j) { 0.0 } else { 1e4 });
                }
            }
        }
        let eval = dbl_loss(&d, &labels).unwrap();
        assert!(eval.loss.abs() < 1e-12, "separated batch should have near-zero loss, got {}", eval.loss);
    }

    #[test]
    fn batch_without_positive_pair_is_rejected() {
        let labels = pair_labels_pattern(3, &[]);
        let d = SquareMatrix::zeros(3);
        assert!(dbl_loss(&d, &labels).is_err());
    }

    #[test]
    fn pair_gradient_matches_finite_differences() {
        let n = 4;
        let labels = pair_labels_pattern(n, &[(0, 1), (2, 3)]);
        let mut d = SquareMatrix::zeros(n);
        let values = [0.3, 0.9, 0.5, 1.4, 0.7, 0.2];
        let mut k = 0;
        for i in 0..n {
            for j in 0..i {
                d.set_sym(i, j, values[k]);
                k += 1;
            }
        }
        let eval = dbl_loss(&d, &labels).unwrap();
        let h = 1e-6;
        for i in 0..n {
            for j in 0..i {
                // A pair distance perturbs both symmetric entries at once.
                let mut plus = d.clone();
                plus.set_sym(i, j, d.get(i, j) + h);
                let mut minus = d.clone();
                minus.set_sym(i, j, d.get(i, j) - h);
                let fd = (dbl_loss(&plus, &labels).unwrap().loss
                    - dbl_loss(&minus, &labels).unwrap().loss)
                    / (2.0 * h);
                let ana = eval.pair_grad.get(i, j);
                let rel = (fd - ana).abs() / (fd.abs() + ana.abs()).max(1e-8);
                assert!(rel < 1e-4, "pair ({i},{j}): fd {fd:.9e} vs analytic {ana:.9e}");
            }
        }
    }

    #[test]
    fn pair_gradient_is_symmetric_with_zero_diagonal() {
        let n = 5;
        let labels = pair_labels_pattern(n, &[(0, 1), (0, 2), (1, 2)]);
        let mut d = SquareMatrix::zeros(n);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for i in 0..n {
            for j in 0..i {
                d.set_sym(i, j, rng.gen_range(0.05..2.0));
            }
        }
        let eval = dbl_loss(&d, &labels).unwrap();
        for i in 0..n {
            assert_eq!(eval.pair_grad.get(i, i), 0.0);
            for j in 0..n {
                assert_eq!(eval.pair_grad.get(i, j), eval.pair_grad.get(j, i));
            }
        }
    }

    #[test]
    fn loss_monotonicity_in_single_distances() {
        let n = 6;
        let labels = pair_labels_pattern(n, &[(0, 1), (2, 3), (4, 5)]);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for trial in 0..20 {
            let mut d = SquareMatrix::zeros(n);
            for i in 0..n {
                for j in 0..i {
                    d.set_sym(i, j, rng.gen_range(0.01..3.0));
                }
            }
            let base = dbl_loss(&d, &labels).unwrap().loss;
            // Shrinking a positive distance never increases the loss.
            let mut shrunk = d.clone();
            shrunk.set_sym(0, 1, d.get(0, 1) * 0.5);
            let after = dbl_loss(&shrunk, &labels).unwrap().loss;
            assert!(after <= base + 1e-12, "trial {trial}: shrinking a positive raised the loss");
            // Growing a negative distance never increases the loss.
            let mut grown = d.clone();
            grown.set_sym(0, 2, d.get(0, 2) + 1.0);
            let after = dbl_loss(&grown, &labels).unwrap().loss;
            assert!(after <= base + 1e-12, "trial {trial}: growing a negative raised the loss");
        }
    }

    #[test]
    fn residual_grad_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let r = Tensor::randn(&[4, 1, 3, 3], 1.0, &mut rng);
        let mut g = SquareMatrix::zeros(4);
        for i in 0..4 {
            for j in 0..i {
                g.set_sym(i, j, rng.gen_range(-1.0..1.0));
            }
        }
        let fast = residual_grad(&r, &g).unwrap();
        let per = 9usize;
        for i in 0..4 {
            for p in 0..per {
                let mut acc = 0.0f64;
                for j in 0..4 {
                    let diff = r.data()[i * per + p] as f64 - r.data()[j * per + p] as f64;
                    acc += g.get(i, j) * 2.0 * diff / per as f64;
                }
                let got = fast.data()[i * per + p] as f64;
                assert!(
                    (got - acc).abs() < 1e-6,
                    "sample {i} pixel {p}: fast {got:.9e} vs direct {acc:.9e}"
                );
            }
        }
    }

    /// A deterministic well-conditioned chain-check instance: two sets of
    /// two 16×16 patches (distinct smooth content per patch) and a small
    /// network whose residual scale is calibrated into the sensitive range
    /// of the distance loss.
    fn chain_instance(seed: u64) -> (NoiseprintNet, Tensor, PairLabels) {
        let mut samples = Vec::new();
        for k in 0..4usize {
            let model = k / 2;
            let mut p = Plane::zeros(16, 16);
            for y in 0..16 {
                for x in 0..16 {
                    let fx = x as f32 / 16.0;
                    let fy = y as f32 / 16.0;
                    let v = 0.5
                        + 0.25
                            * ((fx * 5.0 + k as f32 * 0.7) * 1.9).sin()
                            * ((fy * 4.0 + model as f32) * 1.3).cos()
                        + 0.15 * (fx * 9.0 + fy * 7.0 + k as f32).sin();
                    p.set(x, y, v.clamp(0.05, 0.95));
                }
            }
            samples.push(PatchSample {
                model_id: model,
                device_id: 0,
                image_id: k,
                position: (8 * model, 0),
                pixels: p,
            });
        }
        let labels = PairLabels::from_samples(&samples);
        let patches = patches_to_tensor(&samples).unwrap();
        let mut net = tiny_net(seed);
        calibrate_residual_scale(&mut net, &patches, 2.0).unwrap();
        (net, patches, labels)
    }

    #[test]
    fn full_chain_gradients_match_finite_differences() {
        let (mut net, patches, labels) = chain_instance(21);
        let report = chain_grad_check(&mut net, &patches, &labels, 1e-5).unwrap();
        // Depth 3, 4 channels: 36+4 first conv, 144 middle weight, 4+4
        // gamma/beta, 36 last weight = 228 checked entries; the 4 middle
        // biases and 1 final bias are invariance-exempt.
        assert_eq!(report.fd.entries_checked, 228);
        assert_eq!(report.invariant_entries, 5);
        assert!(
            report.fd.max_rel_error < 1e-4,
            "chain gradients disagree with finite differences: {:.3e} at {:?}",
            report.fd.max_rel_error,
            report.fd.worst
        );
        assert!(
            report.max_invariant_grad < 1e-6,
            "a batch-norm-absorbed bias reported a non-trivial gradient: {:.3e}",
            report.max_invariant_grad
        );
        assert!(
            report.max_invariant_loss_shift < 1e-9,
            "shifting an absorbed bias moved the loss by {:.3e}",
            report.max_invariant_loss_shift
        );
    }

    #[test]
    fn chain_check_flags_a_corrupted_backward() {
        // Sanity for the checker itself: corrupt the analytic gradients the
        // same way a backward bug would and demand a loud relative error.
        let (mut net, patches, labels) = chain_instance(21);
        let (_, grads, _) = batch_loss_and_grads(&mut net, &patches, &labels).unwrap();
        let mut mirror = net.reference_net();
        let mut corrupted: Vec<Tensor> = grads.clone();
        for v in corrupted[0].data_mut() {
            *v *= 1.5;
        }
        let kinds = net.param_kinds();
        let checked: Vec<usize> =
            (0..kinds.len()).filter(|&ti| ti == 1 || kinds[ti] != ParamKind::ConvBias).collect();
        let filtered: Vec<Tensor> = checked.iter().map(|&ti| corrupted[ti].clone()).collect();
        let report = crate::nn::grad_check(&filtered, 1e-5, |ti, ei, delta| {
            let ti = checked[ti];
            let saved = mirror.param_mut(ti)[ei];
            mirror.param_mut(ti)[ei] = saved + delta;
            let residuals = mirror.forward_train(&patches).unwrap();
            let d = sq_distances_f64(&residuals, 4, 256).unwrap();
            let loss = dbl_loss(&d, &labels).unwrap().loss;
            mirror.param_mut(ti)[ei] = saved;
            (delta, loss)
        })
        .unwrap();
        assert!(
            report.max_rel_error > 0.1,
            "a 1.5x scaling of first-layer weight gradients must be flagged, got {:.3e}",
            report.max_rel_error
        );
    }

    fn tiny_train_config(iters: usize, lr: f32, seed: u64) -> TrainConfig {
        TrainConfig {
            batch: BatchSpec { n_sets: 3, set_size: 2, patch: 12, position_modulus: 4 },
            iters,
            adam: AdamConfig { lr, ..AdamConfig::default() },
            weight_decay: 1e-5,
            val_every: 2,
            val_batches: 1,
            seed,
            label_rule: LabelRule::ModelAndPosition,
            log_path: None,
        }
    }

    #[test]
    fn zero_learning_rate_leaves_weights_unchanged() {
        let train = image_pool(2, 4, 48);
        let val = {
            let mut v = image_pool(1, 4, 48);
            for im in &mut v {
                im.model_id = 9;
            }
            v
        };
        let mut net = tiny_net(8);
        let before: Vec<Vec<u32>> = net
            .params()
            .iter()
            .map(|t| t.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        train_siamese(&mut net, &train, &val, &tiny_train_config(4, 0.0, 20)).unwrap();
        let after: Vec<Vec<u32>> = net
            .params()
            .iter()
            .map(|t| t.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(before, after, "lr = 0 must leave every weight bit untouched");
    }

    #[test]
    fn training_is_deterministic_for_a_fixed_seed() {
        let train = image_pool(2, 4, 48);
        let val = {
            let mut v = image_pool(1, 4, 48);
            for im in &mut v {
                im.model_id = 9;
            }
            v
        };
        let run = || {
            let mut net = tiny_net(9);
            let outcome =
                train_siamese(&mut net, &train, &val, &tiny_train_config(6, 1e-3, 21)).unwrap();
            let bits: Vec<Vec<u32>> = net
                .params()
                .iter()
                .map(|t| t.data().iter().map(|v| v.to_bits()).collect())
                .collect();
            (bits, outcome.best.iteration)
        };
        let (a, it_a) = run();
        let (b, it_b) = run();
        assert_eq!(a, b, "same seed must give bit-identical weights");
        assert_eq!(it_a, it_b);
    }

    #[test]
    fn shared_camera_between_splits_is_rejected() {
        let train = image_pool(2, 4, 48);
        let val = image_pool(1, 4, 48); // model 0 overlaps
        let mut net = tiny_net(10);
        let err =
            train_siamese(&mut net, &train, &val, &tiny_train_config(2, 1e-3, 22)).unwrap_err();
        assert!(err.to_string().contains("both"), "{err}");
    }

    #[test]
    fn divergence_restores_best_checkpoint() {
        let train = image_pool(2, 4, 48);
        let val = {
            let mut v = image_pool(1, 4, 48);
            for im in &mut v {
                im.model_id = 9;
            }
            v
        };
        let mut net = tiny_net(11);
        let err =
            train_siamese(&mut net, &train, &val, &tiny_train_config(40, 1e19, 23)).unwrap_err();
        assert!(err.to_string().contains("diverged"), "{err}");
        assert!(net.params().iter().all(|t| t.is_finite()), "restored weights must be finite");
    }

    #[test]
    fn training_log_is_written_and_well_formed() {
        let dir = tempfile::tempdir().unwrap();
        let log_path = dir.path().join("train.csv");
        let train = image_pool(2, 4, 48);
        let val = {
            let mut v = image_pool(1, 4, 48);
            for im in &mut v {
                im.model_id = 9;
            }
            v
        };
        let mut net = tiny_net(12);
        let mut config = tiny_train_config(3, 1e-3, 24);
        config.log_path = Some(log_path.clone());
        let outcome = train_siamese(&mut net, &train, &val, &config).unwrap();
        assert_eq!(outcome.log.len(), 3);
        let text = std::fs::read_to_string(&log_path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4, "header plus one row per iteration");
        assert_eq!(
            lines[0],
            "iteration,loss,positive_mean_distance,negative_mean_distance,wall_seconds"
        );
        for (i, row) in lines[1..].iter().enumerate() {
            let fields: Vec<&str> = row.split(',').collect();
            assert_eq!(fields.len(), 5);
            assert_eq!(fields[0], i.to_string());
            for f in &fields[1..] {
                f.parse::<f64>().unwrap();
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.npt");
        let mut net = tiny_net(13);
        let shapes: Vec<&[usize]> = net.params().iter().map(|t| t.shape()).collect();
        let mut state = AdamState::new(&shapes, AdamConfig::default()).unwrap();
        // Advance the optimizer so moments are nonzero.
        let grads: Vec<Tensor> =
            net.params().iter().map(|t| Tensor::filled(t.shape(), 0.01)).collect();
        {
            let mut params = net.params_mut();
            adam_step(&mut params, &grads, &mut state).unwrap();
        }
        save_checkpoint(&path, &net, &state, 17).unwrap();
        let (net2, state2, iteration) = load_checkpoint(&path).unwrap();
        assert_eq!(iteration, 17);
        assert_eq!(state2.step_count(), state.step_count());
        for (a, b) in net.params().iter().zip(net2.params()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        let (m1, v1) = state.moments();
        let (m2, v2) = state2.moments();
        for (a, b) in m1.iter().zip(m2).chain(v1.iter().zip(v2)) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}
