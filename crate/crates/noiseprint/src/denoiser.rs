//! Denoiser pretraining: residual learning on synthetic additive white
//! Gaussian noise. The network is trained to predict the noise itself, so
//! its output on a clean image approaches zero and scene content is
//! suppressed in the residual. The resulting weights serve as the starting
//! point for fingerprint training.

use crate::error::{Error, Result};
use crate::net::NoiseprintNet;
use crate::nn::{adam_step, AdamConfig, AdamState, Tensor};
use crate::plane::Plane;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rand::SeedableRng;

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub iters: usize,
    pub batch: usize,
    pub patch: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> PretrainConfig {
        PretrainConfig {
            iters: 800,
            batch: 16,
            patch: 32,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug)]
pub struct PretrainOutcome {
    /// Per-iteration training loss (mean squared error against the noise).
    pub loss_history: Vec<f64>,
}

/// Mean squared difference between two planes of equal size.
pub fn plane_mse(a: &Plane, b: &Plane) -> Result<f64> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::shape(
            "plane_mse",
            format!("{}x{}", a.width(), a.height()),
            format!("{}x{}", b.width(), b.height()),
        ));
    }
    let mut acc = 0.0f64;
    for (x, y) in a.data().iter().zip(b.data()) {
        let d = (*x - *y) as f64;
        acc += d * d;
    }
    Ok(acc / a.len() as f64)
}

/// Peak signal-to-noise ratio in dB for planes with a [0, 1] value range.
/// Identical planes give infinity.
pub fn psnr(reference: &Plane, test: &Plane) -> Result<f64> {
    let mse = plane_mse(reference, test)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Runs an image through the network and subtracts the predicted noise,
/// clipping back to [0, 1].
pub fn denoise_image(net: &NoiseprintNet, image: &Plane) -> Result<Plane> {
    let residual = net.extract_residual(image)?;
    let mut out = image.clone();
    for (o, r) in out.data_mut().iter_mut().zip(residual.data()) {
        *o = (*o - *r).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Adds AWGN of the given sigma and clips to [0, 1].
pub fn add_noise(image: &Plane, sigma: f32, rng: &mut ChaCha8Rng) -> Plane {
    let mut out = image.clone();
    if sigma == 0.0 {
        return out;
    }
    let normal = Normal::new(0.0f32, sigma).expect("finite sigma");
    for v in out.data_mut() {
        *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
    }
    out
}

/// Trains the network to predict additive Gaussian noise on patches drawn
/// from the given scenes. The target for each patch is the realized noise
/// after clipping, so `noisy − prediction` recovers the clean patch. A
/// non-finite loss aborts with diagnostics naming the iteration.
///
/// `sigma` may be zero: the objective degenerates to driving the output to
/// zero on clean patches, which is a useful sanity case.
pub fn pretrain_denoiser(
    net: &mut NoiseprintNet,
    scenes: &[Plane],
    sigma: f32,
    config: &PretrainConfig,
) -> Result<PretrainOutcome> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "noise sigma must be finite and non-negative, got {sigma}"
        )));
    }
    if config.iters == 0 || config.batch == 0 {
        return Err(Error::InvalidArgument(
            "pretraining needs at least one iteration and one patch per batch".into(),
        ));
    }
    let p = config.patch;
    if p < net.receptive_field() {
        return Err(Error::InvalidArgument(format!(
            "patch size {p} is smaller than the network receptive field {}",
            net.receptive_field()
        )));
    }
    let usable: Vec<&Plane> =
        scenes.iter().filter(|s| s.width() >= p && s.height() >= p).collect();
    if usable.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no training scene is at least {p}x{p} pixels"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0f32, sigma.max(f32::MIN_POSITIVE)).expect("finite sigma");
    let mut state = AdamState::new(
        &net.params().iter().map(|t| t.shape()).collect::<Vec<_>>(),
        config.adam,
    )?;
    let mut loss_history = Vec::with_capacity(config.iters);

    for iter in 0..config.iters {
        let n = config.batch * p * p;
        let mut noisy = Vec::with_capacity(n);
        let mut target = Vec::with_capacity(n);
        for _ in 0..config.batch {
            let scene = usable[rng.gen_range(0..usable.len())];
            let x0 = rng.gen_range(0..=scene.width() - p);
            let y0 = rng.gen_range(0..=scene.height() - p);
            for y in 0..p {
                for x in 0..p {
                    let clean = scene.get(x0 + x, y0 + y);
                    let noise = if sigma == 0.0 { 0.0 } else { normal.sample(&mut rng) };
                    let noisy_v = (clean + noise).clamp(0.0, 1.0);
                    noisy.push(noisy_v);
                    target.push(noisy_v - clean);
                }
            }
        }
        let noisy = Tensor::from_vec(&[config.batch, 1, p, p], noisy)?;
        let target = Tensor::from_vec(&[config.batch, 1, p, p], target)?;

        let (out, trace) = net.forward_train(&noisy)?;
        let inv_n = 1.0f64 / n as f64;
        let mut loss = 0.0f64;
        let mut grad = Tensor::zeros(out.shape());
        for ((g, o), t) in grad.data_mut().iter_mut().zip(out.data()).zip(target.data()) {
            let d = (*o - *t) as f64;
            loss += d * d * inv_n;
            *g = (2.0 * d * inv_n) as f32;
        }
        let diverged = |what: &str, loss_history: &[f64]| {
            let last = loss_history
                .iter()
                .enumerate()
                .rev()
                .find(|(_, l): &(usize, &f64)| l.is_finite())
                .map(|(i, l)| format!("last finite loss {l:.6e} at iteration {i}"))
                .unwrap_or_else(|| "no finite loss was ever recorded".into());
            Error::NonFinite(format!(
                "denoiser pretraining diverged at iteration {iter} ({what}); {last}"
            ))
        };
        if !loss.is_finite() {
            return Err(diverged("non-finite loss", &loss_history));
        }
        loss_history.push(loss);

        let grads = net.backward(&trace, &grad)?;
        if grads.params.iter().any(|t| !t.is_finite()) {
            return Err(diverged("non-finite gradients", &loss_history));
        }
        let mut params = net.params_mut();
        adam_step(&mut params, &grads.params, &mut state)?;
    }

    Ok(PretrainOutcome { loss_history })
}

/// Fraction by which denoising reduces noise MSE on held-out scenes,
/// compared to leaving the noisy images untouched. 0.5 means the noise
/// energy was halved.
pub fn noise_mse_reduction(
    net: &NoiseprintNet,
    held_out: &[Plane],
    sigma: f32,
    seed: u64,
) -> Result<f64> {
    if held_out.is_empty() {
        return Err(Error::InvalidArgument("held-out set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut before = 0.0f64;
    let mut after = 0.0f64;
    for clean in held_out {
        let noisy = add_noise(clean, sigma, &mut rng);
        before += plane_mse(clean, &noisy)?;
        after += plane_mse(clean, &denoise_image(net, &noisy)?)?;
    }
    if before == 0.0 {
        return Err(Error::InvalidArgument(
            "noise MSE before denoising is zero; reduction is undefined".into(),
        ));
    }
    Ok(1.0 - after / before)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetConfig;

    fn smooth_scene(w: usize, h: usize, seed: u64) -> Plane {
        // Low-frequency ramps plus a soft bump: easy to denoise, clearly
        // structured, values well inside [0, 1].
        let mut p = Plane::zeros(w, h);
        let s = seed as f32 * 0.37;
        for y in 0..h {
            for x in 0..w {
                let fx = x as f32 / w as f32;
                let fy = y as f32 / h as f32;
                let v = 0.45
                    + 0.25 * (2.0 * std::f32::consts::PI * (fx + s)).sin()
                    + 0.2 * (2.5 * std::f32::consts::PI * (fy - s)).cos();
                p.set(x, y, v.clamp(0.02, 0.98));
            }
        }
        p
    }

    fn small_net(seed: u64) -> NoiseprintNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        NoiseprintNet::he_init(NetConfig { depth: 4, channels: 8, kernel: 3 }, &mut rng).unwrap()
    }

    fn scenes() -> Vec<Plane> {
        (0..6).map(|i| smooth_scene(48, 48, i)).collect()
    }

    #[test]
    fn loss_decreases_over_training() {
        let mut net = small_net(100);
        let config = PretrainConfig {
            iters: 520,
            batch: 8,
            patch: 16,
            adam: AdamConfig::default(),
            seed: 7,
        };
        let outcome = pretrain_denoiser(&mut net, &scenes(), 0.08, &config).unwrap();
        assert!(
            outcome.loss_history[500] < outcome.loss_history[10],
            "loss at iteration 500 ({:.3e}) should undercut iteration 10 ({:.3e})",
            outcome.loss_history[500],
            outcome.loss_history[10]
        );
    }

    #[test]
    fn zero_sigma_shrinks_output_norm() {
        let mut net = small_net(101);
        let clean = smooth_scene(32, 32, 40);
        let norm = |net: &NoiseprintNet| -> f64 {
            let r = net.extract_residual(&clean).unwrap();
            (r.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / r.len() as f64).sqrt()
        };
        let before = norm(&net);
        let config = PretrainConfig {
            iters: 600,
            batch: 8,
            patch: 16,
            adam: AdamConfig { lr: 3e-3, ..AdamConfig::default() },
            seed: 8,
        };
        pretrain_denoiser(&mut net, &scenes(), 0.0, &config).unwrap();
        let after = norm(&net);
        assert!(
            after < 0.5 * before,
            "clean-image output norm should shrink: before {before:.4e}, after {after:.4e}"
        );
    }

    #[test]
    fn denoised_psnr_beats_noisy_psnr_on_held_out_scene() {
        let mut net = small_net(102);
        let config = PretrainConfig {
            iters: 500,
            batch: 8,
            patch: 16,
            adam: AdamConfig::default(),
            seed: 9,
        };
        pretrain_denoiser(&mut net, &scenes(), 0.08, &config).unwrap();
        // Held-out scene: a seed outside the training set.
        let clean = smooth_scene(48, 48, 99);
        let noisy = add_noise(&clean, 0.08, &mut ChaCha8Rng::seed_from_u64(10));
        let denoised = denoise_image(&net, &noisy).unwrap();
        let p_noisy = psnr(&clean, &noisy).unwrap();
        let p_denoised = psnr(&clean, &denoised).unwrap();
        assert!(
            p_denoised > p_noisy,
            "denoised PSNR {p_denoised:.2} dB should beat noisy PSNR {p_noisy:.2} dB"
        );
    }

    #[test]
    fn divergence_aborts_with_diagnostics() {
        let mut net = small_net(103);
        let config = PretrainConfig {
            iters: 400,
            batch: 4,
            patch: 16,
            adam: AdamConfig { lr: 1e18, ..AdamConfig::default() },
            seed: 11,
        };
        let err = pretrain_denoiser(&mut net, &scenes(), 0.08, &config).unwrap_err();
        let message = err.to_string();
        assert!(message.contains("diverged at iteration"), "{message}");
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let mut net = small_net(104);
        let config = PretrainConfig::default();
        assert!(pretrain_denoiser(&mut net, &scenes(), -0.1, &config).is_err());
        assert!(pretrain_denoiser(&mut net, &[], 0.05, &config).is_err());
        let tiny = vec![Plane::filled(8, 8, 0.5)];
        assert!(
            pretrain_denoiser(&mut net, &tiny, 0.05, &config).is_err(),
            "scenes smaller than one patch cannot be sampled"
        );
    }

    #[test]
    fn psnr_handles_identical_and_shifted_planes() {
        let a = smooth_scene(20, 20, 1);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let mut b = a.clone();
        for v in b.data_mut() {
            *v = (*v + 0.1).min(1.0);
        }
        let p = psnr(&a, &b).unwrap();
        assert!(p > 19.0 && p < 21.0, "uniform 0.1 offset is 20 dB, got {p:.2}");
        let c = Plane::zeros(10, 10);
        assert!(psnr(&a, &c).is_err(), "size mismatch must be rejected");
    }
}
