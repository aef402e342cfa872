//! Pretrains the residual network as a Gaussian denoiser on synthetic
//! scenes, then shows the payoff on a held-out scene: subtracting the
//! predicted residual from a noisy image should cut its error against the
//! clean original roughly in half or better.
//!
//! Run with: cargo run --release --example pretrain_denoiser

use noiseprint::denoiser::{
    add_noise, noise_mse_reduction, plane_mse, pretrain_denoiser, PretrainConfig,
};
use noiseprint::simulate::{derived_rng, render_scene};
use noiseprint::{NetConfig, NoiseprintNet};
use std::path::Path;

fn main() {
    let seed = 11u64;
    let sigma = 0.04f32;
    let out_dir = Path::new("out/examples/pretrain_denoiser");
    std::fs::create_dir_all(out_dir).expect("create output directory");

    let scenes: Vec<_> = (0..12u64)
        .map(|i| {
            render_scene(&mut derived_rng(seed, &[0x5CE4E, i]), 96, 96).expect("render scene")
        })
        .collect();
    println!("rendered {} training scenes of 96x96", scenes.len());

    let config = NetConfig { depth: 5, channels: 12, kernel: 3 };
    let mut net =
        NoiseprintNet::he_init(config, &mut derived_rng(seed, &[0x141217])).expect("init network");

    let pretrain = PretrainConfig { iters: 1500, batch: 8, patch: 32, seed, ..Default::default() };
    let outcome = pretrain_denoiser(&mut net, &scenes, sigma, &pretrain).expect("pretrain");
    for (i, loss) in outcome.loss_history.iter().enumerate() {
        if i % 300 == 0 || i + 1 == outcome.loss_history.len() {
            println!("  iteration {i:>4}: loss {loss:.6}");
        }
    }
    println!(
        "trained {} iterations at noise sigma {sigma} (predicting zero would score {:.6})",
        outcome.loss_history.len(),
        (sigma as f64) * (sigma as f64)
    );

    // Held-out scenes the training never saw; one is also shown explicitly.
    let held_out: Vec<_> = (0..6u64)
        .map(|i| {
            render_scene(&mut derived_rng(seed, &[0xE7A1, i]), 96, 96).expect("render scene")
        })
        .collect();
    let reduction =
        noise_mse_reduction(&net, &held_out, sigma, seed ^ 0xE7A2).expect("measure reduction");
    println!("held-out scenes: noise mse reduced by {:.0}%", 100.0 * reduction);

    let clean = &held_out[0];
    let noisy = add_noise(clean, sigma, &mut derived_rng(seed, &[0xE7A3]));
    let residual = net.extract_residual(&noisy).expect("extract residual");
    let mut denoised = noisy.clone();
    for (d, r) in denoised.data_mut().iter_mut().zip(residual.data()) {
        *d -= r;
    }
    let before = plane_mse(&noisy, clean).expect("mse");
    let after = plane_mse(&denoised, clean).expect("mse");
    println!("first held-out scene: mse {before:.3e} noisy -> {after:.3e} denoised");
    assert!(reduction >= 0.5, "denoiser should at least halve the noise energy, got {reduction:.3}");

    let weights = out_dir.join("denoiser.net");
    net.save(&weights).expect("save weights");
    println!("weights saved to {}", weights.display());
}
