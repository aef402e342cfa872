//! Builds a small synthetic multi-camera dataset and prints what landed
//! on disk: role counts, the camera split, and one forged image's mask
//! coverage.
//!
//! Run with: cargo run --release --example simulate_dataset

use noiseprint::io::read_mask_pgm;
use noiseprint::simulate::{build_dataset, DatasetConfig, Role};
use std::path::PathBuf;

fn main() -> noiseprint::Result<()> {
    let root = PathBuf::from("out/examples/simulate_dataset");
    let config = DatasetConfig {
        root: root.clone(),
        models: 4,
        devices_per_model: 2,
        images_per_device: 12,
        train_models: 2,
        val_models: 1,
        reference_images: 5,
        forged_images: 4,
        width: 128,
        height: 128,
        prnu_sigma: 0.02,
        amplitude: 0.015,
        noise_sigma: 0.01,
        periods: vec![4, 8],
        quantizations: vec![0.0, 0.02],
        seed: 2024,
    };
    let manifest = build_dataset(&config)?;

    println!("dataset under {}", root.display());
    for role in [
        Role::Train,
        Role::Validation,
        Role::Reference,
        Role::PristineTest,
        Role::ForgedTest,
    ] {
        let n = manifest.records_with_role(role).count();
        println!("  {:>13}: {n} images", role.as_str());
    }

    let models: Vec<usize> = {
        let mut m: Vec<usize> = manifest.records.iter().map(|r| r.model_id).collect();
        m.sort_unstable();
        m.dedup();
        m
    };
    println!("camera models: {models:?} (train 0..2, validation 2, test 3)");

    let forged = manifest
        .records_with_role(Role::ForgedTest)
        .next()
        .expect("dataset has forged images");
    let mask = read_mask_pgm(&root.join(forged.mask_path.as_ref().expect("forged has mask")))?;
    let coverage = 100.0 * mask.count_set() as f64 / (config.width * config.height) as f64;
    println!(
        "first forged image {} has a ground-truth mask covering {coverage:.1}% of its pixels",
        forged.path
    );
    Ok(())
}
