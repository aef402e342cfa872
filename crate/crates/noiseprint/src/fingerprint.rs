//! Reference fingerprint estimation.
//!
//! Two kinds of camera fingerprints are estimated from pristine images:
//!
//! - a **noiseprint reference**: the pixel-wise mean of the network's
//!   residuals over the reference stack. Averaging suppresses whatever
//!   scene content leaks through, leaving the camera-model artifacts.
//! - a **PRNU reference**: the classic maximum-likelihood estimate
//!   K̂ = Σ W_i·I_i / Σ I_i² built from Wiener-filter residuals, followed
//!   by per-row and per-column zero-meaning to suppress shared banding
//!   artifacts that are not unique to a device.

use crate::error::{Error, Result};
use crate::io::{path_with_suffix, read_float_plane, write_atomic, write_float_plane};
use crate::net::NoiseprintNet;
use crate::plane::Plane;
use rayon::prelude::*;
use std::path::{Path, PathBuf};

/// Camera fingerprint built by averaging network residuals.
#[derive(Debug, Clone)]
pub struct NoiseprintReference {
    pub mean_residual: Plane,
    pub n_images: usize,
    /// Digest of the network that produced the residuals.
    pub extractor_id: String,
    /// Free-form provenance (typically the source manifest digest).
    pub source: String,
}

/// Multiplicative sensor-noise fingerprint for the correlation baseline.
#[derive(Debug, Clone)]
pub struct PrnuReference {
    pub k_map: Plane,
    pub n_images: usize,
    /// Identifies the residual filter that produced the W_i.
    pub denoiser_id: String,
    /// Free-form provenance (typically the source manifest digest).
    pub source: String,
}

/// Pixel-wise mean of the network residuals of a pristine stack. All
/// images must come from the same camera and be aligned; nothing here can
/// check that, but sizes are enforced.
pub fn estimate_noiseprint_reference(
    images: &[Plane],
    net: &NoiseprintNet,
) -> Result<NoiseprintReference> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("reference stack is empty".into()))?;
    let (w, h) = (first.width(), first.height());
    for (i, img) in images.iter().enumerate() {
        if img.width() != w || img.height() != h {
            return Err(Error::shape(
                "noiseprint reference stack",
                format!("{w}x{h}"),
                format!("{}x{} (image {i})", img.width(), img.height()),
            ));
        }
    }
    let residuals: Vec<Plane> = images
        .par_iter()
        .map(|img| net.extract_residual(img))
        .collect::<Result<Vec<_>>>()?;
    reference_from_residuals(&residuals, &net.weights_digest())
}

/// Averages already-extracted residuals into a reference. Exposed so
/// callers that sweep several stack sizes can extract each residual once
/// and reuse it; `estimate_noiseprint_reference` goes through this too, so
/// both paths are arithmetically identical.
pub fn reference_from_residuals(
    residuals: &[Plane],
    extractor_id: &str,
) -> Result<NoiseprintReference> {
    let first = residuals
        .first()
        .ok_or_else(|| Error::InvalidArgument("reference stack is empty".into()))?;
    let (w, h) = (first.width(), first.height());
    // Fixed-order summation keeps the result independent of scheduling.
    let mut acc = vec![0.0f64; w * h];
    for r in residuals {
        if r.width() != w || r.height() != h {
            return Err(Error::shape(
                "noiseprint reference residuals",
                format!("{w}x{h}"),
                format!("{}x{}", r.width(), r.height()),
            ));
        }
        for (a, v) in acc.iter_mut().zip(r.data()) {
            *a += *v as f64;
        }
    }
    let n = residuals.len() as f64;
    let mean = Plane::from_vec(w, h, acc.iter().map(|a| (*a / n) as f32).collect())?;
    Ok(NoiseprintReference {
        mean_residual: mean,
        n_images: residuals.len(),
        extractor_id: extractor_id.to_string(),
        source: String::new(),
    })
}

/// Local adaptive Wiener filter settings: the window over which mean and
/// variance are estimated, and the assumed noise variance.
#[derive(Debug, Clone, Copy)]
pub struct WienerConfig {
    window: usize,
    noise_variance: f64,
}

impl Default for WienerConfig {
    fn default() -> WienerConfig {
        WienerConfig { window: 3, noise_variance: 9.0 / (255.0 * 255.0) }
    }
}

impl WienerConfig {
    pub fn new(window: usize, noise_variance: f64) -> Result<WienerConfig> {
        if window % 2 == 0 || !(3..=7).contains(&window) {
            return Err(Error::InvalidArgument(format!(
                "Wiener window must be 3, 5, or 7, got {window}"
            )));
        }
        if !noise_variance.is_finite() || noise_variance <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "Wiener noise variance must be positive, got {noise_variance}"
            )));
        }
        Ok(WienerConfig { window, noise_variance })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    /// Stable identifier recorded in reference sidecars.
    pub fn id(&self) -> String {
        format!("wiener{}x{}/{:.6e}", self.window, self.window, self.noise_variance)
    }
}

/// Local adaptive Wiener estimate of the noise-free image: per pixel,
/// shrink the deviation from the local mean by the locally estimated
/// signal-to-noise ratio. Windows are clipped at the borders.
pub fn wiener_denoise(image: &Plane, cfg: &WienerConfig) -> Plane {
    let (w, h) = (image.width(), image.height());
    let r = (cfg.window / 2) as isize;
    let nv = cfg.noise_variance;
    let mut out = Plane::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let x0 = (x as isize - r).max(0) as usize;
            let x1 = (x as isize + r).min(w as isize - 1) as usize;
            let y0 = (y as isize - r).max(0) as usize;
            let y1 = (y as isize + r).min(h as isize - 1) as usize;
            let mut sum = 0.0f64;
            let mut sq = 0.0f64;
            let mut n = 0usize;
            for sy in y0..=y1 {
                for sx in x0..=x1 {
                    let v = image.get(sx, sy) as f64;
                    sum += v;
                    sq += v * v;
                    n += 1;
                }
            }
            let mean = sum / n as f64;
            let var = (sq / n as f64 - mean * mean).max(0.0);
            let gain = (var - nv).max(0.0) / var.max(nv);
            let v = image.get(x, y) as f64;
            out.set(x, y, (mean + gain * (v - mean)) as f32);
        }
    }
    out
}

/// Noise residual for the PRNU baseline: W = image − Wiener(image),
/// normalized to zero mean. Whatever the filter cannot predict (sensor
/// noise, but also sharp scene texture) ends up here.
pub fn denoise_residual(image: &Plane, cfg: &WienerConfig) -> Plane {
    let denoised = wiener_denoise(image, cfg);
    let mut w = Plane::zeros(image.width(), image.height());
    for (o, (a, b)) in w.data_mut().iter_mut().zip(image.data().iter().zip(denoised.data())) {
        *o = a - b;
    }
    let mean = w.mean() as f32;
    for v in w.data_mut() {
        *v -= mean;
    }
    w
}

/// Subtracts every row's mean, then every column's mean. Any additive
/// field of the form r(y) + c(x) (shared banding) is annihilated exactly,
/// and both row and column means vanish afterwards.
pub fn zero_mean_rows_cols(plane: &mut Plane) {
    let (w, h) = (plane.width(), plane.height());
    if w == 0 || h == 0 {
        return;
    }
    for y in 0..h {
        let mean = (plane.row(y).iter().map(|&v| v as f64).sum::<f64>() / w as f64) as f32;
        for x in 0..w {
            let v = plane.get(x, y) - mean;
            plane.set(x, y, v);
        }
    }
    for x in 0..w {
        let mut sum = 0.0f64;
        for y in 0..h {
            sum += plane.get(x, y) as f64;
        }
        let mean = (sum / h as f64) as f32;
        for y in 0..h {
            let v = plane.get(x, y) - mean;
            plane.set(x, y, v);
        }
    }
}

/// Maximum-likelihood PRNU estimate from a stack of pristine images:
/// K̂ = Σ W_i·I_i / Σ I_i² per pixel, then row/column zero-meaned. Pixels
/// that are black across the whole stack have no information and get 0.
pub fn estimate_prnu(images: &[Plane], cfg: &WienerConfig) -> Result<PrnuReference> {
    if images.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "PRNU estimation needs at least 2 images, got {}",
            images.len()
        )));
    }
    let (w, h) = (images[0].width(), images[0].height());
    for (i, img) in images.iter().enumerate() {
        if img.width() != w || img.height() != h {
            return Err(Error::shape(
                "PRNU reference stack",
                format!("{w}x{h}"),
                format!("{}x{} (image {i})", img.width(), img.height()),
            ));
        }
    }
    let residuals: Vec<Plane> =
        images.par_iter().map(|img| denoise_residual(img, cfg)).collect();
    let mut num = vec![0.0f64; w * h];
    let mut den = vec![0.0f64; w * h];
    for (img, res) in images.iter().zip(&residuals) {
        for ((n, d), (iv, wv)) in
            num.iter_mut().zip(den.iter_mut()).zip(img.data().iter().zip(res.data()))
        {
            *n += *wv as f64 * *iv as f64;
            *d += *iv as f64 * *iv as f64;
        }
    }
    let mut k = Plane::zeros(w, h);
    for (o, (n, d)) in k.data_mut().iter_mut().zip(num.iter().zip(&den)) {
        *o = if *d > 0.0 { (*n / *d) as f32 } else { 0.0 };
    }
    zero_mean_rows_cols(&mut k);
    Ok(PrnuReference {
        k_map: k,
        n_images: images.len(),
        denoiser_id: cfg.id(),
        source: String::new(),
    })
}

const REFERENCE_MAGIC: &str = "fingerprint-reference 1";

fn sidecar_path(path: &Path) -> PathBuf {
    path_with_suffix(path, ".meta")
}

fn write_sidecar(path: &Path, kind: &str, n_images: usize, id_key: &str, id: &str, source: &str) -> Result<()> {
    let source = if source.is_empty() { "-" } else { source };
    let text = format!(
        "{REFERENCE_MAGIC}\ntype {kind}\nn_images {n_images}\n{id_key} {id}\nsource {source}\n"
    );
    write_atomic(&sidecar_path(path), text.as_bytes())
}

fn read_sidecar(path: &Path, expect_kind: &str) -> Result<(usize, String, String)> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(Error::io(&side))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, first)) if first == REFERENCE_MAGIC => {}
        Some((_, first)) => {
            return Err(Error::format(
                &side,
                1,
                format!("expected \"{REFERENCE_MAGIC}\", found \"{first}\""),
            ))
        }
        None => return Err(Error::format(&side, 1, "empty sidecar")),
    }
    let mut kind = None;
    let mut n_images = None;
    let mut id = None;
    let mut source = None;
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once(' ').ok_or_else(|| {
            Error::format(&side, line_no, format!("expected \"key value\", found \"{line}\""))
        })?;
        match key {
            "type" => kind = Some(value.to_string()),
            "n_images" => {
                n_images = Some(value.parse::<usize>().map_err(|_| {
                    Error::format(&side, line_no, format!("bad image count \"{value}\""))
                })?)
            }
            "extractor" | "denoiser" => id = Some(value.to_string()),
            "source" => source = Some(value.to_string()),
            other => {
                return Err(Error::format(&side, line_no, format!("unknown key \"{other}\"")))
            }
        }
    }
    let kind = kind.ok_or_else(|| Error::format(&side, 1, "sidecar lacks a type line"))?;
    if kind != expect_kind {
        return Err(Error::InvalidArgument(format!(
            "reference at {} has type {kind}, expected {expect_kind}",
            path.display()
        )));
    }
    let n_images =
        n_images.ok_or_else(|| Error::format(&side, 1, "sidecar lacks an n_images line"))?;
    let id = id.ok_or_else(|| Error::format(&side, 1, "sidecar lacks an extractor/denoiser line"))?;
    let source = source.unwrap_or_else(|| "-".to_string());
    let source = if source == "-" { String::new() } else { source };
    Ok((n_images, id, source))
}

pub fn save_noiseprint_reference(path: &Path, r: &NoiseprintReference) -> Result<()> {
    write_float_plane(path, &r.mean_residual)?;
    write_sidecar(path, "noiseprint", r.n_images, "extractor", &r.extractor_id, &r.source)
}

pub fn load_noiseprint_reference(path: &Path) -> Result<NoiseprintReference> {
    let mean_residual = read_float_plane(path)?;
    let (n_images, extractor_id, source) = read_sidecar(path, "noiseprint")?;
    Ok(NoiseprintReference { mean_residual, n_images, extractor_id, source })
}

pub fn save_prnu_reference(path: &Path, r: &PrnuReference) -> Result<()> {
    write_float_plane(path, &r.k_map)?;
    write_sidecar(path, "prnu", r.n_images, "denoiser", &r.denoiser_id, &r.source)
}

pub fn load_prnu_reference(path: &Path) -> Result<PrnuReference> {
    let k_map = read_float_plane(path)?;
    let (n_images, denoiser_id, source) = read_sidecar(path, "prnu")?;
    Ok(PrnuReference { k_map, n_images, denoiser_id, source })
}

/// Kind of reference stored at `path` ("noiseprint" or "prnu"), read from
/// its metadata sidecar without loading the map itself.
pub fn reference_kind(path: &Path) -> Result<String> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(Error::io(&side))?;
    for line in text.lines().skip(1) {
        if let Some(kind) = line.strip_prefix("type ") {
            return Ok(kind.to_string());
        }
    }
    Err(Error::format(&side, 1, "sidecar lacks a type line"))
}
