//! Synthetic camera simulation with known ground truth.
//!
//! A camera model owns a small tileable zero-mean texture that is added to
//! every image at a fixed phase (the periodic, model-wide processing
//! artifact). A device of a model additionally owns a per-pixel PRNU map: a
//! multiplicative noise field unique to the physical sensor. Acquisition is
//!
//! ```text
//! I = clip( scene·(1 + K) + α·tile(pattern) + AWGN(σ_n), 0, 1 )
//! ```
//!
//! followed by optional mean-preserving 8×8 block quantization. Forgeries
//! (splicing, rigid copy-move, inpainting) come with exact masks, so
//! localization quality can be measured instead of eyeballed.

use crate::error::{Error, Result};
use crate::io::{read_pgm, write_atomic, write_mask_pgm, write_pgm16};
use crate::plane::{Mask, Plane};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::HashSet;
use std::path::{Path, PathBuf};

/// Deterministic sub-seeded generator: the 32-byte ChaCha key is filled
/// from the base seed and a list of tag words, so independent streams can
/// be derived for every (purpose, model, device, image) combination.
pub fn derived_rng(base: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&base.to_le_bytes());
    for (i, tag) in tags.iter().enumerate() {
        let mixed = tag.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left((i as u32 + 1) * 7);
        let slot = 8 + (i % 3) * 8;
        let mut chunk = [0u8; 8];
        chunk.copy_from_slice(&key[slot..slot + 8]);
        let prev = u64::from_le_bytes(chunk);
        key[slot..slot + 8].copy_from_slice(&(prev ^ mixed).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// A camera model: every device of the model shares the same periodic
/// artifact texture.
#[derive(Debug, Clone)]
pub struct CameraModelSpec {
    pub model_id: usize,
    /// Artifact period A; the texture tiles the image with this period.
    pub period: usize,
    /// Artifact amplitude α (the texture has unit RMS).
    pub amplitude: f32,
    /// Block-quantization strength q; 0 disables it.
    pub quantization: f32,
    pub seed: u64,
}

impl CameraModelSpec {
    pub fn validate(&self) -> Result<()> {
        if ![2, 4, 8].contains(&self.period) {
            return Err(Error::InvalidArgument(format!(
                "artifact period must be 2, 4, or 8, got {}",
                self.period
            )));
        }
        if !self.amplitude.is_finite() || self.amplitude < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "artifact amplitude must be finite and non-negative, got {}",
                self.amplitude
            )));
        }
        if !self.quantization.is_finite() || self.quantization < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "quantization strength must be finite and non-negative, got {}",
                self.quantization
            )));
        }
        Ok(())
    }

    /// The model's A×A artifact texture: zero-mean, unit RMS, fixed by the
    /// model seed.
    pub fn pattern(&self) -> Plane {
        let a = self.period;
        let mut rng = derived_rng(self.seed, &[0x7061_7474, self.model_id as u64]);
        let normal = Normal::new(0.0f64, 1.0).expect("unit normal");
        let mut values: Vec<f64> = (0..a * a).map(|_| normal.sample(&mut rng)).collect();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        for v in &mut values {
            *v -= mean;
        }
        let rms = (values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64).sqrt();
        let scale = if rms > 0.0 { 1.0 / rms } else { 0.0 };
        Plane::from_vec(a, a, values.iter().map(|v| (*v * scale) as f32).collect())
            .expect("A×A values")
    }

    /// The pattern tiled over a w×h plane, phase anchored at the origin.
    pub fn tiled_pattern(&self, width: usize, height: usize) -> Plane {
        let pattern = self.pattern();
        let a = self.period;
        let mut out = Plane::zeros(width, height);
        for y in 0..height {
            for x in 0..width {
                out.set(x, y, pattern.get(x % a, y % a));
            }
        }
        out
    }
}

/// One physical device of a camera model.
#[derive(Debug, Clone)]
pub struct DeviceSpec {
    pub device_id: usize,
    pub model: CameraModelSpec,
    /// PRNU strength σ_K.
    pub prnu_sigma: f32,
    pub seed: u64,
}

impl DeviceSpec {
    /// The device's PRNU map: a zero-mean Gaussian field of std σ_K, fixed
    /// by the device seed (per image size).
    pub fn prnu_map(&self, width: usize, height: usize) -> Plane {
        let mut rng =
            derived_rng(self.seed, &[0x7072_6e75, self.device_id as u64, width as u64, height as u64]);
        if self.prnu_sigma == 0.0 {
            return Plane::zeros(width, height);
        }
        let normal = Normal::new(0.0f64, self.prnu_sigma as f64).expect("finite sigma");
        let mut values: Vec<f64> = (0..width * height).map(|_| normal.sample(&mut rng)).collect();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        for v in &mut values {
            *v -= mean;
        }
        Plane::from_vec(width, height, values.iter().map(|v| *v as f32).collect())
            .expect("w×h values")
    }
}

/// Renders a clean scene: low-frequency gradients, band-limited noise, and
/// a few hard-edged shapes, normalized to a healthy dynamic range.
pub fn render_scene(rng: &mut ChaCha8Rng, width: usize, height: usize) -> Result<Plane> {
    if width < 64 || height < 64 {
        return Err(Error::InvalidArgument(format!(
            "scenes must be at least 64x64, got {width}x{height}"
        )));
    }
    let mut raw = vec![0.0f64; width * height];

    // Low-frequency content: a tilted plane plus two large sinusoids.
    let gx = rng.gen_range(-1.0f64..1.0);
    let gy = rng.gen_range(-1.0f64..1.0);
    let (u1, v1, p1) = (rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0), rng.gen_range(0.0..std::f64::consts::TAU));
    let (u2, v2, p2) = (rng.gen_range(0.5..2.5), rng.gen_range(0.5..2.5), rng.gen_range(0.0..std::f64::consts::TAU));
    let (a1, a2) = (rng.gen_range(0.4..1.0), rng.gen_range(0.2..0.7));
    for y in 0..height {
        for x in 0..width {
            let fx = x as f64 / width as f64;
            let fy = y as f64 / height as f64;
            raw[y * width + x] = gx * fx
                + gy * fy
                + a1 * (std::f64::consts::TAU * (u1 * fx + v1 * fy) + p1).sin()
                + a2 * (std::f64::consts::TAU * (u2 * fx + v2 * fy) + p2).sin();
        }
    }

    // Band-limited noise: bilinear interpolation of a coarse random grid.
    let cell = 16usize;
    let gw = width.div_ceil(cell) + 2;
    let gh = height.div_ceil(cell) + 2;
    let grid: Vec<f64> = (0..gw * gh).map(|_| rng.gen_range(-1.0f64..1.0)).collect();
    let noise_amp = rng.gen_range(0.15..0.4);
    for y in 0..height {
        for x in 0..width {
            let fx = x as f64 / cell as f64;
            let fy = y as f64 / cell as f64;
            let x0 = fx.floor() as usize;
            let y0 = fy.floor() as usize;
            let tx = fx - x0 as f64;
            let ty = fy - y0 as f64;
            let g = |xx: usize, yy: usize| grid[yy * gw + xx];
            let top = g(x0, y0) * (1.0 - tx) + g(x0 + 1, y0) * tx;
            let bot = g(x0, y0 + 1) * (1.0 - tx) + g(x0 + 1, y0 + 1) * tx;
            raw[y * width + x] += noise_amp * (top * (1.0 - ty) + bot * ty);
        }
    }

    // Occasional hard edges: a few rectangles with sharp intensity steps.
    let shapes = rng.gen_range(1..=3);
    for _ in 0..shapes {
        let sw = rng.gen_range(width / 8..width / 2);
        let sh = rng.gen_range(height / 8..height / 2);
        let sx = rng.gen_range(0..width - sw);
        let sy = rng.gen_range(0..height - sh);
        let step = rng.gen_range(0.3f64..0.8) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        for y in sy..sy + sh {
            for x in sx..sx + sw {
                raw[y * width + x] += step;
            }
        }
    }

    // Normalize: map the raw range onto a generous sub-interval of [0, 1],
    // then pull the mean toward the middle if a skewed composition pushed
    // it out.
    let lo_t = 0.06 + rng.gen_range(0.0..0.1);
    let hi_t = 0.94 - rng.gen_range(0.0..0.1);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in &raw {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    let span = (hi - lo).max(1e-9);
    let mut out = Plane::zeros(width, height);
    for (i, v) in raw.iter().enumerate() {
        let mapped = lo_t + (v - lo) / span * (hi_t - lo_t);
        out.data_mut()[i] = mapped as f32;
    }
    let mean = out.mean();
    if !(0.25..=0.75).contains(&mean) {
        let shift = (0.5 - mean) as f32;
        for v in out.data_mut() {
            *v += shift;
        }
        out.clip(0.0, 1.0);
    }
    Ok(out)
}

/// Mean-preserving 8×8 block quantization: deviations from each block's
/// mean are rounded to multiples of q, then the block is re-centered on its
/// original mean. Produces periodic blocking artifacts without any codec.
pub fn quantize_blocks(image: &mut Plane, q: f32) {
    if q <= 0.0 {
        return;
    }
    let (w, h) = (image.width(), image.height());
    for by in (0..h).step_by(8) {
        for bx in (0..w).step_by(8) {
            let bw = (w - bx).min(8);
            let bh = (h - by).min(8);
            let count = (bw * bh) as f64;
            let mut mean = 0.0f64;
            for y in by..by + bh {
                for x in bx..bx + bw {
                    mean += image.get(x, y) as f64;
                }
            }
            mean /= count;
            let mut rounded_sum = 0.0f64;
            for y in by..by + bh {
                for x in bx..bx + bw {
                    let d = image.get(x, y) as f64 - mean;
                    let r = (d / q as f64).round() * q as f64;
                    image.set(x, y, r as f32);
                    rounded_sum += r;
                }
            }
            // Re-center so the block mean is exactly preserved.
            let correction = (mean - rounded_sum / count) as f32;
            for y in by..by + bh {
                for x in bx..bx + bw {
                    let v = image.get(x, y) + correction;
                    image.set(x, y, v);
                }
            }
        }
    }
    image.clip(0.0, 1.0);
}

/// Simulates the acquisition of a scene by a device.
pub fn acquire(
    scene: &Plane,
    device: &DeviceSpec,
    noise_sigma: f32,
    noise_seed: u64,
) -> Result<Plane> {
    device.model.validate()?;
    let (lo, hi) = scene.min_max();
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) {
        return Err(Error::InvalidArgument(format!(
            "scene values must lie in [0, 1], found range [{lo}, {hi}]"
        )));
    }
    if !noise_sigma.is_finite() || noise_sigma < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "shot-noise sigma must be finite and non-negative, got {noise_sigma}"
        )));
    }
    let (w, h) = (scene.width(), scene.height());
    let k = device.prnu_map(w, h);
    let pattern = device.model.pattern();
    let a = device.model.period;
    let alpha = device.model.amplitude;
    let mut rng = derived_rng(noise_seed, &[0x6e6f_6973]);
    let normal = Normal::new(0.0f32, noise_sigma.max(f32::MIN_POSITIVE)).expect("finite sigma");
    let mut out = Plane::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut v = scene.get(x, y) * (1.0 + k.get(x, y)) + alpha * pattern.get(x % a, y % a);
            if noise_sigma > 0.0 {
                v += normal.sample(&mut rng);
            }
            out.set(x, y, v.clamp(0.0, 1.0));
        }
    }
    quantize_blocks(&mut out, device.model.quantization);
    Ok(out)
}

/// What a forgery does to the masked region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForgeryKind {
    /// Replace the region with the donor image's pixels.
    Splicing,
    /// Replace each region pixel (x, y) with the target's own pixel at
    /// (x − dx, y − dy).
    CopyMove { dx: isize, dy: isize },
    /// Replace the region with a smooth boundary interpolation, erasing
    /// both the pattern and the PRNU. The radius adds extra box smoothing.
    Inpainting { radius: usize },
}

#[derive(Debug, Clone)]
pub struct ForgerySpec {
    pub kind: ForgeryKind,
    pub mask: Mask,
}

/// Harmonic fill: solves the Laplace equation inside the mask with the
/// surrounding pixels as boundary values (successive over-relaxation).
fn harmonic_fill(image: &mut Plane, mask: &Mask) {
    let (w, h) = (image.width(), image.height());
    // Initialize the region with the mean of its boundary ring.
    let mut boundary_sum = 0.0f64;
    let mut boundary_n = 0usize;
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) {
                continue;
            }
            let touches = (x > 0 && mask.get(x - 1, y))
                || (x + 1 < w && mask.get(x + 1, y))
                || (y > 0 && mask.get(x, y - 1))
                || (y + 1 < h && mask.get(x, y + 1));
            if touches {
                boundary_sum += image.get(x, y) as f64;
                boundary_n += 1;
            }
        }
    }
    let init = if boundary_n > 0 { (boundary_sum / boundary_n as f64) as f32 } else { 0.5 };
    let inside: Vec<(usize, usize)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .filter(|&(x, y)| mask.get(x, y))
        .collect();
    for &(x, y) in &inside {
        image.set(x, y, init);
    }
    let omega = 1.9f32;
    let max_sweeps = 20_000usize;
    for _ in 0..max_sweeps {
        let mut max_delta = 0.0f32;
        for &(x, y) in &inside {
            // The mask is strictly inside the image, so all four neighbors
            // exist.
            let avg = 0.25
                * (image.get(x - 1, y) + image.get(x + 1, y) + image.get(x, y - 1)
                    + image.get(x, y + 1));
            let old = image.get(x, y);
            let new = old + omega * (avg - old);
            image.set(x, y, new);
            max_delta = max_delta.max((new - old).abs());
        }
        if max_delta < 1e-7 {
            break;
        }
    }
}

/// Applies a forgery. Pixels outside the mask are bit-identical to the
/// target; the returned mask is the ground truth. Splicing needs a donor
/// image of the same size.
pub fn forge(
    target: &Plane,
    spec: &ForgerySpec,
    donor: Option<&Plane>,
) -> Result<(Plane, Mask)> {
    let (w, h) = (target.width(), target.height());
    if spec.mask.width() != w || spec.mask.height() != h {
        return Err(Error::shape(
            "forgery mask",
            format!("{w}x{h}"),
            format!("{}x{}", spec.mask.width(), spec.mask.height()),
        ));
    }
    if !spec.mask.any() {
        return Err(Error::InvalidArgument("forgery mask is empty".into()));
    }
    if !spec.mask.is_strictly_inside() {
        return Err(Error::InvalidArgument(
            "forgery mask must not touch the image border".into(),
        ));
    }
    let mut out = target.clone();
    match spec.kind {
        ForgeryKind::Splicing => {
            let donor = donor.ok_or_else(|| {
                Error::InvalidArgument("splicing requires a donor image".into())
            })?;
            if donor.width() != w || donor.height() != h {
                return Err(Error::shape(
                    "splicing donor",
                    format!("{w}x{h}"),
                    format!("{}x{}", donor.width(), donor.height()),
                ));
            }
            for y in 0..h {
                for x in 0..w {
                    if spec.mask.get(x, y) {
                        out.set(x, y, donor.get(x, y));
                    }
                }
            }
        }
        ForgeryKind::CopyMove { dx, dy } => {
            for y in 0..h {
                for x in 0..w {
                    if !spec.mask.get(x, y) {
                        continue;
                    }
                    let sx = x as isize - dx;
                    let sy = y as isize - dy;
                    if sx < 0 || sy < 0 || sx >= w as isize || sy >= h as isize {
                        return Err(Error::InvalidArgument(format!(
                            "copy-move source for ({x}, {y}) with displacement ({dx}, {dy}) \
                             falls outside the image"
                        )));
                    }
                    out.set(x, y, target.get(sx as usize, sy as usize));
                }
            }
        }
        ForgeryKind::Inpainting { radius } => {
            harmonic_fill(&mut out, &spec.mask);
            if radius > 0 {
                let blurred = box_blur(&out, radius);
                for y in 0..h {
                    for x in 0..w {
                        if spec.mask.get(x, y) {
                            out.set(x, y, blurred.get(x, y));
                        }
                    }
                }
            }
        }
    }
    Ok((out, spec.mask.clone()))
}

/// Box blur with clamped borders; the window is (2r+1)².
pub fn box_blur(image: &Plane, radius: usize) -> Plane {
    if radius == 0 {
        return image.clone();
    }
    let (w, h) = (image.width(), image.height());
    let r = radius as isize;
    let mut out = Plane::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f64;
            let mut n = 0usize;
            for oy in -r..=r {
                for ox in -r..=r {
                    let sx = (x as isize + ox).clamp(0, w as isize - 1) as usize;
                    let sy = (y as isize + oy).clamp(0, h as isize - 1) as usize;
                    acc += image.get(sx, sy) as f64;
                    n += 1;
                }
            }
            out.set(x, y, (acc / n as f64) as f32);
        }
    }
    out
}

/// Dataset roles, assigned at the camera-model level for train/validation
/// and at the image level within held-out test models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Train,
    Validation,
    Reference,
    PristineTest,
    ForgedTest,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Validation => "validation",
            Role::Reference => "reference",
            Role::PristineTest => "pristine-test",
            Role::ForgedTest => "forged-test",
        }
    }

    pub fn parse(s: &str) -> Option<Role> {
        match s {
            "train" => Some(Role::Train),
            "validation" => Some(Role::Validation),
            "reference" => Some(Role::Reference),
            "pristine-test" => Some(Role::PristineTest),
            "forged-test" => Some(Role::ForgedTest),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ManifestRecord {
    /// Path relative to the dataset root.
    pub path: String,
    pub role: Role,
    pub model_id: usize,
    pub device_id: usize,
    pub seed: u64,
    pub mask_path: Option<String>,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub meta: Vec<(String, String)>,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn records_with_role(&self, role: Role) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.role == role)
    }

    /// Camera-level disjointness and per-record consistency checks.
    pub fn validate(&self) -> Result<()> {
        let mut train_models = HashSet::new();
        let mut test_models = HashSet::new();
        let mut paths = HashSet::new();
        for r in &self.records {
            if !paths.insert(&r.path) {
                return Err(Error::InvalidArgument(format!(
                    "manifest lists {} twice",
                    r.path
                )));
            }
            match r.role {
                Role::Train | Role::Validation => {
                    train_models.insert(r.model_id);
                }
                Role::Reference | Role::PristineTest | Role::ForgedTest => {
                    test_models.insert(r.model_id);
                }
            }
            match r.role {
                Role::ForgedTest => {
                    if r.mask_path.is_none() {
                        return Err(Error::InvalidArgument(format!(
                            "forged-test record {} has no mask",
                            r.path
                        )));
                    }
                }
                _ => {
                    if r.mask_path.is_some() {
                        return Err(Error::InvalidArgument(format!(
                            "non-forged record {} must not carry a mask",
                            r.path
                        )));
                    }
                }
            }
        }
        if let Some(shared) = train_models.intersection(&test_models).next() {
            return Err(Error::InvalidArgument(format!(
                "camera model {shared} appears in both training-side and test-side roles"
            )));
        }
        Ok(())
    }
}

const MANIFEST_MAGIC: &str = "noiseprint-dataset 1";

pub fn render_manifest(manifest: &DatasetManifest) -> String {
    let mut out = String::from(MANIFEST_MAGIC);
    out.push('\n');
    for (k, v) in &manifest.meta {
        out.push_str(&format!("meta {k} {v}\n"));
    }
    for r in &manifest.records {
        out.push_str(&format!(
            "record {} {} {} {} {}",
            r.path,
            r.role.as_str(),
            r.model_id,
            r.device_id,
            r.seed
        ));
        if let Some(m) = &r.mask_path {
            out.push_str(&format!(" {m}"));
        }
        out.push('\n');
    }
    out
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    write_atomic(path, render_manifest(manifest).as_bytes())
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, first)) if first == MANIFEST_MAGIC => {}
        Some((_, first)) => {
            return Err(Error::format(
                path,
                1,
                format!("expected \"{MANIFEST_MAGIC}\", found \"{first}\""),
            ))
        }
        None => return Err(Error::format(path, 1, "empty manifest")),
    }
    let mut meta = Vec::new();
    let mut records = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(' ');
        match parts.next() {
            Some("meta") => {
                let key = parts
                    .next()
                    .ok_or_else(|| Error::format(path, line_no, "meta line lacks a key"))?;
                let value: Vec<&str> = parts.collect();
                if value.is_empty() {
                    return Err(Error::format(path, line_no, "meta line lacks a value"));
                }
                meta.push((key.to_string(), value.join(" ")));
            }
            Some("record") => {
                let fields: Vec<&str> = parts.collect();
                if fields.len() != 5 && fields.len() != 6 {
                    return Err(Error::format(
                        path,
                        line_no,
                        format!("record needs 5 or 6 fields, found {}", fields.len()),
                    ));
                }
                let role = Role::parse(fields[1]).ok_or_else(|| {
                    Error::format(path, line_no, format!("unknown role \"{}\"", fields[1]))
                })?;
                let parse_num = |s: &str, what: &str| -> Result<u64> {
                    s.parse().map_err(|_| {
                        Error::format(path, line_no, format!("{what} \"{s}\" is not a number"))
                    })
                };
                records.push(ManifestRecord {
                    path: fields[0].to_string(),
                    role,
                    model_id: parse_num(fields[2], "model id")? as usize,
                    device_id: parse_num(fields[3], "device id")? as usize,
                    seed: parse_num(fields[4], "seed")?,
                    mask_path: fields.get(5).map(|s| s.to_string()),
                });
            }
            Some(other) => {
                return Err(Error::format(
                    path,
                    line_no,
                    format!("unrecognized line kind \"{other}\""),
                ))
            }
            None => unreachable!("split always yields at least one item"),
        }
    }
    Ok(DatasetManifest { meta, records })
}

/// Full dataset description. Models are numbered 0..models; the first
/// `train_models − val_models` are training cameras, the next `val_models`
/// are validation cameras, and the rest are held-out test cameras whose
/// images split into reference, pristine-test, and forged-test roles.
#[derive(Debug, Clone)]
pub struct DatasetConfig {
    pub root: PathBuf,
    pub models: usize,
    pub devices_per_model: usize,
    pub images_per_device: usize,
    pub train_models: usize,
    pub val_models: usize,
    pub reference_images: usize,
    pub forged_images: usize,
    pub width: usize,
    pub height: usize,
    pub prnu_sigma: f32,
    pub amplitude: f32,
    pub noise_sigma: f32,
    /// Artifact period per model, cycled.
    pub periods: Vec<usize>,
    /// Quantization strength per model, cycled.
    pub quantizations: Vec<f32>,
    pub seed: u64,
}

impl DatasetConfig {
    /// Desk-scale defaults: 6 models × 2 devices × 60 images of 256×256,
    /// 4 training-side models (one of them validation), 20/20/20
    /// reference/pristine/forged split on the 2 test models.
    pub fn desk(root: PathBuf, seed: u64) -> DatasetConfig {
        DatasetConfig {
            root,
            models: 6,
            devices_per_model: 2,
            images_per_device: 60,
            train_models: 4,
            val_models: 1,
            reference_images: 20,
            forged_images: 20,
            width: 256,
            height: 256,
            prnu_sigma: 0.02,
            amplitude: 0.015,
            noise_sigma: 0.01,
            periods: vec![4, 8],
            quantizations: vec![0.0, 0.02],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.models == 0 || self.devices_per_model == 0 || self.images_per_device == 0 {
            return Err(Error::InvalidArgument(
                "dataset needs at least one model, device, and image".into(),
            ));
        }
        if self.train_models >= self.models {
            return Err(Error::InvalidArgument(format!(
                "training-side models ({}) must leave at least one test model (have {})",
                self.train_models, self.models
            )));
        }
        if self.val_models >= self.train_models {
            return Err(Error::InvalidArgument(format!(
                "validation models ({}) must be fewer than training-side models ({})",
                self.val_models, self.train_models
            )));
        }
        if self.reference_images + self.forged_images > self.images_per_device {
            return Err(Error::InvalidArgument(format!(
                "reference ({}) plus forged ({}) images exceed images per device ({})",
                self.reference_images, self.forged_images, self.images_per_device
            )));
        }
        if self.reference_images == 0 {
            return Err(Error::InvalidArgument(
                "test devices need at least one reference image".into(),
            ));
        }
        if self.width < 64 || self.height < 64 {
            return Err(Error::InvalidArgument(format!(
                "images must be at least 64x64, got {}x{}",
                self.width, self.height
            )));
        }
        if self.periods.is_empty() || self.quantizations.is_empty() {
            return Err(Error::InvalidArgument(
                "periods and quantizations must list at least one entry".into(),
            ));
        }
        Ok(())
    }

    pub fn model_spec(&self, model_id: usize) -> CameraModelSpec {
        CameraModelSpec {
            model_id,
            period: self.periods[model_id % self.periods.len()],
            amplitude: self.amplitude,
            quantization: self.quantizations[model_id % self.quantizations.len()],
            seed: self.seed ^ (model_id as u64).wrapping_mul(0xD134_2543_DE82_EF95).wrapping_add(1),
        }
    }

    pub fn device_spec(&self, model_id: usize, device_id: usize) -> DeviceSpec {
        DeviceSpec {
            device_id,
            model: self.model_spec(model_id),
            prnu_sigma: self.prnu_sigma,
            seed: self.seed
                ^ ((model_id as u64) << 32 | device_id as u64)
                    .wrapping_mul(0xA076_1D64_78BD_642F)
                    .wrapping_add(2),
        }
    }
}

// Seed-derivation tags for the independent random streams of one image.
const TAG_SCENE: u64 = 1;
const TAG_NOISE: u64 = 2;
const TAG_FORGE: u64 = 3;
const TAG_DONOR_SCENE: u64 = 4;
const TAG_DONOR_NOISE: u64 = 5;

fn image_file_name(model: usize, device: usize, image: usize) -> String {
    format!("images/m{model:02}_d{device:02}_i{image:03}.pgm")
}

fn mask_file_name(model: usize, device: usize, image: usize) -> String {
    format!("masks/m{model:02}_d{device:02}_i{image:03}.pgm")
}

/// The seed recorded in the manifest for one image slot; every random
/// stream touching that slot derives from it.
fn slot_seed(config: &DatasetConfig, model: usize, device: usize, image: usize) -> u64 {
    config
        .seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(((model as u64) << 40) | ((device as u64) << 20) | image as u64)
}

/// Generates a pristine image for a slot.
fn pristine_image(config: &DatasetConfig, model: usize, device: usize, image: usize) -> Result<Plane> {
    let seed = slot_seed(config, model, device, image);
    let mut scene_rng = derived_rng(seed, &[TAG_SCENE]);
    let scene = render_scene(&mut scene_rng, config.width, config.height)?;
    acquire(
        &scene,
        &config.device_spec(model, device),
        config.noise_sigma,
        seed ^ TAG_NOISE,
    )
}

/// Copy-move displacement along one axis: picks the side with more room
/// (positive pulls from before the mask, negative from after it) and a
/// magnitude of at least 12 pixels where the room allows it.
fn axis_displacement(rng: &mut ChaCha8Rng, room_before: usize, room_after: usize) -> isize {
    let (room, sign) = if room_before >= room_after {
        (room_before, 1isize)
    } else {
        (room_after, -1isize)
    };
    let max_mag = room.min(40);
    let mag = if max_mag >= 12 { rng.gen_range(12..=max_mag) } else { max_mag.max(1) };
    sign * mag as isize
}

/// Builds a forgery for a forged-test slot: the kind cycles through
/// splicing, copy-move, and inpainting; the mask is a random rectangle
/// strictly inside the image.
fn forged_image(
    config: &DatasetConfig,
    model: usize,
    device: usize,
    image: usize,
    forgery_index: usize,
) -> Result<(Plane, Mask)> {
    let seed = slot_seed(config, model, device, image);
    let pristine = pristine_image(config, model, device, image)?;
    let mut rng = derived_rng(seed, &[TAG_FORGE]);
    let (w, h) = (config.width, config.height);
    let mw = rng.gen_range(w / 5..w / 3);
    let mh = rng.gen_range(h / 5..h / 3);
    let margin = 8usize;
    let mx = rng.gen_range(margin..w - mw - margin);
    let my = rng.gen_range(margin..h - mh - margin);
    let mask = Mask::rect(w, h, mx, my, mw, mh)?;

    let kind = match forgery_index % 3 {
        0 => ForgeryKind::Splicing,
        1 => ForgeryKind::CopyMove {
            dx: axis_displacement(&mut rng, mx, w - mx - mw),
            dy: axis_displacement(&mut rng, my, h - my - mh),
        },
        _ => ForgeryKind::Inpainting { radius: 2 },
    };

    let donor = if kind == ForgeryKind::Splicing {
        // Donor: a different test model (or any other model when only one
        // test model exists), its first device, a fresh scene.
        let donor_model = if model + 1 < config.models { model + 1 } else { model.saturating_sub(1) };
        let mut donor_scene_rng = derived_rng(seed, &[TAG_DONOR_SCENE]);
        let donor_scene = render_scene(&mut donor_scene_rng, w, h)?;
        Some(acquire(
            &donor_scene,
            &config.device_spec(donor_model, 0),
            config.noise_sigma,
            seed ^ TAG_DONOR_NOISE,
        )?)
    } else {
        None
    };

    forge(&pristine, &ForgerySpec { kind, mask }, donor.as_ref())
}

/// Generates every image of the dataset onto disk and returns the written
/// manifest. Regenerating with the same config produces identical bytes.
pub fn build_dataset(config: &DatasetConfig) -> Result<DatasetManifest> {
    config.validate()?;
    std::fs::create_dir_all(config.root.join("images")).map_err(Error::io(&config.root))?;
    std::fs::create_dir_all(config.root.join("masks")).map_err(Error::io(&config.root))?;

    let mut records = Vec::new();
    let mut forgery_counter = 0usize;
    for model in 0..config.models {
        let model_role = if model < config.train_models - config.val_models {
            Role::Train
        } else if model < config.train_models {
            Role::Validation
        } else {
            Role::PristineTest // placeholder; refined per image below
        };
        let is_test_model = model >= config.train_models;
        for device in 0..config.devices_per_model {
            for image in 0..config.images_per_device {
                let role = if !is_test_model {
                    model_role
                } else if image < config.reference_images {
                    Role::Reference
                } else if image < config.images_per_device - config.forged_images {
                    Role::PristineTest
                } else {
                    Role::ForgedTest
                };
                let rel_path = image_file_name(model, device, image);
                let abs_path = config.root.join(&rel_path);
                let seed = slot_seed(config, model, device, image);
                let mask_rel = if role == Role::ForgedTest {
                    let (forged, mask) =
                        forged_image(config, model, device, image, forgery_counter)?;
                    forgery_counter += 1;
                    write_pgm16(&abs_path, &forged)?;
                    let mask_rel = mask_file_name(model, device, image);
                    write_mask_pgm(&config.root.join(&mask_rel), &mask)?;
                    Some(mask_rel)
                } else {
                    let img = pristine_image(config, model, device, image)?;
                    write_pgm16(&abs_path, &img)?;
                    None
                };
                records.push(ManifestRecord {
                    path: rel_path,
                    role,
                    model_id: model,
                    device_id: device,
                    seed,
                    mask_path: mask_rel,
                });
            }
        }
    }

    let manifest = DatasetManifest {
        meta: vec![
            ("models".into(), config.models.to_string()),
            ("devices_per_model".into(), config.devices_per_model.to_string()),
            ("images_per_device".into(), config.images_per_device.to_string()),
            ("train_models".into(), config.train_models.to_string()),
            ("val_models".into(), config.val_models.to_string()),
            ("reference_images".into(), config.reference_images.to_string()),
            ("forged_images".into(), config.forged_images.to_string()),
            ("width".into(), config.width.to_string()),
            ("height".into(), config.height.to_string()),
            ("prnu_sigma".into(), config.prnu_sigma.to_string()),
            ("amplitude".into(), config.amplitude.to_string()),
            ("noise_sigma".into(), config.noise_sigma.to_string()),
            ("seed".into(), config.seed.to_string()),
        ],
        records,
    };
    manifest.validate()?;
    write_manifest(&config.root.join("manifest.txt"), &manifest)?;
    Ok(manifest)
}

/// Loads the images of the given roles, in manifest order.
pub fn load_role_images(
    root: &Path,
    manifest: &DatasetManifest,
    roles: &[Role],
) -> Result<Vec<(ManifestRecord, Plane)>> {
    let mut out = Vec::new();
    for r in &manifest.records {
        if roles.contains(&r.role) {
            let plane = read_pgm(&root.join(&r.path))?;
            out.push((r.clone(), plane));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plane::normalized_correlation;

    fn test_device(period: usize, amplitude: f32, prnu: f32, q: f32) -> DeviceSpec {
        DeviceSpec {
            device_id: 0,
            model: CameraModelSpec {
                model_id: 0,
                period,
                amplitude,
                quantization: q,
                seed: 11,
            },
            prnu_sigma: prnu,
            seed: 22,
        }
    }

    #[test]
    fn scenes_are_deterministic() {
        let a = render_scene(&mut derived_rng(5, &[]), 64, 96).unwrap();
        let b = render_scene(&mut derived_rng(5, &[]), 64, 96).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn scenes_have_healthy_statistics_over_100_seeds() {
        for seed in 0..100u64 {
            let scene = render_scene(&mut derived_rng(seed, &[7]), 96, 96).unwrap();
            let (lo, hi) = scene.min_max();
            assert!(lo >= 0.0 && hi <= 1.0, "seed {seed}: range [{lo}, {hi}] leaves [0,1]");
            assert!(hi - lo > 0.3, "seed {seed}: dynamic range {} too small", hi - lo);
            let mean = scene.mean();
            assert!(
                (0.2..=0.8).contains(&mean),
                "seed {seed}: mean {mean} outside [0.2, 0.8]"
            );
        }
        assert!(render_scene(&mut derived_rng(0, &[]), 32, 96).is_err(), "too-small scenes rejected");
    }

    #[test]
    fn identity_chain_returns_scene_exactly() {
        let scene = render_scene(&mut derived_rng(1, &[]), 64, 64).unwrap();
        let device = test_device(4, 0.0, 0.0, 0.0);
        let image = acquire(&scene, &device, 0.0, 3).unwrap();
        for (a, b) in scene.data().iter().zip(image.data()) {
            assert_eq!(a.to_bits(), b.to_bits(), "all-zero chain must be the identity");
        }
    }

    #[test]
    fn flat_scene_reveals_pattern_phase() {
        let alpha = 0.02f32;
        let device = test_device(4, alpha, 0.0, 0.0);
        let scene = Plane::filled(64, 64, 0.5);
        let image = acquire(&scene, &device, 0.0, 4).unwrap();
        let pattern = device.model.pattern();
        for y in 0..64 {
            for x in 0..64 {
                let expect = 0.5 + alpha * pattern.get(x % 4, y % 4);
                assert!(
                    (image.get(x, y) - expect).abs() < 1e-6,
                    "pixel ({x},{y}): {} vs {expect}",
                    image.get(x, y)
                );
            }
        }
    }

    #[test]
    fn pattern_is_zero_mean_unit_rms_and_shared_across_devices() {
        for period in [2usize, 4, 8] {
            let model = CameraModelSpec {
                model_id: 3,
                period,
                amplitude: 0.015,
                quantization: 0.0,
                seed: 9,
            };
            let p = model.pattern();
            // The centering runs in f64 but storage is f32, so a cast-sized
            // remainder is expected.
            assert!(p.mean().abs() < 1e-6, "pattern mean must vanish, got {}", p.mean());
            let rms = (p.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>()
                / p.len() as f64)
                .sqrt();
            assert!((rms - 1.0).abs() < 1e-6, "pattern RMS must be 1, got {rms}");
        }
        let d1 = DeviceSpec { device_id: 1, seed: 100, ..test_device(4, 0.015, 0.02, 0.0) };
        let d2 = DeviceSpec { device_id: 2, seed: 200, ..test_device(4, 0.015, 0.02, 0.0) };
        assert_eq!(d1.model.pattern().data(), d2.model.pattern().data());
    }

    #[test]
    fn prnu_maps_of_distinct_devices_are_uncorrelated() {
        let base = test_device(4, 0.015, 0.02, 0.0);
        let d1 = DeviceSpec { device_id: 1, seed: 101, ..base.clone() };
        let d2 = DeviceSpec { device_id: 2, seed: 102, ..base.clone() };
        let k1 = d1.prnu_map(256, 256);
        let k2 = d2.prnu_map(256, 256);
        let corr = normalized_correlation(&k1, &k2).unwrap();
        assert!(corr.abs() < 0.05, "distinct devices must be uncorrelated, got {corr}");
        // Same device twice: identical map.
        let k1b = d1.prnu_map(256, 256);
        assert_eq!(k1.data(), k1b.data());
        assert!(k1.mean().abs() < 1e-9);
    }

    #[test]
    fn averaging_flat_field_residuals_recovers_prnu() {
        let device = test_device(4, 0.0, 0.02, 0.0);
        let scene = Plane::filled(128, 128, 0.5);
        let k = device.prnu_map(128, 128);
        let mut acc = vec![0.0f64; 128 * 128];
        let n = 200usize;
        for i in 0..n {
            let image = acquire(&scene, &device, 0.01, 1000 + i as u64).unwrap();
            for (a, (iv, sv)) in acc.iter_mut().zip(image.data().iter().zip(scene.data())) {
                *a += (*iv - *sv) as f64;
            }
        }
        let mean_residual =
            Plane::from_vec(128, 128, acc.iter().map(|v| (*v / n as f64) as f32).collect())
                .unwrap();
        let corr = normalized_correlation(&mean_residual, &k).unwrap();
        assert!(corr > 0.9, "200-image mean residual should recover K, corr = {corr}");
    }

    #[test]
    fn block_quantization_preserves_block_means() {
        let mut image = render_scene(&mut derived_rng(8, &[]), 64, 64).unwrap();
        let original = image.clone();
        quantize_blocks(&mut image, 0.05);
        assert_ne!(original.data(), image.data(), "quantization must alter the image");
        for by in (0..64).step_by(8) {
            for bx in (0..64).step_by(8) {
                let mut m0 = 0.0f64;
                let mut m1 = 0.0f64;
                for y in by..by + 8 {
                    for x in bx..bx + 8 {
                        m0 += original.get(x, y) as f64;
                        m1 += image.get(x, y) as f64;
                    }
                }
                assert!(
                    (m0 - m1).abs() / 64.0 < 1e-5,
                    "block ({bx},{by}) mean drifted: {m0} vs {m1}"
                );
            }
        }
    }

    #[test]
    fn forgeries_leave_outside_pixels_bit_identical() {
        let scene = render_scene(&mut derived_rng(9, &[]), 96, 96).unwrap();
        let device = test_device(4, 0.015, 0.02, 0.0);
        let target = acquire(&scene, &device, 0.01, 5).unwrap();
        let donor_scene = render_scene(&mut derived_rng(10, &[]), 96, 96).unwrap();
        let donor = acquire(&donor_scene, &test_device(8, 0.015, 0.02, 0.0), 0.01, 6).unwrap();
        let mask = Mask::rect(96, 96, 30, 30, 24, 24).unwrap();
        for kind in [
            ForgeryKind::Splicing,
            ForgeryKind::CopyMove { dx: 16, dy: 8 },
            ForgeryKind::Inpainting { radius: 2 },
        ] {
            let (forged, out_mask) =
                forge(&target, &ForgerySpec { kind, mask: mask.clone() }, Some(&donor)).unwrap();
            assert_eq!(out_mask, mask);
            let mut changed_inside = false;
            for y in 0..96 {
                for x in 0..96 {
                    if mask.get(x, y) {
                        changed_inside |= forged.get(x, y) != target.get(x, y);
                    } else {
                        assert_eq!(
                            forged.get(x, y).to_bits(),
                            target.get(x, y).to_bits(),
                            "outside-mask pixel ({x},{y}) changed under {kind:?}"
                        );
                    }
                }
            }
            assert!(changed_inside, "{kind:?} should modify the masked region");
        }
    }

    #[test]
    fn degenerate_splice_is_a_no_op() {
        let scene = render_scene(&mut derived_rng(11, &[]), 64, 64).unwrap();
        let device = test_device(4, 0.015, 0.02, 0.0);
        let target = acquire(&scene, &device, 0.01, 7).unwrap();
        let mask = Mask::rect(64, 64, 20, 20, 16, 16).unwrap();
        let (forged, _) = forge(
            &target,
            &ForgerySpec { kind: ForgeryKind::Splicing, mask },
            Some(&target),
        )
        .unwrap();
        assert_eq!(forged.data(), target.data(), "self-splice must be the identity");
    }

    #[test]
    fn copy_move_phase_follows_period_arithmetic() {
        // Noise-free, PRNU-free acquisition of a flat scene: the image is
        // exactly periodic with the pattern, so a displacement that is a
        // multiple of the period copies identical values, and any other
        // displacement breaks the phase.
        let device = test_device(4, 0.05, 0.0, 0.0);
        let scene = Plane::filled(64, 64, 0.5);
        let target = acquire(&scene, &device, 0.0, 8).unwrap();
        let mask = Mask::rect(64, 64, 24, 24, 16, 16).unwrap();

        let (aligned, _) = forge(
            &target,
            &ForgerySpec { kind: ForgeryKind::CopyMove { dx: 8, dy: 4 }, mask: mask.clone() },
            None,
        )
        .unwrap();
        assert_eq!(
            aligned.data(),
            target.data(),
            "displacement (8, 4) is a period multiple: phase must be unchanged"
        );

        let (shifted, _) = forge(
            &target,
            &ForgerySpec { kind: ForgeryKind::CopyMove { dx: 9, dy: 4 }, mask: mask.clone() },
            None,
        )
        .unwrap();
        let mut differing = 0usize;
        for y in 0..64 {
            for x in 0..64 {
                if mask.get(x, y) && shifted.get(x, y) != target.get(x, y) {
                    differing += 1;
                }
            }
        }
        assert!(
            differing > 100,
            "displacement (9, 4) breaks the phase; {differing} in-mask pixels differ"
        );
    }

    #[test]
    fn inpainting_erases_the_pattern() {
        let device = test_device(4, 0.05, 0.0, 0.0);
        let scene = Plane::filled(96, 96, 0.5);
        let target = acquire(&scene, &device, 0.0, 9).unwrap();
        let mask = Mask::rect(96, 96, 32, 32, 24, 24).unwrap();
        let (inpainted, _) = forge(
            &target,
            &ForgerySpec { kind: ForgeryKind::Inpainting { radius: 2 }, mask: mask.clone() },
            None,
        )
        .unwrap();
        let tiled = device.model.tiled_pattern(96, 96);
        // Compare pattern energy inside the mask before and after.
        let crop_in = |p: &Plane| p.crop(32, 32, 24, 24).unwrap();
        let corr_before = normalized_correlation(&crop_in(&target), &crop_in(&tiled)).unwrap();
        let corr_after = normalized_correlation(&crop_in(&inpainted), &crop_in(&tiled));
        assert!(corr_before > 0.99, "pattern dominates the pristine flat image");
        // The inpainted region is near-constant; correlation is either
        // undefined (zero variance) or tiny.
        match corr_after {
            Ok(c) => assert!(c.abs() < 0.1, "inpainting left pattern correlation {c}"),
            Err(_) => {}
        }
    }

    #[test]
    fn invalid_forgeries_are_rejected() {
        let target = Plane::filled(64, 64, 0.5);
        let empty = Mask::empty(64, 64);
        assert!(forge(
            &target,
            &ForgerySpec { kind: ForgeryKind::Inpainting { radius: 1 }, mask: empty },
            None
        )
        .is_err());
        // Mask touching the border.
        let border = Mask::rect(64, 64, 0, 10, 8, 8).unwrap();
        assert!(forge(
            &target,
            &ForgerySpec { kind: ForgeryKind::Inpainting { radius: 1 }, mask: border },
            None
        )
        .is_err());
        // Copy-move source out of bounds.
        let mask = Mask::rect(64, 64, 4, 4, 8, 8).unwrap();
        assert!(forge(
            &target,
            &ForgerySpec { kind: ForgeryKind::CopyMove { dx: 16, dy: 0 }, mask: mask.clone() },
            None
        )
        .is_err());
        // Splicing without a donor, or with a donor of the wrong size.
        assert!(forge(
            &target,
            &ForgerySpec { kind: ForgeryKind::Splicing, mask: mask.clone() },
            None
        )
        .is_err());
        let small_donor = Plane::filled(32, 32, 0.5);
        assert!(forge(
            &target,
            &ForgerySpec { kind: ForgeryKind::Splicing, mask },
            Some(&small_donor)
        )
        .is_err());
    }

    fn small_config(root: PathBuf, seed: u64) -> DatasetConfig {
        DatasetConfig {
            root,
            models: 4,
            devices_per_model: 1,
            images_per_device: 6,
            train_models: 3,
            val_models: 1,
            reference_images: 2,
            forged_images: 3,
            width: 64,
            height: 64,
            prnu_sigma: 0.02,
            amplitude: 0.015,
            noise_sigma: 0.01,
            periods: vec![4, 8],
            quantizations: vec![0.0, 0.02],
            seed,
        }
    }

    #[test]
    fn dataset_build_produces_consistent_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let config = small_config(dir.path().to_path_buf(), 77);
        let manifest = build_dataset(&config).unwrap();
        manifest.validate().unwrap();
        assert_eq!(manifest.records.len(), 4 * 6);
        let count = |role: Role| manifest.records_with_role(role).count();
        assert_eq!(count(Role::Train), 2 * 6, "models 0 and 1 train");
        assert_eq!(count(Role::Validation), 6, "model 2 validates");
        assert_eq!(count(Role::Reference), 2);
        assert_eq!(count(Role::PristineTest), 1);
        assert_eq!(count(Role::ForgedTest), 3);
        for r in &manifest.records {
            assert!(config.root.join(&r.path).exists(), "{} missing", r.path);
            if let Some(m) = &r.mask_path {
                let mask = crate::io::read_mask_pgm(&config.root.join(m)).unwrap();
                assert!(mask.any(), "forged-test mask {m} is empty");
            }
        }
        // Round-trip through the text format.
        let reread = read_manifest(&config.root.join("manifest.txt")).unwrap();
        assert_eq!(render_manifest(&reread), render_manifest(&manifest));
    }

    #[test]
    fn dataset_regeneration_is_byte_identical() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let config_a = small_config(dir_a.path().to_path_buf(), 123);
        let config_b = small_config(dir_b.path().to_path_buf(), 123);
        let manifest_a = build_dataset(&config_a).unwrap();
        build_dataset(&config_b).unwrap();
        for r in &manifest_a.records {
            let a = std::fs::read(dir_a.path().join(&r.path)).unwrap();
            let b = std::fs::read(dir_b.path().join(&r.path)).unwrap();
            assert_eq!(a, b, "{} differs between identical builds", r.path);
        }
        let ma = std::fs::read(dir_a.path().join("manifest.txt")).unwrap();
        let mb = std::fs::read(dir_b.path().join("manifest.txt")).unwrap();
        assert_eq!(ma, mb);
    }

    #[test]
    fn manifest_parser_reports_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.txt");
        std::fs::write(
            &path,
            "noiseprint-dataset 1\nmeta width 64\nrecord a.pgm train zero 0 5\n",
        )
        .unwrap();
        let err = read_manifest(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(":3:"), "error must name line 3: {msg}");
        std::fs::write(&path, "something-else 9\n").unwrap();
        assert!(read_manifest(&path).is_err());
    }

    #[test]
    fn manifest_role_overlap_is_rejected() {
        let records = vec![
            ManifestRecord {
                path: "a.pgm".into(),
                role: Role::Train,
                model_id: 0,
                device_id: 0,
                seed: 1,
                mask_path: None,
            },
            ManifestRecord {
                path: "b.pgm".into(),
                role: Role::Reference,
                model_id: 0,
                device_id: 0,
                seed: 2,
                mask_path: None,
            },
        ];
        let manifest = DatasetManifest { meta: vec![], records };
        let err = manifest.validate().unwrap_err();
        assert!(err.to_string().contains("model 0"), "{err}");
    }

    #[test]
    fn load_role_images_filters_and_orders() {
        let dir = tempfile::tempdir().unwrap();
        let config = small_config(dir.path().to_path_buf(), 55);
        let manifest = build_dataset(&config).unwrap();
        let images = load_role_images(dir.path(), &manifest, &[Role::Train]).unwrap();
        assert_eq!(images.len(), 12);
        assert!(images.iter().all(|(r, p)| {
            r.role == Role::Train && p.width() == 64 && p.height() == 64
        }));
    }
}
