//! Forgery localization by sliding-window comparison.
//!
//! A test image's residual is compared against a camera reference inside
//! overlapping windows; each window yields one suspicion score and every
//! pixel's heat is aggregated from the windows covering it. Both methods
//! share the orientation "higher = more likely forged":
//!
//! - noiseprint: mean squared difference between the test residual and the
//!   reference, per window;
//! - PRNU: negated normalized correlation between the Wiener residual and
//!   the intensity-scaled fingerprint, per window.

use crate::error::{Error, Result};
use crate::fingerprint::{denoise_residual, NoiseprintReference, PrnuReference, WienerConfig};
use crate::io::{path_with_suffix, write_atomic};
use crate::plane::{Mask, Plane};
use rayon::prelude::*;
use std::path::Path;

/// How the scores of the windows covering a pixel combine into its heat.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    /// Average of all covering windows (smooth maps, the default).
    Mean,
    /// Maximum over covering windows (sharper but blockier).
    Max,
}

#[derive(Debug, Clone, Copy)]
pub struct WindowConfig {
    pub window: usize,
    pub stride: usize,
    pub aggregation: Aggregation,
}

impl Default for WindowConfig {
    fn default() -> WindowConfig {
        WindowConfig { window: 64, stride: 8, aggregation: Aggregation::Mean }
    }
}

impl WindowConfig {
    /// Checks the window geometry against a concrete image size.
    pub fn validate_for(&self, width: usize, height: usize) -> Result<()> {
        if self.window == 0 {
            return Err(Error::InvalidArgument("window side must be positive".into()));
        }
        if self.stride == 0 || self.stride > self.window {
            return Err(Error::InvalidArgument(format!(
                "stride must lie in 1..={}, got {}",
                self.window, self.stride
            )));
        }
        if self.window > width.min(height) {
            return Err(Error::InvalidArgument(format!(
                "window {} exceeds the {width}x{height} image",
                self.window
            )));
        }
        Ok(())
    }
}

/// Window origins along one axis: multiples of the stride, plus a final
/// origin flush with the far edge so every pixel is covered.
pub fn window_origins(dim: usize, window: usize, stride: usize) -> Vec<usize> {
    let last = dim - window;
    let mut origins: Vec<usize> = (0..=last).step_by(stride).collect();
    if *origins.last().expect("0 is always an origin") != last {
        origins.push(last);
    }
    origins
}

/// Summed-area table with an extra zero row/column, so any rectangle sum
/// is four lookups.
struct Sat {
    width: usize,
    data: Vec<f64>,
}

impl Sat {
    fn build(width: usize, height: usize, value: impl Fn(usize, usize) -> f64) -> Sat {
        let w1 = width + 1;
        let mut data = vec![0.0f64; w1 * (height + 1)];
        for y in 0..height {
            let mut row_sum = 0.0f64;
            for x in 0..width {
                row_sum += value(x, y);
                data[(y + 1) * w1 + (x + 1)] = data[y * w1 + (x + 1)] + row_sum;
            }
        }
        Sat { width: w1, data }
    }

    /// Sum over the half-open rectangle [x0, x1) × [y0, y1).
    fn rect(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> f64 {
        let w1 = self.width;
        self.data[y1 * w1 + x1] + self.data[y0 * w1 + x0]
            - self.data[y0 * w1 + x1]
            - self.data[y1 * w1 + x0]
    }
}

/// Runs the scoring function over every window position and folds the
/// window scores into per-pixel heat. Scores are computed in parallel per
/// window row; aggregation walks windows in a fixed order.
fn aggregate_windows(
    width: usize,
    height: usize,
    cfg: &WindowConfig,
    score: impl Fn(usize, usize) -> f64 + Sync,
) -> Plane {
    let xs = window_origins(width, cfg.window, cfg.stride);
    let ys = window_origins(height, cfg.window, cfg.stride);
    let rows: Vec<Vec<f64>> = ys
        .par_iter()
        .map(|&y0| xs.iter().map(|&x0| score(x0, y0)).collect())
        .collect();
    let mut out = Plane::zeros(width, height);
    match cfg.aggregation {
        Aggregation::Mean => {
            let mut sum = vec![0.0f64; width * height];
            let mut count = vec![0u32; width * height];
            for (yi, &y0) in ys.iter().enumerate() {
                for (xi, &x0) in xs.iter().enumerate() {
                    let s = rows[yi][xi];
                    for y in y0..y0 + cfg.window {
                        let base = y * width;
                        for x in x0..x0 + cfg.window {
                            sum[base + x] += s;
                            count[base + x] += 1;
                        }
                    }
                }
            }
            for (o, (s, c)) in out.data_mut().iter_mut().zip(sum.iter().zip(&count)) {
                debug_assert!(*c > 0, "window origins must cover every pixel");
                *o = (*s / *c as f64) as f32;
            }
        }
        Aggregation::Max => {
            let mut best = vec![f64::NEG_INFINITY; width * height];
            for (yi, &y0) in ys.iter().enumerate() {
                for (xi, &x0) in xs.iter().enumerate() {
                    let s = rows[yi][xi];
                    for y in y0..y0 + cfg.window {
                        let base = y * width;
                        for x in x0..x0 + cfg.window {
                            if s > best[base + x] {
                                best[base + x] = s;
                            }
                        }
                    }
                }
            }
            for (o, b) in out.data_mut().iter_mut().zip(&best) {
                debug_assert!(b.is_finite(), "window origins must cover every pixel");
                *o = *b as f32;
            }
        }
    }
    out
}

/// Noiseprint suspicion map: per window, the mean squared difference
/// between the test residual and the reference.
pub fn noiseprint_heatmap(
    residual: &Plane,
    reference: &NoiseprintReference,
    cfg: &WindowConfig,
) -> Result<Plane> {
    let (w, h) = (residual.width(), residual.height());
    let r = &reference.mean_residual;
    if r.width() != w || r.height() != h {
        return Err(Error::shape(
            "noiseprint_heatmap",
            format!("reference {}x{}", r.width(), r.height()),
            format!("residual {w}x{h}"),
        ));
    }
    cfg.validate_for(w, h)?;
    let sat = Sat::build(w, h, |x, y| {
        let d = residual.get(x, y) as f64 - r.get(x, y) as f64;
        d * d
    });
    let area = (cfg.window * cfg.window) as f64;
    Ok(aggregate_windows(w, h, cfg, |x0, y0| {
        sat.rect(x0, y0, x0 + cfg.window, y0 + cfg.window) / area
    }))
}

/// PRNU suspicion map: per window, the negated normalized correlation
/// between the test image's Wiener residual and intensity × fingerprint.
/// Windows with zero variance on either side score 0 (no evidence either
/// way). The Wiener settings must match the ones the reference was built
/// with.
pub fn prnu_heatmap(
    image: &Plane,
    reference: &PrnuReference,
    wiener: &WienerConfig,
    cfg: &WindowConfig,
) -> Result<Plane> {
    if wiener.id() != reference.denoiser_id {
        return Err(Error::InvalidArgument(format!(
            "reference was built with denoiser {}, but {} was supplied",
            reference.denoiser_id,
            wiener.id()
        )));
    }
    let (w, h) = (image.width(), image.height());
    let k = &reference.k_map;
    if k.width() != w || k.height() != h {
        return Err(Error::shape(
            "prnu_heatmap",
            format!("reference {}x{}", k.width(), k.height()),
            format!("image {w}x{h}"),
        ));
    }
    cfg.validate_for(w, h)?;
    let residual = denoise_residual(image, wiener);
    // Expected fingerprint presence: the PRNU is multiplicative, so the
    // residual should resemble I·K̂ where the device matches.
    let expected = {
        let mut t = Plane::zeros(w, h);
        for (o, (iv, kv)) in t.data_mut().iter_mut().zip(image.data().iter().zip(k.data())) {
            *o = iv * kv;
        }
        t
    };
    let s_w = Sat::build(w, h, |x, y| residual.get(x, y) as f64);
    let s_t = Sat::build(w, h, |x, y| expected.get(x, y) as f64);
    let s_ww = Sat::build(w, h, |x, y| (residual.get(x, y) as f64).powi(2));
    let s_tt = Sat::build(w, h, |x, y| (expected.get(x, y) as f64).powi(2));
    let s_wt = Sat::build(w, h, |x, y| residual.get(x, y) as f64 * expected.get(x, y) as f64);
    let n = (cfg.window * cfg.window) as f64;
    Ok(aggregate_windows(w, h, cfg, |x0, y0| {
        let (x1, y1) = (x0 + cfg.window, y0 + cfg.window);
        let sw = s_w.rect(x0, y0, x1, y1);
        let st = s_t.rect(x0, y0, x1, y1);
        let var_w = n * s_ww.rect(x0, y0, x1, y1) - sw * sw;
        let var_t = n * s_tt.rect(x0, y0, x1, y1) - st * st;
        if var_w <= 0.0 || var_t <= 0.0 {
            return 0.0;
        }
        let cov = n * s_wt.rect(x0, y0, x1, y1) - sw * st;
        -(cov / (var_w * var_t).sqrt())
    }))
}

/// Binary decision map: a pixel is marked forged iff its heat strictly
/// exceeds the threshold.
pub fn threshold(heatmap: &Plane, tau: f32) -> Mask {
    let mut mask = Mask::empty(heatmap.width(), heatmap.height());
    for y in 0..heatmap.height() {
        for x in 0..heatmap.width() {
            if heatmap.get(x, y) > tau {
                mask.set(x, y, true);
            }
        }
    }
    mask
}

/// Blue→cyan→yellow→red colormap for heat renderings; t is clamped to
/// [0, 1].
pub fn heat_colormap(t: f32) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let lerp = |a: f32, b: f32, u: f32| (a + (b - a) * u).round() as u8;
    if t < 1.0 / 3.0 {
        let u = t * 3.0;
        [0, lerp(0.0, 255.0, u), 255]
    } else if t < 2.0 / 3.0 {
        let u = (t - 1.0 / 3.0) * 3.0;
        [lerp(0.0, 255.0, u), 255, lerp(255.0, 0.0, u)]
    } else {
        let u = (t - 2.0 / 3.0) * 3.0;
        [255, lerp(255.0, 0.0, u), 0]
    }
}

/// The normalization actually used for a rendering, recorded in the
/// `.bounds` sidecar so different renderings can be compared.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderedBounds {
    pub lo: f32,
    pub hi: f32,
    /// True when the heatmap had no dynamic range and was rendered as a
    /// uniform mid-color.
    pub constant: bool,
}

/// Renders a heatmap to a PNG, min-max normalized onto the colormap.
/// Passing `shared_bounds` pins the normalization so several renderings
/// are directly comparable; values outside the bounds saturate.
pub fn render_heatmap_png(
    heatmap: &Plane,
    path: &Path,
    shared_bounds: Option<(f32, f32)>,
) -> Result<RenderedBounds> {
    if !heatmap.is_finite() {
        return Err(Error::NonFinite("heatmap contains non-finite values".into()));
    }
    if heatmap.is_empty() {
        return Err(Error::InvalidArgument("cannot render an empty heatmap".into()));
    }
    let (lo, hi) = match shared_bounds {
        Some((lo, hi)) if lo <= hi => (lo, hi),
        Some((lo, hi)) => {
            return Err(Error::InvalidArgument(format!(
                "render bounds are inverted: [{lo}, {hi}]"
            )))
        }
        None => heatmap.min_max(),
    };
    let constant = lo >= hi;
    if constant {
        eprintln!(
            "warning: heatmap for {} has no dynamic range; rendering a uniform mid-color",
            path.display()
        );
    }
    let (w, h) = (heatmap.width() as u32, heatmap.height() as u32);
    // Scores are quantized onto a 256-level palette so a rendering can be
    // read back as ranks.
    let img = image::RgbImage::from_fn(w, h, |x, y| {
        let v = heatmap.get(x as usize, y as usize);
        let t = if constant { 0.5 } else { (v - lo) / (hi - lo) };
        let level = (t.clamp(0.0, 1.0) * 255.0).round();
        image::Rgb(heat_colormap(level / 255.0))
    });
    let mut bytes = Vec::new();
    image::DynamicImage::ImageRgb8(img)
        .write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::InvalidArgument(format!("PNG encoding failed: {e}")))?;
    write_atomic(path, &bytes)?;
    let sidecar = format!("heatmap-bounds 1\nmin {lo}\nmax {hi}\n");
    write_atomic(&path_with_suffix(path, ".bounds"), sidecar.as_bytes())?;
    Ok(RenderedBounds { lo, hi, constant })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fingerprint::{estimate_noiseprint_reference, zero_mean_rows_cols};
    use crate::net::{NetConfig, NoiseprintNet};
    use crate::simulate::{
        acquire, derived_rng, forge, render_scene, CameraModelSpec, DeviceSpec, ForgeryKind,
        ForgerySpec,
    };
    use rand::Rng;

    fn reference_of(plane: Plane) -> NoiseprintReference {
        NoiseprintReference {
            mean_residual: plane,
            n_images: 1,
            extractor_id: "test".into(),
            source: String::new(),
        }
    }

    /// Same hand-wired Laplacian extractor used by the fingerprint tests:
    /// the network computes an exact high-pass, so localization behavior
    /// can be checked without training.
    fn highpass_net() -> NoiseprintNet {
        let config = NetConfig { depth: 2, channels: 2, kernel: 3 };
        let mut net = NoiseprintNet::he_init(config, &mut derived_rng(0, &[])).unwrap();
        let laplacian = [
            -0.125f32, -0.125, -0.125, //
            -0.125, 1.0, -0.125, //
            -0.125, -0.125, -0.125,
        ];
        let mut params = net.params_mut();
        for p in params.iter_mut() {
            for v in p.data_mut() {
                *v = 0.0;
            }
        }
        for (i, l) in laplacian.iter().enumerate() {
            params[0].data_mut()[i] = *l;
            params[0].data_mut()[9 + i] = -*l;
        }
        params[2].data_mut()[(0 * 3 + 1) * 3 + 1] = 1.0;
        params[2].data_mut()[(1 * 3 + 1) * 3 + 1] = -1.0;
        drop(params);
        net
    }

    fn device(model_id: usize, model_seed: u64, period: usize, amplitude: f32, prnu: f32) -> DeviceSpec {
        DeviceSpec {
            device_id: 0,
            model: CameraModelSpec {
                model_id,
                period,
                amplitude,
                quantization: 0.0,
                seed: model_seed,
            },
            prnu_sigma: prnu,
            seed: model_seed ^ 0xABCD,
        }
    }

    fn small_cfg(window: usize, stride: usize) -> WindowConfig {
        WindowConfig { window, stride, aggregation: Aggregation::Mean }
    }

    #[test]
    fn identical_residual_scores_zero_everywhere() {
        let residual = render_scene(&mut derived_rng(1, &[]), 96, 96).unwrap();
        let reference = reference_of(residual.clone());
        let heat = noiseprint_heatmap(&residual, &reference, &small_cfg(32, 8)).unwrap();
        for v in heat.data() {
            assert_eq!(*v, 0.0, "matching residual must give exactly zero heat");
        }
    }

    #[test]
    fn constant_offset_scores_its_square() {
        let c = 0.3f32;
        let residual = Plane::filled(96, 96, c);
        let reference = reference_of(Plane::zeros(96, 96));
        let heat = noiseprint_heatmap(&residual, &reference, &small_cfg(32, 8)).unwrap();
        for v in heat.data() {
            // The window scores are exact in f64; only the final f32 cast
            // rounds.
            assert!(
                ((*v as f64) - (c as f64).powi(2)).abs() < 1e-6,
                "constant offset c should heat to c² = {}, got {v}",
                c * c
            );
        }
    }

    #[test]
    fn window_geometry_is_validated() {
        let residual = Plane::zeros(64, 64);
        let reference = reference_of(Plane::zeros(64, 64));
        for bad in [
            small_cfg(0, 1),
            small_cfg(32, 0),
            small_cfg(32, 33),
            small_cfg(128, 8),
        ] {
            assert!(
                noiseprint_heatmap(&residual, &reference, &bad).is_err(),
                "geometry {bad:?} must be rejected"
            );
        }
        let mismatched = reference_of(Plane::zeros(32, 64));
        let err = noiseprint_heatmap(&residual, &mismatched, &small_cfg(16, 8)).unwrap_err();
        assert!(err.to_string().contains("32x64"), "error names both sizes: {err}");
    }

    #[test]
    fn window_origins_cover_the_axis() {
        for (dim, window, stride) in
            [(64usize, 64usize, 8usize), (64, 32, 8), (65, 32, 8), (100, 33, 7), (64, 32, 32)]
        {
            let origins = window_origins(dim, window, stride);
            assert_eq!(origins[0], 0);
            assert_eq!(*origins.last().unwrap() + window, dim, "last window is flush");
            for pair in origins.windows(2) {
                assert!(pair[0] < pair[1], "origins are strictly increasing");
                assert!(pair[1] - pair[0] <= stride, "no gaps wider than the stride");
            }
        }
    }

    #[test]
    fn spliced_regions_heat_up_against_the_reference() {
        // Donor and target models have different artifact patterns, so the
        // high-pass residual inside the spliced region disagrees with the
        // target model's reference.
        let net = highpass_net();
        let target = device(0, 51, 4, 0.04, 0.0);
        let donor = device(1, 52, 4, 0.04, 0.0);
        let reference_stack: Vec<Plane> = (0..20)
            .map(|i| {
                let scene = render_scene(&mut derived_rng(2000 + i, &[]), 128, 128).unwrap();
                acquire(&scene, &target, 0.01, 2100 + i).unwrap()
            })
            .collect();
        let reference = estimate_noiseprint_reference(&reference_stack, &net).unwrap();
        let cfg = small_cfg(32, 8);
        let mut hotter = 0usize;
        let total = 50usize;
        for t in 0..total {
            let seed = 3000 + t as u64;
            let scene = render_scene(&mut derived_rng(seed, &[]), 128, 128).unwrap();
            let pristine = acquire(&scene, &target, 0.01, seed ^ 0xF).unwrap();
            let donor_scene = render_scene(&mut derived_rng(seed, &[1]), 128, 128).unwrap();
            let donor_img = acquire(&donor_scene, &donor, 0.01, seed ^ 0xF0).unwrap();
            let mut rng = derived_rng(seed, &[2]);
            let mx = rng.gen_range(12..60);
            let my = rng.gen_range(12..60);
            let mask = crate::plane::Mask::rect(128, 128, mx, my, 40, 40).unwrap();
            let (forged, mask) = forge(
                &pristine,
                &ForgerySpec { kind: ForgeryKind::Splicing, mask },
                Some(&donor_img),
            )
            .unwrap();
            let residual = net.extract_residual(&forged).unwrap();
            let heat = noiseprint_heatmap(&residual, &reference, &cfg).unwrap();
            let mut inside = (0.0f64, 0usize);
            let mut outside = (0.0f64, 0usize);
            for y in 0..128 {
                for x in 0..128 {
                    let v = heat.get(x, y) as f64;
                    if mask.get(x, y) {
                        inside = (inside.0 + v, inside.1 + 1);
                    } else {
                        outside = (outside.0 + v, outside.1 + 1);
                    }
                }
            }
            if inside.0 / inside.1 as f64 > outside.0 / outside.1 as f64 {
                hotter += 1;
            }
        }
        assert!(
            hotter * 10 >= total * 9,
            "forged region must be hotter on at least 90% of images, got {hotter}/{total}"
        );
    }

    #[test]
    fn inpainted_windows_lose_the_prnu_correlation() {
        let wiener = WienerConfig::default();
        let dev = device(0, 61, 4, 0.0, 0.02);
        let mut k = dev.prnu_map(128, 128);
        zero_mean_rows_cols(&mut k);
        let reference = PrnuReference {
            k_map: k,
            n_images: 1,
            denoiser_id: wiener.id(),
            source: String::new(),
        };
        let scene = Plane::filled(128, 128, 0.5);
        let pristine = acquire(&scene, &dev, 0.01, 77).unwrap();
        let mask = Mask::rect(128, 128, 32, 32, 64, 64).unwrap();
        let (forged, _) = forge(
            &pristine,
            &ForgerySpec { kind: ForgeryKind::Inpainting { radius: 2 }, mask },
            None,
        )
        .unwrap();
        let cfg = small_cfg(32, 8);
        let heat = prnu_heatmap(&forged, &reference, &wiener, &cfg).unwrap();
        // Deep inside the inpainted region every covering window is fully
        // inpainted: correlation should be statistically zero, bounded by
        // 3/window. Far outside, the fingerprint is present and the heat
        // (negated correlation) goes clearly negative.
        let center = heat.get(64, 64) as f64;
        assert!(
            center.abs() < 3.0 / 32.0,
            "inpainted window correlation should be near zero, heat = {center}"
        );
        let pristine_heat = prnu_heatmap(&pristine, &reference, &wiener, &cfg).unwrap();
        let corner = pristine_heat.get(8, 8) as f64;
        assert!(
            corner < -0.3,
            "matching device should correlate strongly, heat = {corner}"
        );
        assert!(
            center > corner + 0.2,
            "losing the fingerprint must raise suspicion: {center} vs {corner}"
        );
    }

    #[test]
    fn constant_image_heats_to_zero_via_the_variance_rule() {
        let wiener = WienerConfig::default();
        let dev = device(0, 62, 4, 0.0, 0.02);
        let mut k = dev.prnu_map(64, 64);
        zero_mean_rows_cols(&mut k);
        let reference = PrnuReference {
            k_map: k,
            n_images: 1,
            denoiser_id: wiener.id(),
            source: String::new(),
        };
        let heat =
            prnu_heatmap(&Plane::filled(64, 64, 0.42), &reference, &wiener, &small_cfg(32, 8))
                .unwrap();
        for v in heat.data() {
            assert_eq!(*v, 0.0, "zero-variance windows must contribute exactly 0");
        }
    }

    #[test]
    fn mismatched_denoiser_is_rejected() {
        let reference = PrnuReference {
            k_map: Plane::zeros(64, 64),
            n_images: 2,
            denoiser_id: "wiener5x5/1.0e-4".into(),
            source: String::new(),
        };
        let err = prnu_heatmap(
            &Plane::filled(64, 64, 0.5),
            &reference,
            &WienerConfig::default(),
            &small_cfg(32, 8),
        )
        .unwrap_err();
        assert!(err.to_string().contains("wiener5x5"), "error names the mismatch: {err}");
    }

    #[test]
    fn threshold_honors_strict_inequality() {
        let mut heat = Plane::zeros(64, 64);
        for (i, v) in heat.data_mut().iter_mut().enumerate() {
            *v = (i % 7) as f32;
        }
        let all = threshold(&heat, f32::NEG_INFINITY);
        assert_eq!(all.count_set(), 64 * 64, "τ = −∞ marks everything");
        let none = threshold(&heat, f32::INFINITY);
        assert_eq!(none.count_set(), 0, "τ = +∞ marks nothing");
        let (_, max) = heat.min_max();
        let at_max = threshold(&heat, max);
        assert_eq!(at_max.count_set(), 0, "τ = max is empty under strict >");
        let below_max = threshold(&heat, max - 0.5);
        assert!(below_max.count_set() > 0);
    }

    #[test]
    fn max_aggregation_dominates_mean() {
        let residual = render_scene(&mut derived_rng(70, &[]), 96, 96).unwrap();
        let reference = reference_of(render_scene(&mut derived_rng(71, &[]), 96, 96).unwrap());
        let mean_cfg = WindowConfig { window: 32, stride: 8, aggregation: Aggregation::Mean };
        let max_cfg = WindowConfig { window: 32, stride: 8, aggregation: Aggregation::Max };
        let mean_heat = noiseprint_heatmap(&residual, &reference, &mean_cfg).unwrap();
        let max_heat = noiseprint_heatmap(&residual, &reference, &max_cfg).unwrap();
        for (m, x) in mean_heat.data().iter().zip(max_heat.data()) {
            assert!(x >= m, "max aggregation can never fall below the mean: {x} < {m}");
        }
        // With a single window the two rules coincide.
        let single = WindowConfig { window: 96, stride: 96, aggregation: Aggregation::Mean };
        let single_max = WindowConfig { window: 96, stride: 96, aggregation: Aggregation::Max };
        let a = noiseprint_heatmap(&residual, &reference, &single).unwrap();
        let b = noiseprint_heatmap(&residual, &reference, &single_max).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn distance_is_symmetric_in_residual_and_reference() {
        let a = render_scene(&mut derived_rng(80, &[]), 64, 64).unwrap();
        let b = render_scene(&mut derived_rng(81, &[]), 64, 64).unwrap();
        let ab = noiseprint_heatmap(&a, &reference_of(b.clone()), &small_cfg(16, 4)).unwrap();
        let ba = noiseprint_heatmap(&b, &reference_of(a), &small_cfg(16, 4)).unwrap();
        for (x, y) in ab.data().iter().zip(ba.data()) {
            assert_eq!(x.to_bits(), y.to_bits(), "squared distance is symmetric");
        }
    }

    #[test]
    fn stride_one_and_eight_agree_on_the_hot_region() {
        let net = highpass_net();
        let target = device(0, 90, 4, 0.04, 0.0);
        let donor = device(1, 91, 4, 0.04, 0.0);
        let scene = render_scene(&mut derived_rng(92, &[]), 96, 96).unwrap();
        let pristine = acquire(&scene, &target, 0.01, 93).unwrap();
        let donor_scene = render_scene(&mut derived_rng(94, &[]), 96, 96).unwrap();
        let donor_img = acquire(&donor_scene, &donor, 0.01, 95).unwrap();
        let mask = Mask::rect(96, 96, 30, 30, 36, 36).unwrap();
        let (forged, mask) = forge(
            &pristine,
            &ForgerySpec { kind: ForgeryKind::Splicing, mask },
            Some(&donor_img),
        )
        .unwrap();
        let ref_stack: Vec<Plane> = (0..10)
            .map(|i| {
                let s = render_scene(&mut derived_rng(960 + i, &[]), 96, 96).unwrap();
                acquire(&s, &target, 0.01, 970 + i).unwrap()
            })
            .collect();
        let reference = estimate_noiseprint_reference(&ref_stack, &net).unwrap();
        let residual = net.extract_residual(&forged).unwrap();
        for stride in [1usize, 8] {
            let heat = noiseprint_heatmap(&residual, &reference, &small_cfg(32, stride)).unwrap();
            let mut inside = (0.0f64, 0usize);
            let mut outside = (0.0f64, 0usize);
            for y in 0..96 {
                for x in 0..96 {
                    let v = heat.get(x, y) as f64;
                    if mask.get(x, y) {
                        inside = (inside.0 + v, inside.1 + 1);
                    } else {
                        outside = (outside.0 + v, outside.1 + 1);
                    }
                }
            }
            assert!(
                inside.0 / inside.1 as f64 > outside.0 / outside.1 as f64,
                "stride {stride}: forged region must stay the hotter one"
            );
        }
    }

    #[test]
    fn renderings_round_trip_and_flag_constants() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("heat.png");
        let heat = render_scene(&mut derived_rng(100, &[]), 80, 64).unwrap();
        let bounds = render_heatmap_png(&heat, &path, None).unwrap();
        assert!(!bounds.constant);
        let decoded = image::open(&path).unwrap().to_rgb8();
        assert_eq!(decoded.width(), 80);
        assert_eq!(decoded.height(), 64);
        let sidecar = std::fs::read_to_string(path_with_suffix(&path, ".bounds")).unwrap();
        assert!(sidecar.starts_with("heatmap-bounds 1\n"), "{sidecar}");
        assert!(sidecar.contains("min "), "{sidecar}");

        let flat_path = dir.path().join("flat.png");
        let flat = Plane::filled(32, 32, 1.25);
        let bounds = render_heatmap_png(&flat, &flat_path, None).unwrap();
        assert!(bounds.constant, "constant heatmaps are flagged");
        let decoded = image::open(&flat_path).unwrap().to_rgb8();
        let mid = heat_colormap((0.5f32 * 255.0).round() / 255.0);
        for px in decoded.pixels() {
            assert_eq!(px.0, mid, "constant heatmap renders the mid-color");
        }

        let mut bad = Plane::zeros(8, 8);
        bad.data_mut()[3] = f32::NAN;
        assert!(render_heatmap_png(&bad, &path, None).is_err(), "non-finite rejected");
    }

    #[test]
    fn shared_bounds_preserve_score_order_across_renderings() {
        let dir = tempfile::tempdir().unwrap();
        let h1 = render_scene(&mut derived_rng(110, &[]), 64, 64).unwrap();
        let mut h2 = render_scene(&mut derived_rng(111, &[]), 64, 64).unwrap();
        for v in h2.data_mut() {
            *v = *v * 0.6 + 0.1;
        }
        let lo = h1.min_max().0.min(h2.min_max().0);
        let hi = h1.min_max().1.max(h2.min_max().1);
        let p1 = dir.path().join("h1.png");
        let p2 = dir.path().join("h2.png");
        render_heatmap_png(&h1, &p1, Some((lo, hi))).unwrap();
        render_heatmap_png(&h2, &p2, Some((lo, hi))).unwrap();
        let d1 = image::open(&p1).unwrap().to_rgb8();
        let d2 = image::open(&p2).unwrap().to_rgb8();
        // Invert the colormap by exact lookup into its 256-level table.
        let table: Vec<[u8; 3]> = (0..=255u32).map(|i| heat_colormap(i as f32 / 255.0)).collect();
        let level = |px: [u8; 3]| -> usize {
            table.iter().position(|c| *c == px).expect("every rendered color is in the table")
        };
        let mut rng = derived_rng(112, &[]);
        for _ in 0..500 {
            let (x1, y1) = (rng.gen_range(0..64u32), rng.gen_range(0..64u32));
            let (x2, y2) = (rng.gen_range(0..64u32), rng.gen_range(0..64u32));
            let s1 = h1.get(x1 as usize, y1 as usize);
            let s2 = h2.get(x2 as usize, y2 as usize);
            let l1 = level(d1.get_pixel(x1, y1).0) as isize;
            let l2 = level(d2.get_pixel(x2, y2).0) as isize;
            if s1 < s2 {
                assert!(
                    l1 <= l2 + 1,
                    "score order broken: {s1} < {s2} but levels {l1} > {l2}"
                );
            } else if s2 < s1 {
                assert!(l2 <= l1 + 1, "score order broken: {s2} < {s1} but levels {l2} > {l1}");
            }
        }
    }

    #[test]
    fn rendering_levels_quantize_the_normalized_score() {
        // The colormap table must be usable as an inverse: collisions would
        // break rank comparisons, so neighboring levels must differ.
        let table: Vec<[u8; 3]> = (0..=255u32).map(|i| heat_colormap(i as f32 / 255.0)).collect();
        for pair in table.windows(2) {
            assert_ne!(pair[0], pair[1], "palette levels must be distinguishable");
        }
    }
}
