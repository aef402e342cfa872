//! Pixel-level metrics and the benchmark harness.
//!
//! Scores from all test images are pooled into one population of labeled
//! pixels; the ROC is swept over every distinct score (no binning), and
//! AUC is the trapezoidal area (equal to the Mann–Whitney pair statistic
//! with ½ credit for ties). F1 is always computed per image and averaged:
//! the "global" variant maximizes that average over one threshold shared
//! by all images, the "oracle" variant grants each image its own best
//! threshold, so oracle ≥ global by construction. `run_benchmark` drives
//! the whole comparison grid of (method, reference-count) cells over a
//! simulated dataset.

use crate::error::{Error, Result};
use crate::fingerprint::{
    estimate_prnu, reference_from_residuals, PrnuReference, WienerConfig,
};
use crate::io::{read_mask_pgm, read_pgm, write_atomic};
use crate::localize::{noiseprint_heatmap, prnu_heatmap, Aggregation, WindowConfig};
use crate::net::NoiseprintNet;
use crate::plane::{Mask, Plane};
use crate::simulate::{render_manifest, DatasetManifest, Role};
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use std::path::Path;

/// One point of a threshold sweep: the false/true positive rates of the
/// decision rule "score > threshold".
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// Threshold sweep over pooled pixel scores, ordered from the strictest
/// threshold (0, 0) to the all-positive end (1, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

impl RocCurve {
    /// Checks the structural invariants: endpoints present, rates within
    /// [0, 1] and non-decreasing as the threshold drops.
    pub fn validate(&self) -> Result<()> {
        let first = self
            .points
            .first()
            .ok_or_else(|| Error::InvalidArgument("ROC curve has no points".into()))?;
        let last = self.points.last().expect("nonempty by the check above");
        if first.fpr != 0.0 || first.tpr != 0.0 {
            return Err(Error::InvalidArgument(format!(
                "ROC must start at (0, 0), starts at ({}, {})",
                first.fpr, first.tpr
            )));
        }
        if last.fpr != 1.0 || last.tpr != 1.0 {
            return Err(Error::InvalidArgument(format!(
                "ROC must end at (1, 1), ends at ({}, {})",
                last.fpr, last.tpr
            )));
        }
        for pair in self.points.windows(2) {
            if pair[1].threshold >= pair[0].threshold {
                return Err(Error::InvalidArgument(format!(
                    "thresholds must strictly decrease, got {} then {}",
                    pair[0].threshold, pair[1].threshold
                )));
            }
            if pair[1].fpr < pair[0].fpr || pair[1].tpr < pair[0].tpr {
                return Err(Error::InvalidArgument(
                    "rates must be non-decreasing as the threshold drops".into(),
                ));
            }
        }
        for p in &self.points {
            if !(0.0..=1.0).contains(&p.fpr) || !(0.0..=1.0).contains(&p.tpr) {
                return Err(Error::InvalidArgument(format!(
                    "rates must lie in [0, 1], got ({}, {})",
                    p.fpr, p.tpr
                )));
            }
        }
        Ok(())
    }

    /// Evenly thins the curve to at most `max_points`, always keeping both
    /// endpoints. Metrics are never computed on a decimated curve; this
    /// exists so reports stay a readable size.
    pub fn decimated(&self, max_points: usize) -> RocCurve {
        let n = self.points.len();
        if n <= max_points || max_points < 2 {
            return self.clone();
        }
        let mut points = Vec::with_capacity(max_points);
        for i in 0..max_points {
            let idx = i * (n - 1) / (max_points - 1);
            points.push(self.points[idx]);
        }
        points.dedup_by(|a, b| a.threshold == b.threshold);
        RocCurve { points }
    }
}

/// Flattens (heatmap, mask) pairs into one labeled score pool.
fn pool_scores(heatmaps: &[Plane], masks: &[Mask]) -> Result<(Vec<f32>, Vec<bool>)> {
    if heatmaps.len() != masks.len() {
        return Err(Error::InvalidArgument(format!(
            "{} heatmaps paired with {} masks",
            heatmaps.len(),
            masks.len()
        )));
    }
    if heatmaps.is_empty() {
        return Err(Error::InvalidArgument("no heatmaps to evaluate".into()));
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (i, (h, m)) in heatmaps.iter().zip(masks).enumerate() {
        if h.width() != m.width() || h.height() != m.height() {
            return Err(Error::shape(
                "pooled scores",
                format!("mask {}x{}", m.width(), m.height()),
                format!("heatmap {}x{} (image {i})", h.width(), h.height()),
            ));
        }
        if !h.is_finite() {
            return Err(Error::NonFinite(format!(
                "heatmap {i} contains non-finite scores"
            )));
        }
        for y in 0..h.height() {
            for x in 0..h.width() {
                scores.push(h.get(x, y));
                labels.push(m.get(x, y));
            }
        }
    }
    Ok((scores, labels))
}

/// Indices into `scores` sorted by descending score.
fn descending_order(scores: &[f32]) -> Vec<u32> {
    let mut order: Vec<u32> = (0..scores.len() as u32).collect();
    order.sort_unstable_by(|&a, &b| {
        scores[b as usize].partial_cmp(&scores[a as usize]).expect("scores are finite")
    });
    order
}

fn roc_from_pool(scores: &[f32], labels: &[bool]) -> Result<RocCurve> {
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Infeasible(format!(
            "ROC needs both classes; pool has {positives} forged and {negatives} pristine pixels"
        )));
    }
    let order = descending_order(scores);
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0usize;
    while i < order.len() {
        let value = scores[order[i] as usize];
        // The rule "score > value" classifies exactly the pixels of the
        // previous (strictly greater) runs as forged.
        points.push(RocPoint {
            threshold: value as f64,
            fpr: fp as f64 / negatives as f64,
            tpr: tp as f64 / positives as f64,
        });
        while i < order.len() && scores[order[i] as usize] == value {
            if labels[order[i] as usize] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
    }
    points.push(RocPoint { threshold: f64::NEG_INFINITY, fpr: 1.0, tpr: 1.0 });
    Ok(RocCurve { points })
}

/// Threshold sweep over every distinct pooled score value; exact counts,
/// no binning. Rejects pools that are entirely forged or entirely
/// pristine.
pub fn pooled_roc(heatmaps: &[Plane], masks: &[Mask]) -> Result<RocCurve> {
    let (scores, labels) = pool_scores(heatmaps, masks)?;
    roc_from_pool(&scores, &labels)
}

/// Trapezoidal area under the curve. For a curve built by `pooled_roc`
/// this equals the Mann–Whitney statistic P(forged > pristine) + ½
/// P(tie).
pub fn auc(roc: &RocCurve) -> f64 {
    let mut area = 0.0f64;
    for pair in roc.points.windows(2) {
        area += (pair[1].fpr - pair[0].fpr) * (pair[1].tpr + pair[0].tpr) * 0.5;
    }
    area
}

fn f1_from_counts(tp: u64, fp: u64, positives: u64) -> f64 {
    let fn_ = positives - tp;
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Best F1 over the threshold sweep of one score pool, with the smallest
/// optimal threshold returned on ties.
fn sweep_best_f1(scores: &[f32], labels: &[bool]) -> (f64, f64) {
    let positives = labels.iter().filter(|&&l| l).count() as u64;
    let order = descending_order(scores);
    let (mut tp, mut fp) = (0u64, 0u64);
    let (mut best_f1, mut best_tau) = (f64::NEG_INFINITY, f64::INFINITY);
    let mut i = 0usize;
    while i < order.len() {
        let value = scores[order[i] as usize];
        let f1 = f1_from_counts(tp, fp, positives);
        // `>=` walks toward smaller thresholds, so ties settle on the
        // smallest optimum.
        if f1 >= best_f1 {
            best_f1 = f1;
            best_tau = value as f64;
        }
        while i < order.len() && scores[order[i] as usize] == value {
            if labels[order[i] as usize] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
    }
    let all_positive = f1_from_counts(tp, fp, positives);
    if all_positive >= best_f1 {
        best_f1 = all_positive;
        best_tau = f64::NEG_INFINITY;
    }
    (best_f1, best_tau)
}

/// F1 at the best single threshold shared by every image. A threshold is
/// scored by the mean over images of the per-image F1 of the rule
/// "score > threshold", which keeps the value on the same scale as
/// [`f1_oracle`] (and never above it, since the oracle relaxes the shared
/// threshold to a per-image one). Returns (F1, threshold); ties settle on
/// the smallest optimal threshold.
pub fn f1_best_global(heatmaps: &[Plane], masks: &[Mask]) -> Result<(f64, f64)> {
    let (scores, labels) = pool_scores(heatmaps, masks)?;
    if !labels.iter().any(|&l| l) {
        return Err(Error::Infeasible(
            "F1 needs at least one forged pixel in the pool".into(),
        ));
    }
    let n_images = heatmaps.len();
    let mut image_of: Vec<u32> = Vec::with_capacity(scores.len());
    for (i, h) in heatmaps.iter().enumerate() {
        image_of.extend(std::iter::repeat(i as u32).take(h.len()));
    }
    let positives: Vec<u64> = masks.iter().map(|m| m.count_set() as u64).collect();
    let order = descending_order(&scores);
    let mut tp = vec![0u64; n_images];
    let mut fp = vec![0u64; n_images];
    let mut f1 = vec![0.0f64; n_images];
    let mean_of = |f1: &[f64]| f1.iter().sum::<f64>() / n_images as f64;
    let (mut best, mut best_tau) = (f64::NEG_INFINITY, f64::INFINITY);
    let mut i = 0usize;
    while i < order.len() {
        let value = scores[order[i] as usize];
        let mean = mean_of(&f1);
        // `>=` walks toward smaller thresholds, so ties settle on the
        // smallest optimum.
        if mean >= best {
            best = mean;
            best_tau = value as f64;
        }
        while i < order.len() && scores[order[i] as usize] == value {
            let px = order[i] as usize;
            let im = image_of[px] as usize;
            if labels[px] {
                tp[im] += 1;
            } else {
                fp[im] += 1;
            }
            f1[im] = f1_from_counts(tp[im], fp[im], positives[im]);
            i += 1;
        }
    }
    let all_positive = mean_of(&f1);
    if all_positive >= best {
        best = all_positive;
        best_tau = f64::NEG_INFINITY;
    }
    Ok((best, best_tau))
}

/// Mean over images of the per-image best F1 (each image gets its own
/// ideal threshold). Images without forged pixels carry no signal for
/// this metric and are skipped with a warning.
pub fn f1_oracle(heatmaps: &[Plane], masks: &[Mask]) -> Result<f64> {
    if heatmaps.len() != masks.len() {
        return Err(Error::InvalidArgument(format!(
            "{} heatmaps paired with {} masks",
            heatmaps.len(),
            masks.len()
        )));
    }
    let mut sum = 0.0f64;
    let mut counted = 0usize;
    for (i, (h, m)) in heatmaps.iter().zip(masks).enumerate() {
        if m.count_set() == 0 {
            eprintln!("warning: image {i} has no forged pixels; excluded from F1-oracle");
            continue;
        }
        let (scores, labels) = pool_scores(std::slice::from_ref(h), std::slice::from_ref(m))?;
        let (best, _) = sweep_best_f1(&scores, &labels);
        sum += best;
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::Infeasible(
            "no image in the set has forged pixels; F1-oracle is undefined".into(),
        ));
    }
    Ok(sum / counted as f64)
}

/// Localization method under evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Noiseprint,
    Prnu,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Noiseprint => "noiseprint",
            Method::Prnu => "prnu",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        match s {
            "noiseprint" => Some(Method::Noiseprint),
            "prnu" => Some(Method::Prnu),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchmarkConfig {
    pub methods: Vec<Method>,
    /// Reference-stack sizes to sweep; cells that exceed the available
    /// reference images are skipped with a warning.
    pub n_refs: Vec<usize>,
    pub window: WindowConfig,
    pub wiener: WienerConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> BenchmarkConfig {
        BenchmarkConfig {
            methods: vec![Method::Noiseprint, Method::Prnu],
            n_refs: vec![50, 10, 1],
            window: WindowConfig::default(),
            wiener: WienerConfig::default(),
        }
    }
}

/// Metrics of one forged test image within a cell.
#[derive(Debug, Clone)]
pub struct ImageMetrics {
    pub path: String,
    pub auc: f64,
    pub best_f1: f64,
}

/// Metrics of one (method, n_ref) grid cell.
#[derive(Debug, Clone)]
pub struct CellReport {
    pub method: Method,
    pub n_ref: usize,
    pub n_images: usize,
    pub auc: f64,
    pub f1: f64,
    pub f1_threshold: f64,
    pub f1_oracle: f64,
    pub roc: RocCurve,
    pub per_image: Vec<ImageMetrics>,
}

#[derive(Debug, Clone)]
pub struct BenchmarkReport {
    pub meta: Vec<(String, String)>,
    pub cells: Vec<CellReport>,
}

impl BenchmarkReport {
    pub fn cell(&self, method: Method, n_ref: usize) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.method == method && c.n_ref == n_ref)
    }
}

/// The images of one test-side device: its reference stack and its forged
/// test images with ground-truth masks.
struct DeviceGroup {
    refs: Vec<Plane>,
    forged: Vec<(String, Plane, Mask)>,
}

fn collect_device_groups(root: &Path, manifest: &DatasetManifest) -> Result<Vec<DeviceGroup>> {
    let mut keys: Vec<(usize, usize)> = Vec::new();
    let mut groups: Vec<DeviceGroup> = Vec::new();
    let index_of = |model: usize,
                        device: usize,
                        keys: &mut Vec<(usize, usize)>,
                        groups: &mut Vec<DeviceGroup>| {
        match keys.iter().position(|&k| k == (model, device)) {
            Some(i) => i,
            None => {
                keys.push((model, device));
                groups.push(DeviceGroup { refs: Vec::new(), forged: Vec::new() });
                groups.len() - 1
            }
        }
    };
    for r in &manifest.records {
        match r.role {
            Role::Reference => {
                let img = read_pgm(&root.join(&r.path))?;
                let i = index_of(r.model_id, r.device_id, &mut keys, &mut groups);
                groups[i].refs.push(img);
            }
            Role::ForgedTest => {
                let img = read_pgm(&root.join(&r.path))?;
                let mask_rel = r.mask_path.as_ref().ok_or_else(|| {
                    Error::InvalidArgument(format!("forged-test record {} has no mask", r.path))
                })?;
                let mask = read_mask_pgm(&root.join(mask_rel))?;
                let i = index_of(r.model_id, r.device_id, &mut keys, &mut groups);
                groups[i].forged.push((r.path.clone(), img, mask));
            }
            _ => {}
        }
    }
    groups.retain(|g| !g.forged.is_empty());
    if groups.is_empty() {
        return Err(Error::Infeasible(
            "manifest has no forged-test images to evaluate".into(),
        ));
    }
    Ok(groups)
}

fn metrics_for_cell(
    method: Method,
    n_ref: usize,
    pairs: &[(String, Plane, Mask)],
) -> Result<CellReport> {
    let heatmaps: Vec<Plane> = pairs.iter().map(|(_, h, _)| h.clone()).collect();
    let masks: Vec<Mask> = pairs.iter().map(|(_, _, m)| m.clone()).collect();
    let roc = pooled_roc(&heatmaps, &masks)?;
    let pooled_auc = auc(&roc);
    let (f1, f1_threshold) = f1_best_global(&heatmaps, &masks)?;
    let oracle = f1_oracle(&heatmaps, &masks)?;
    let per_image = pairs
        .iter()
        .map(|(path, h, m)| {
            let single_roc =
                pooled_roc(std::slice::from_ref(h), std::slice::from_ref(m))?;
            let (scores, labels) =
                pool_scores(std::slice::from_ref(h), std::slice::from_ref(m))?;
            let (best_f1, _) = sweep_best_f1(&scores, &labels);
            Ok(ImageMetrics { path: path.clone(), auc: auc(&single_roc), best_f1 })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CellReport {
        method,
        n_ref,
        n_images: pairs.len(),
        auc: pooled_auc,
        f1,
        f1_threshold,
        f1_oracle: oracle,
        roc,
        per_image,
    })
}

/// Runs the full (method × reference-count) grid over the test side of a
/// dataset. Every cell sees exactly the same forged test images; only the
/// reference stack changes. References are per device; the noiseprint
/// residuals of reference and test images are extracted once and shared
/// across stack sizes. The net may be omitted when only the PRNU baseline
/// is requested.
pub fn run_benchmark(
    root: &Path,
    manifest: &DatasetManifest,
    net: Option<&NoiseprintNet>,
    config: &BenchmarkConfig,
) -> Result<BenchmarkReport> {
    manifest.validate()?;
    if config.methods.is_empty() || config.n_refs.is_empty() {
        return Err(Error::InvalidArgument(
            "benchmark needs at least one method and one reference count".into(),
        ));
    }
    let groups = collect_device_groups(root, manifest)?;
    let min_refs = groups.iter().map(|g| g.refs.len()).min().expect("nonempty");

    let needs_noiseprint = config.methods.contains(&Method::Noiseprint);
    let net = match (needs_noiseprint, net) {
        (true, None) => {
            return Err(Error::InvalidArgument(
                "the noiseprint method needs extractor weights".into(),
            ))
        }
        (_, n) => n,
    };
    let net_id = net.map(|n| n.weights_digest()).unwrap_or_else(|| "-".into());
    // Residuals are the expensive part; extract each exactly once.
    let ref_residuals: Vec<Vec<Plane>> = match net {
        Some(net) if needs_noiseprint => groups
            .iter()
            .map(|g| {
                g.refs
                    .par_iter()
                    .map(|img| net.extract_residual(img))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?,
        _ => Vec::new(),
    };
    let test_residuals: Vec<Vec<Plane>> = match net {
        Some(net) if needs_noiseprint => groups
            .iter()
            .map(|g| {
                g.forged
                    .par_iter()
                    .map(|(_, img, _)| net.extract_residual(img))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?,
        _ => Vec::new(),
    };

    let mut cells = Vec::new();
    for &method in &config.methods {
        for &n_ref in &config.n_refs {
            if n_ref == 0 || n_ref > min_refs {
                eprintln!(
                    "warning: skipping cell ({}, n_ref={n_ref}): only {min_refs} reference \
                     images available per device",
                    method.as_str()
                );
                continue;
            }
            let mut pairs: Vec<(String, Plane, Mask)> = Vec::new();
            for (gi, group) in groups.iter().enumerate() {
                match method {
                    Method::Noiseprint => {
                        let reference =
                            reference_from_residuals(&ref_residuals[gi][..n_ref], &net_id)?;
                        for (fi, (path, _, mask)) in group.forged.iter().enumerate() {
                            let heat = noiseprint_heatmap(
                                &test_residuals[gi][fi],
                                &reference,
                                &config.window,
                            )?;
                            pairs.push((path.clone(), heat, mask.clone()));
                        }
                    }
                    Method::Prnu => {
                        // A single-image stack is handled by duplication,
                        // which the estimator's n-fold cancellation makes
                        // arithmetically identical to using the image once.
                        let reference: PrnuReference = if n_ref == 1 {
                            estimate_prnu(
                                &[group.refs[0].clone(), group.refs[0].clone()],
                                &config.wiener,
                            )?
                        } else {
                            estimate_prnu(&group.refs[..n_ref], &config.wiener)?
                        };
                        for (path, img, mask) in &group.forged {
                            let heat =
                                prnu_heatmap(img, &reference, &config.wiener, &config.window)?;
                            pairs.push((path.clone(), heat, mask.clone()));
                        }
                    }
                }
            }
            cells.push(metrics_for_cell(method, n_ref, &pairs)?);
        }
    }
    if cells.is_empty() {
        return Err(Error::Infeasible(
            "every benchmark cell was skipped; no metrics to report".into(),
        ));
    }

    let manifest_digest = {
        let mut hasher = Sha256::new();
        hasher.update(render_manifest(manifest).as_bytes());
        let digest = hasher.finalize();
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect::<String>()
    };
    let aggregation = match config.window.aggregation {
        Aggregation::Mean => "mean",
        Aggregation::Max => "max",
    };
    let meta = vec![
        ("dataset".into(), manifest_digest),
        ("net".into(), net_id),
        ("window".into(), config.window.window.to_string()),
        ("stride".into(), config.window.stride.to_string()),
        ("aggregation".into(), aggregation.to_string()),
        ("wiener".into(), config.wiener.id()),
        ("roc_max_points".into(), REPORT_ROC_MAX_POINTS.to_string()),
    ];
    Ok(BenchmarkReport { meta, cells })
}

const REPORT_MAGIC: &str = "noiseprint-benchmark-report 1";
const REPORT_ROC_MAX_POINTS: usize = 512;

/// Renders a report as versioned structured text. The same report always
/// renders to the same bytes.
pub fn render_report(report: &BenchmarkReport) -> String {
    let mut out = String::from(REPORT_MAGIC);
    out.push('\n');
    for (k, v) in &report.meta {
        out.push_str(&format!("meta {k} {v}\n"));
    }
    for cell in &report.cells {
        out.push_str(&format!("cell {} {}\n", cell.method.as_str(), cell.n_ref));
        out.push_str(&format!("images {}\n", cell.n_images));
        out.push_str(&format!("auc {:.9e}\n", cell.auc));
        out.push_str(&format!("f1 {:.9e}\n", cell.f1));
        out.push_str(&format!("f1_threshold {:.9e}\n", cell.f1_threshold));
        out.push_str(&format!("f1_oracle {:.9e}\n", cell.f1_oracle));
        for im in &cell.per_image {
            out.push_str(&format!(
                "image {} {:.9e} {:.9e}\n",
                im.path, im.auc, im.best_f1
            ));
        }
        for p in cell.roc.decimated(REPORT_ROC_MAX_POINTS).points {
            out.push_str(&format!(
                "roc {:.9e} {:.9e} {:.9e}\n",
                p.threshold, p.fpr, p.tpr
            ));
        }
        out.push_str("end\n");
    }
    out
}

pub fn write_report(path: &Path, report: &BenchmarkReport) -> Result<()> {
    write_atomic(path, render_report(report).as_bytes())
}

/// Reads back the ROC of one (method, n_ref) cell from a rendered report
/// file, e.g. for plotting.
pub fn read_report_roc(path: &Path, method: Method, n_ref: usize) -> Result<RocCurve> {
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, first)) if first == REPORT_MAGIC => {}
        Some((_, first)) => {
            return Err(Error::format(
                path,
                1,
                format!("expected \"{REPORT_MAGIC}\", found \"{first}\""),
            ))
        }
        None => return Err(Error::format(path, 1, "empty report")),
    }
    let header = format!("cell {} {n_ref}", method.as_str());
    let mut in_cell = false;
    let mut points = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if !in_cell {
            in_cell = line == header;
            continue;
        }
        if line == "end" {
            break;
        }
        let Some(rest) = line.strip_prefix("roc ") else { continue };
        let mut fields = rest.split(' ');
        let mut next = || -> Result<f64> {
            fields
                .next()
                .and_then(|f| f.parse::<f64>().ok())
                .ok_or_else(|| {
                    Error::format(path, line_no, format!("bad roc line \"{line}\""))
                })
        };
        points.push(RocPoint { threshold: next()?, fpr: next()?, tpr: next()? });
    }
    if !in_cell {
        return Err(Error::InvalidArgument(format!(
            "report {} has no cell for method {} with {n_ref} reference images",
            path.display(),
            method.as_str()
        )));
    }
    if points.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "report {} lists no roc points for method {} with {n_ref} reference images",
            path.display(),
            method.as_str()
        )));
    }
    Ok(RocCurve { points })
}
