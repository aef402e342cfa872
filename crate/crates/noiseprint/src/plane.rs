//! Single-channel image planes and binary masks.
//!
//! A [`Plane`] is a row-major grid of f32 samples addressed as (x, y) with
//! the origin at the top-left corner. Images, residuals, fingerprints, and
//! heatmaps all live in this type; the network-facing [`crate::nn::Tensor`]
//! view is produced on demand.

use crate::error::{Error, Result};
use crate::nn::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Plane {
    pub fn zeros(width: usize, height: usize) -> Plane {
        Plane { width, height, data: vec![0.0; width * height] }
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Plane {
        Plane { width, height, data: vec![value; width * height] }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Result<Plane> {
        if data.len() != width * height {
            return Err(Error::shape(
                "Plane::from_vec",
                format!("{} values for {width}x{height}", width * height),
                format!("{}", data.len()),
            ));
        }
        Ok(Plane { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: f32) {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x] = value;
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, y: usize) -> &[f32] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    /// Copies the w×h rectangle whose top-left corner is (x, y).
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Plane> {
        if x + w > self.width || y + h > self.height {
            return Err(Error::InvalidArgument(format!(
                "crop {w}x{h}+{x}+{y} exceeds the {}x{} plane",
                self.width, self.height
            )));
        }
        let mut out = Plane::zeros(w, h);
        for row in 0..h {
            let src = (y + row) * self.width + x;
            out.data[row * w..(row + 1) * w].copy_from_slice(&self.data[src..src + w]);
        }
        Ok(out)
    }

    /// Writes `src` into this plane with its top-left corner at (x, y).
    pub fn paste(&mut self, src: &Plane, x: usize, y: usize) -> Result<()> {
        if x + src.width > self.width || y + src.height > self.height {
            return Err(Error::InvalidArgument(format!(
                "paste of a {}x{} plane at +{x}+{y} exceeds the {}x{} target",
                src.width, src.height, self.width, self.height
            )));
        }
        for row in 0..src.height {
            let dst = (y + row) * self.width + x;
            self.data[dst..dst + src.width]
                .copy_from_slice(&src.data[row * src.width..(row + 1) * src.width]);
        }
        Ok(())
    }

    /// Views the plane as a [1, 1, height, width] network input.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[1, 1, self.height, self.width], self.data.clone())
            .expect("plane length always matches its dimensions")
    }

    /// Accepts a [1, 1, h, w] tensor (a single-sample, single-channel
    /// network output) and reinterprets it as a plane.
    pub fn from_tensor(t: &Tensor) -> Result<Plane> {
        let (n, c, h, w) = t.dims4("Plane::from_tensor")?;
        if n != 1 || c != 1 {
            return Err(Error::shape(
                "Plane::from_tensor",
                "a [1, 1, h, w] tensor".to_string(),
                format!("{:?}", t.shape()),
            ));
        }
        Plane::from_vec(w, h, t.data().to_vec())
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn min_max(&self) -> (f32, f32) {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in &self.data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    pub fn clip(&mut self, lo: f32, hi: f32) {
        for v in &mut self.data {
            *v = v.clamp(lo, hi);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Pearson correlation between two planes of equal size, in [−1, 1].
/// A plane with zero variance has no defined correlation and is rejected.
pub fn normalized_correlation(a: &Plane, b: &Plane) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::shape(
            "normalized_correlation",
            format!("{}x{}", a.width, a.height),
            format!("{}x{}", b.width, b.height),
        ));
    }
    if a.is_empty() {
        return Err(Error::InvalidArgument("correlation of empty planes is undefined".into()));
    }
    let ma = a.mean();
    let mb = b.mean();
    let mut cov = 0.0f64;
    let mut va = 0.0f64;
    let mut vb = 0.0f64;
    for (x, y) in a.data.iter().zip(&b.data) {
        let da = *x as f64 - ma;
        let db = *y as f64 - mb;
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::InvalidArgument(
            "correlation with a constant plane is undefined".into(),
        ));
    }
    Ok(cov / (va * vb).sqrt())
}

/// Binary region mask aligned to a plane; true marks a pixel as inside the
/// region (for forgeries: forged).
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Mask {
        Mask { width, height, data: vec![false; width * height] }
    }

    /// Marks the w×h rectangle with top-left corner (x, y).
    pub fn rect(width: usize, height: usize, x: usize, y: usize, w: usize, h: usize) -> Result<Mask> {
        if x + w > width || y + h > height {
            return Err(Error::InvalidArgument(format!(
                "mask rectangle {w}x{h}+{x}+{y} exceeds the {width}x{height} mask"
            )));
        }
        let mut mask = Mask::empty(width, height);
        for row in y..y + h {
            for col in x..x + w {
                mask.data[row * width + col] = true;
            }
        }
        Ok(mask)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x] = value;
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count_set(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&b| b)
    }

    /// True when no marked pixel touches the outer border, so the region is
    /// strictly inside the image.
    pub fn is_strictly_inside(&self) -> bool {
        if self.width == 0 || self.height == 0 {
            return true;
        }
        for x in 0..self.width {
            if self.get(x, 0) || self.get(x, self.height - 1) {
                return false;
            }
        }
        for y in 0..self.height {
            if self.get(0, y) || self.get(self.width - 1, y) {
                return false;
            }
        }
        true
    }

    /// Tight bounding box of the marked region as (x, y, w, h), or None for
    /// an empty mask.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut x0 = self.width;
        let mut y0 = self.height;
        let mut x1 = 0usize;
        let mut y1 = 0usize;
        let mut found = false;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    found = true;
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        found.then(|| (x0, y0, x1 - x0 + 1, y1 - y0 + 1))
    }
}
