//! Central finite-difference verification of analytic gradients.
//!
//! The caller supplies a probe closure that perturbs exactly one parameter
//! entry, re-evaluates the loss, and reports the perturbation that was
//! actually applied after f32 rounding. Using the applied step instead of
//! the requested one keeps the quotient honest for parameters whose
//! magnitude makes `w + step` land on a coarser f32 grid.

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (tensor index, element index) of the worst entry.
    pub worst: (usize, usize),
    pub entries_checked: usize,
}

/// Compares `analytic` against central finite differences of the loss.
///
/// `probe(tensor, element, delta)` must evaluate the loss with that single
/// entry shifted by `delta` (everything else untouched) and return
/// `(applied_delta, loss)`. Relative error per entry is
/// `|fd - analytic| / max(|fd| + |analytic|, 1e-8)`.
pub fn grad_check<F>(analytic: &[Tensor], step: f64, mut probe: F) -> Result<GradCheckReport>
where
    F: FnMut(usize, usize, f64) -> (f64, f64),
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        entries_checked: 0,
    };
    for (ti, grad) in analytic.iter().enumerate() {
        for ei in 0..grad.len() {
            let (dp, loss_plus) = probe(ti, ei, step);
            let (dm, loss_minus) = probe(ti, ei, -step);
            let span = dp - dm;
            if span == 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "perturbation of tensor {ti} entry {ei} had no effect; step {step} is below f32 resolution"
                )));
            }
            let fd = (loss_plus - loss_minus) / span;
            let ana = grad.data()[ei] as f64;
            let rel = (fd - ana).abs() / (fd.abs() + ana.abs()).max(1e-8);
            report.entries_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (ti, ei);
            }
        }
    }
    Ok(report)
}

/// Shifts one entry of a tensor by `delta` (through f32 rounding) and
/// reports the difference that actually landed. Intended for building
/// `grad_check` probes.
pub fn apply_probe_delta(tensor: &mut Tensor, element: usize, delta: f64) -> f64 {
    let old = tensor.data()[element];
    let new = (old as f64 + delta) as f32;
    tensor.data_mut()[element] = new;
    new as f64 - old as f64
}
