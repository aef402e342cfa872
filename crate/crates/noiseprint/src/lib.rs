//! Camera-model fingerprint extraction and image forgery localization.
//!
//! A small residual CNN is trained, Siamese-style, to map an image to a
//! noise residual that carries the periodic processing artifacts of the
//! camera model that produced it. Averaging residuals of pristine images
//! yields a reference fingerprint; sliding-window distances between a test
//! image's residual and that reference localize spliced, copy-moved, and
//! inpainted regions. A classical PRNU correlation detector is included as
//! the baseline, and everything runs on a synthetic camera simulator with
//! known ground truth so localization quality is measurable.

pub mod cli;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod fingerprint;
pub mod localize;
pub mod io;
pub mod net;
pub mod nn;
pub mod plane;
pub mod siamese;
pub mod simulate;

pub use error::{Error, Result};
pub use net::{tiled_extract, NetConfig, NoiseprintNet, TilingPolicy};
pub use plane::{Mask, Plane};
