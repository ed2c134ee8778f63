//! Sparse adversarial attacks on object detectors under an ℓ0 budget,
//! built around semantic contour priors.
//!
//! The crate is organised bottom-up:
//!
//! * [`model`]: images, masks, textures, targets and budgets.
//! * [`patterns`]: morphology and the fixed prior masks.
//! * [`oracle`]: the detector abstraction and the built-in toy detectors.
//! * [`texture`]: clipped gradient ascent on a fixed mask.
//! * [`sampler`]: the contour-guided mask search (O-ASC).
//! * [`baselines`]: PGD₀, C&W-ℓ0 and exhaustive search.
//! * [`analysis`]: IoU/CIoU, detection checks and nAC maps.
//! * [`protocol`]: NDJSON wire protocol for remote oracles.
//! * [`scenes`] and [`runner`]: synthetic scenes and batch evaluation.

pub mod analysis;
pub mod baselines;
pub mod dual;
pub mod error;
pub mod model;
pub mod oracle;
pub mod par;
pub mod patterns;
pub mod protocol;
pub mod runner;
pub mod sampler;
pub mod scenes;
pub mod texture;

pub use error::{AscError, Result};

/// Engine version recorded in reports.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
