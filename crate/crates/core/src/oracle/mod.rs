//! Detector oracles: anything that scores an image for an attack objective
//! and, when capable, returns the pixel gradient of that score.
//!
//! Every objective value is the log-likelihood of the *wrong* prediction, so
//! all attacks in this crate maximize.

mod defense;
pub mod edge;
mod ensemble;
mod linear;

use serde::{Deserialize, Serialize};

pub use defense::{gaussian_blur, DefenseKind, DefenseSpec, DefendedOracle};
pub use edge::EdgeDetector;
pub use ensemble::EnsembleOracle;
pub use linear::LinearDetector;

use crate::error::{AscError, Result};
use crate::model::{Detection, Field3, ImagePlane, ObjectTarget, PerturbationTexture, BinaryMask};

/// Floor applied to log-probabilities so values stay finite at saturation.
pub const LOG_FLOOR: f64 = -27.631_021_115_928_547; // ln(1e-12)

/// Default number of classes for the toy detectors.
pub const DEFAULT_CLASSES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    /// Push the target toward background.
    Vanishing,
    /// Push the target away from its true category.
    Mislabel,
    /// Push the predicted box away from the target box (negative CIoU).
    BoxShift,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 3] =
        [ObjectiveKind::Vanishing, ObjectiveKind::Mislabel, ObjectiveKind::BoxShift];

    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::Vanishing => "vanishing",
            ObjectiveKind::Mislabel => "mislabel",
            ObjectiveKind::BoxShift => "box_shift",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        Self::ALL.into_iter().find(|k| k.name() == norm || (norm == "boxshift" && *k == ObjectiveKind::BoxShift))
    }
}

/// An attack goal bound to one target object.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub kind: ObjectiveKind,
    pub target: ObjectTarget,
}

impl Objective {
    pub fn new(kind: ObjectiveKind, target: ObjectTarget) -> Self {
        Self { kind, target }
    }

    pub fn vanishing(target: ObjectTarget) -> Self {
        Self::new(ObjectiveKind::Vanishing, target)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Capabilities {
    pub eval: bool,
    pub grad: bool,
    pub objectives: Vec<ObjectiveKind>,
}

impl Capabilities {
    pub fn full() -> Self {
        Self { eval: true, grad: true, objectives: ObjectiveKind::ALL.to_vec() }
    }

    pub fn supports(&self, kind: ObjectiveKind) -> bool {
        self.objectives.contains(&kind)
    }

    pub fn require(&self, kind: ObjectiveKind, gradient: bool) -> Result<()> {
        if !self.supports(kind) {
            return Err(AscError::Capability(format!("objective {} not supported", kind.name())));
        }
        if gradient && !self.grad {
            return Err(AscError::Capability("oracle is forward-only".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub value: f64,
    pub grad: Option<Field3>,
    pub detections: Vec<Detection>,
}

pub trait Oracle: Send + Sync {
    fn capabilities(&self) -> Capabilities;

    /// Forward pass: objective value and detections, no gradient.
    fn evaluate(&self, image: &ImagePlane, objective: &Objective) -> Result<OracleReport>;

    /// Forward pass plus the gradient of the value w.r.t. every pixel entry.
    fn evaluate_with_gradient(&self, image: &ImagePlane, objective: &Objective) -> Result<OracleReport>;

    fn gradient(&self, image: &ImagePlane, objective: &Objective) -> Result<Field3> {
        self.evaluate_with_gradient(image, objective)?
            .grad
            .ok_or_else(|| AscError::Capability("oracle returned no gradient".into()))
    }

    /// Exact texture optimum for a fixed mask, when the oracle has one.
    fn closed_form_texture(
        &self,
        _image: &ImagePlane,
        _objective: &Objective,
        _mask: &BinaryMask,
    ) -> Option<PerturbationTexture> {
        None
    }
}

impl<T: Oracle + ?Sized> Oracle for std::sync::Arc<T> {
    fn capabilities(&self) -> Capabilities {
        (**self).capabilities()
    }
    fn evaluate(&self, image: &ImagePlane, objective: &Objective) -> Result<OracleReport> {
        (**self).evaluate(image, objective)
    }
    fn evaluate_with_gradient(&self, image: &ImagePlane, objective: &Objective) -> Result<OracleReport> {
        (**self).evaluate_with_gradient(image, objective)
    }
    fn gradient(&self, image: &ImagePlane, objective: &Objective) -> Result<Field3> {
        (**self).gradient(image, objective)
    }
    fn closed_form_texture(
        &self,
        image: &ImagePlane,
        objective: &Objective,
        mask: &BinaryMask,
    ) -> Option<PerturbationTexture> {
        (**self).closed_form_texture(image, objective, mask)
    }
}

/// Oracle whose value never depends on the image.
#[derive(Debug, Clone)]
pub struct ConstantOracle {
    pub value: f64,
    pub detections: Vec<Detection>,
}

impl ConstantOracle {
    pub fn new(value: f64) -> Self {
        Self { value, detections: Vec::new() }
    }
}

impl Oracle for ConstantOracle {
    fn capabilities(&self) -> Capabilities {
        Capabilities::full()
    }

    fn evaluate(&self, _image: &ImagePlane, _objective: &Objective) -> Result<OracleReport> {
        Ok(OracleReport { value: self.value, grad: None, detections: self.detections.clone() })
    }

    fn evaluate_with_gradient(&self, image: &ImagePlane, objective: &Objective) -> Result<OracleReport> {
        let mut r = self.evaluate(image, objective)?;
        r.grad = Some(Field3::zeros(image.height(), image.width()));
        Ok(r)
    }
}

/// Wraps an oracle and hides its gradient capability.
#[derive(Debug, Clone)]
pub struct ForwardOnly<O>(pub O);

impl<O: Oracle> Oracle for ForwardOnly<O> {
    fn capabilities(&self) -> Capabilities {
        Capabilities { grad: false, ..self.0.capabilities() }
    }

    fn evaluate(&self, image: &ImagePlane, objective: &Objective) -> Result<OracleReport> {
        self.0.evaluate(image, objective)
    }

    fn evaluate_with_gradient(&self, _image: &ImagePlane, _objective: &Objective) -> Result<OracleReport> {
        Err(AscError::Capability("oracle is forward-only".into()))
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// ln(1 - sigmoid(z)) = -softplus(z), computed without cancellation.
pub(crate) fn log_one_minus_sigmoid(z: f64) -> f64 {
    if z > 0.0 {
        -z - (-z).exp().ln_1p()
    } else {
        -z.exp().ln_1p()
    }
}

/// Log-softmax of `logits` at `index`, plus the softmax vector.
pub(crate) fn log_softmax(logits: &[f64], index: usize) -> (f64, Vec<f64>) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    let lse = m + sum.ln();
    let probs = logits.iter().map(|l| (l - lse).exp()).collect();
    (logits[index] - lse, probs)
}

/// SplitMix64 finalizer, used to derive position-addressable pseudo-random
/// parameters from a seed.
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic uniform value in [-1, 1) addressed by a seed and a key tuple.
pub(crate) fn hashed_uniform(seed: u64, keys: &[u64]) -> f64 {
    let mut h = mix64(seed);
    for &k in keys {
        h = mix64(h ^ k);
    }
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

pub(crate) fn check_target_category(objective: &Objective, classes: usize) -> Result<usize> {
    let y = objective.target.category as usize;
    if objective.kind == ObjectiveKind::Mislabel && y >= classes {
        return Err(AscError::ContractViolation(format!(
            "target category {y} outside detector's {classes} classes"
        )));
    }
    Ok(y.min(classes.saturating_sub(1)))
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub fn random_image(h: usize, w: usize, seed: u64) -> ImagePlane {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImagePlane::from_vec(h, w, (0..h * w * 3).map(|_| rng.gen_range(0.05..0.95)).collect()).unwrap()
    }

    /// Worst relative error between the analytic gradient and central
    /// differences at `samples` random entries.
    pub fn max_fd_error(oracle: &dyn Oracle, image: &ImagePlane, obj: &Objective, samples: usize, seed: u64) -> f64 {
        let grad = oracle.gradient(image, obj).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let step = 1e-4;
        let mut worst: f64 = 0.0;
        for _ in 0..samples {
            let i = rng.gen_range(0..image.as_slice().len());
            let mut plus = image.as_slice().to_vec();
            let mut minus = plus.clone();
            plus[i] += step;
            minus[i] -= step;
            let (h, w) = image.dims();
            let field = |v: Vec<f64>| ImagePlane::new(Field3::from_vec(h, w, v).unwrap()).unwrap();
            let fp = oracle.evaluate(&field(plus), obj).unwrap().value;
            let fm = oracle.evaluate(&field(minus), obj).unwrap().value;
            let fd = (fp - fm) / (2.0 * step);
            let an = grad.as_slice()[i];
            let err = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(err);
        }
        worst
    }
}
