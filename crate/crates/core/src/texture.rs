//! Clipped gradient ascent on the texture for a fixed mask.

use serde::{Deserialize, Serialize};

use crate::analysis::SuccessCriterion;
use crate::error::{AscError, Result};
use crate::model::{compose_adversarial, BinaryMask, Detection, ImagePlane, PerturbationTexture};
use crate::oracle::{Objective, Oracle};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextureOptConfig {
    pub step_size: f64,
    pub max_steps: usize,
    /// Stop as soon as the current iterate defeats the detector.
    pub early_stop: bool,
    pub record_trace: bool,
    pub success: SuccessCriterion,
}

impl Default for TextureOptConfig {
    fn default() -> Self {
        Self { step_size: 0.05, max_steps: 200, early_stop: true, record_trace: true, success: SuccessCriterion::default() }
    }
}

impl TextureOptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(AscError::ContractViolation(format!("step size {} must be positive", self.step_size)));
        }
        self.success.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextureOutcome {
    /// Best iterate by objective value.
    pub texture: PerturbationTexture,
    pub best_value: f64,
    pub best_step: usize,
    /// Objective value of every iterate, starting with the initial texture.
    pub trace: Vec<f64>,
    pub steps: usize,
    /// Whether the best iterate defeats the detector.
    pub success: bool,
    pub detections: Vec<Detection>,
}

/// Maximizes the objective over texture values under `mask`:
/// `t ← clip(t + α ∇t)` with the gradient zeroed off the mask.
///
/// Pixels outside the mask are never written, and the best iterate (not the
/// last) is returned.
pub fn optimize_texture(
    oracle: &dyn Oracle,
    base: &ImagePlane,
    mask: &BinaryMask,
    objective: &Objective,
    cfg: &TextureOptConfig,
    init: &PerturbationTexture,
) -> Result<TextureOutcome> {
    cfg.validate()?;
    if init.dims() != base.dims() || mask.dims() != base.dims() {
        return Err(AscError::DimensionMismatch(format!(
            "base {:?}, mask {:?}, init {:?}",
            base.dims(),
            mask.dims(),
            init.dims()
        )));
    }
    if mask.is_empty() && cfg.max_steps > 0 {
        return Err(AscError::ContractViolation("texture optimization needs a nonempty mask".into()));
    }
    let support: Vec<usize> = mask.indices().collect();
    let want_grad = cfg.max_steps > 0;

    let mut texture = init.clone();
    let mut report = query(oracle, base, mask, &texture, objective, want_grad)?;
    let mut trace = Vec::new();
    if cfg.record_trace {
        trace.push(report.value);
    }
    let mut best = Best {
        texture: texture.clone(),
        value: report.value,
        step: 0,
        detections: report.detections.clone(),
    };
    let mut steps = 0;
    let succeeded = |d: &[Detection]| cfg.success.attack_succeeded(d, objective);

    if !(cfg.early_stop && succeeded(&report.detections)) {
        for step in 1..=cfg.max_steps {
            let grad = report.grad.take().ok_or_else(|| AscError::Capability("oracle returned no gradient".into()))?;
            for &p in &support {
                let g = grad.pixel(p);
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(AscError::NumericFailure {
                        step,
                        detail: format!("non-finite gradient at pixel {p}"),
                    });
                }
                texture.update_pixel(p, |c, v| v + cfg.step_size * g[c]);
            }
            steps = step;
            report = query(oracle, base, mask, &texture, objective, step < cfg.max_steps)?;
            if cfg.record_trace {
                trace.push(report.value);
            }
            if report.value > best.value {
                best = Best { texture: texture.clone(), value: report.value, step, detections: report.detections.clone() };
            }
            if cfg.early_stop && succeeded(&report.detections) {
                break;
            }
        }
    }

    let success = succeeded(&best.detections);
    Ok(TextureOutcome {
        texture: best.texture,
        best_value: best.value,
        best_step: best.step,
        trace,
        steps,
        success,
        detections: best.detections,
    })
}

struct Best {
    texture: PerturbationTexture,
    value: f64,
    step: usize,
    detections: Vec<Detection>,
}

fn query(
    oracle: &dyn Oracle,
    base: &ImagePlane,
    mask: &BinaryMask,
    texture: &PerturbationTexture,
    objective: &Objective,
    grad: bool,
) -> Result<crate::oracle::OracleReport> {
    let image = compose_adversarial(base, mask, texture)?;
    if grad {
        oracle.evaluate_with_gradient(&image, objective)
    } else {
        oracle.evaluate(&image, objective)
    }
}

/// Writes a trace as `step,value` CSV.
pub fn trace_csv(trace: &[f64]) -> String {
    let mut s = String::from("step,value\n");
    for (i, v) in trace.iter().enumerate() {
        s.push_str(&format!("{i},{v}\n"));
    }
    s
}
