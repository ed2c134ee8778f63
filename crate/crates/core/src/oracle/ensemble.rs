use std::sync::Arc;

use super::{Capabilities, Objective, ObjectiveKind, Oracle, OracleReport};
use crate::error::{AscError, Result};
use crate::model::{Field3, ImagePlane};

/// Averages value and gradient over member oracles.
///
/// Detections are the union of the members' detections, so a target counts as
/// still detected while any member detects it.
#[derive(Clone)]
pub struct EnsembleOracle {
    members: Vec<Arc<dyn Oracle>>,
}

impl std::fmt::Debug for EnsembleOracle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EnsembleOracle").field("members", &self.members.len()).finish()
    }
}

impl EnsembleOracle {
    pub fn new(members: Vec<Arc<dyn Oracle>>) -> Result<Self> {
        if members.len() < 2 {
            return Err(AscError::ContractViolation(format!(
                "ensemble needs at least 2 members, got {}",
                members.len()
            )));
        }
        if let Some(i) = members.iter().position(|m| !m.capabilities().grad) {
            return Err(AscError::Capability(format!("ensemble member {i} is forward-only")));
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[Arc<dyn Oracle>] {
        &self.members
    }

    fn combine(&self, image: &ImagePlane, objective: &Objective, grad: bool) -> Result<OracleReport> {
        let n = self.members.len() as f64;
        let mut value = 0.0;
        let mut sum = grad.then(|| Field3::zeros(image.height(), image.width()));
        let mut detections = Vec::new();
        for m in &self.members {
            let r = if grad { m.evaluate_with_gradient(image, objective)? } else { m.evaluate(image, objective)? };
            value += r.value;
            detections.extend(r.detections);
            if let (Some(acc), Some(g)) = (sum.as_mut(), r.grad) {
                acc.as_mut_slice().iter_mut().zip(g.as_slice()).for_each(|(a, b)| *a += b);
            }
        }
        if let Some(acc) = sum.as_mut() {
            acc.as_mut_slice().iter_mut().for_each(|a| *a /= n);
        }
        Ok(OracleReport { value: value / n, grad: sum, detections })
    }
}

impl Oracle for EnsembleOracle {
    fn capabilities(&self) -> Capabilities {
        let objectives = ObjectiveKind::ALL
            .into_iter()
            .filter(|k| self.members.iter().all(|m| m.capabilities().supports(*k)))
            .collect();
        Capabilities { eval: true, grad: true, objectives }
    }

    fn evaluate(&self, image: &ImagePlane, objective: &Objective) -> Result<OracleReport> {
        self.combine(image, objective, false)
    }

    fn evaluate_with_gradient(&self, image: &ImagePlane, objective: &Objective) -> Result<OracleReport> {
        self.combine(image, objective, true)
    }
}
