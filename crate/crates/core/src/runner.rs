//! Running named attack methods on one target or a batch of scenes and
//! summarizing the outcomes.

use serde::{Deserialize, Serialize};

use crate::analysis::{ciou_distance_metric, SuccessCriterion};
use crate::baselines::{cw_l0_attack, pgd0_attack, CwL0Config, Pgd0Config};
use crate::error::{AscError, Result};
use crate::model::{resolve_budget, AdversarialExample, AttackBudget, AttackMetadata, BinaryMask, ImagePlane, PerturbationTexture};
use crate::oracle::{Objective, ObjectiveKind, Oracle};
use crate::par::{self, Execution};
use crate::patterns::{contour_from_segmentation, generate_pattern, prior_contour, PatternKind, PatternSpec};
use crate::sampler::{asc_from_prior, RoundRecord, SamplerConfig};
use crate::scenes::Scene;
use crate::texture::{optimize_texture, TextureOptConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// Texture optimization on the fixed contour prior.
    Fasc,
    /// Contour-guided mask search.
    Oasc,
    Pgd0,
    CwL0,
    /// Texture optimization on a fixed pattern mask.
    Pattern(PatternKind),
}

impl Method {
    pub fn name(&self) -> String {
        match self {
            Method::Fasc => "fasc".into(),
            Method::Oasc => "oasc".into(),
            Method::Pgd0 => "pgd0".into(),
            Method::CwL0 => "cwl0".into(),
            Method::Pattern(k) => format!("pattern:{}", k.name()),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        match lower.as_str() {
            "fasc" | "f-asc" => Ok(Method::Fasc),
            "oasc" | "o-asc" => Ok(Method::Oasc),
            "pgd0" => Ok(Method::Pgd0),
            "cwl0" | "cw-l0" => Ok(Method::CwL0),
            _ => lower
                .strip_prefix("pattern:")
                .and_then(PatternKind::parse)
                .map(Method::Pattern)
                .ok_or_else(|| AscError::ContractViolation(format!("unknown method {s:?}"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.name())
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.name())
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Method::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// Knobs for every method. The single success criterion overrides the
/// per-optimizer copies so all methods are judged alike.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MethodConfig {
    pub texture: TextureOptConfig,
    pub sampler: SamplerConfig,
    pub pgd0: Pgd0Config,
    pub cwl0: CwL0Config,
    pub success: SuccessCriterion,
    pub min_grid_pitch: usize,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self {
            texture: TextureOptConfig { record_trace: false, ..Default::default() },
            sampler: SamplerConfig::default(),
            pgd0: Pgd0Config::default(),
            cwl0: CwL0Config::default(),
            success: SuccessCriterion::default(),
            min_grid_pitch: 2,
        }
    }
}

impl MethodConfig {
    fn texture_cfg(&self) -> TextureOptConfig {
        TextureOptConfig { success: self.success, ..self.texture }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: Method,
    pub budget: usize,
    pub l0: usize,
    /// The target is no longer detected on the adversarial image.
    pub success: bool,
    pub detected: bool,
    pub final_value: f64,
    pub iterations: usize,
    /// Best CIoU of a detection against the target, floored at 0.
    pub ciou: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rounds: Option<Vec<RoundRecord>>,
    /// Objective trace of the texture optimizer, for fixed-mask methods.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodRun {
    pub example: AdversarialExample,
    pub result: MethodResult,
}

/// Runs `method` against `objective` with `budget` resolved on the target.
///
/// A budget that resolves to zero pixels yields the clean image and a
/// failed attack.
pub fn run_method(
    oracle: &dyn Oracle,
    image: &ImagePlane,
    objective: &Objective,
    budget: AttackBudget,
    method: Method,
    cfg: &MethodConfig,
) -> Result<MethodRun> {
    let (h, w) = image.dims();
    objective.target.validate(h, w)?;
    oracle.capabilities().require(objective.kind, true)?;
    let n0 = resolve_budget(budget, &objective.target)?;
    let tcfg = cfg.texture_cfg();

    if n0 == 0 {
        let report = oracle.evaluate(image, objective)?;
        let example = AdversarialExample {
            base: image.clone(),
            mask: BinaryMask::empty(h, w),
            texture: PerturbationTexture::from_image(image),
            metadata: AttackMetadata {
                final_value: report.value,
                detections: report.detections,
                seed: cfg.sampler.rng_seed,
                ..Default::default()
            },
        };
        return Ok(finish(method, 0, example, objective, cfg, None, None));
    }

    let mut rounds = None;
    let mut trace = None;
    let example = match method {
        Method::Fasc | Method::Oasc => {
            let seg = objective
                .target
                .segmentation
                .as_ref()
                .ok_or_else(|| AscError::MissingPrior("contour attacks need a segmentation".into()))?;
            let initial = contour_from_segmentation(seg, n0)?;
            let prior = prior_contour(seg, n0)?;
            let mut scfg = cfg.sampler;
            if method == Method::Fasc {
                scfg.max_rounds = 0;
            }
            let mut log = Vec::new();
            let out = asc_from_prior(oracle, image, objective, n0, &initial, &prior, &scfg, &tcfg, &mut log)?;
            rounds = Some(out.rounds);
            out.example
        }
        Method::Pgd0 => pgd0_attack(oracle, image, objective, n0, &Pgd0Config { success: cfg.success, ..cfg.pgd0 })?,
        Method::CwL0 => cw_l0_attack(oracle, image, objective, n0, &CwL0Config { success: cfg.success, ..cfg.cwl0 })?,
        Method::Pattern(kind) => {
            let spec = PatternSpec { kind, budget: n0, min_grid_pitch: cfg.min_grid_pitch };
            let mask = generate_pattern(&spec, &objective.target, h, w)?;
            let init = PerturbationTexture::from_image(image);
            let steps = if mask.is_empty() { 0 } else { tcfg.max_steps };
            let out = optimize_texture(oracle, image, &mask, objective, &TextureOptConfig { max_steps: steps, ..tcfg }, &init)?;
            if tcfg.record_trace {
                trace = Some(out.trace);
            }
            AdversarialExample {
                base: image.clone(),
                mask,
                texture: out.texture,
                metadata: AttackMetadata {
                    seed: cfg.sampler.rng_seed,
                    iterations: out.steps,
                    final_value: out.best_value,
                    success: out.success,
                    detections: out.detections,
                },
            }
        }
    };
    Ok(finish(method, n0, example, objective, cfg, rounds, trace))
}

fn finish(
    method: Method,
    n0: usize,
    mut example: AdversarialExample,
    objective: &Objective,
    cfg: &MethodConfig,
    rounds: Option<Vec<RoundRecord>>,
    trace: Option<Vec<f64>>,
) -> MethodRun {
    let detected = cfg.success.still_detected(&example.metadata.detections, objective);
    let success = n0 > 0 && !detected;
    example.metadata.success = success;
    let result = MethodResult {
        method,
        budget: n0,
        l0: example.l0(),
        success,
        detected,
        final_value: example.metadata.final_value,
        iterations: example.metadata.iterations,
        ciou: ciou_distance_metric(&example.metadata.detections, &objective.target),
        rounds,
        trace,
    };
    MethodRun { example, result }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneResult {
    pub scene: String,
    /// The target is detected on the clean image.
    pub clean_detected: bool,
    pub results: Vec<MethodResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub scenes: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Fraction of scenes where the target survives the attack.
    pub sdr: f64,
    pub mean_l0: f64,
    pub mean_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub scenes: Vec<SceneResult>,
    pub summary: Vec<MethodSummary>,
}

impl BatchReport {
    pub fn summary_for(&self, method: Method) -> Option<&MethodSummary> {
        self.summary.iter().find(|s| s.method == method)
    }

    pub fn success_rate(&self, method: Method) -> Option<f64> {
        self.summary_for(method).map(|s| s.success_rate)
    }
}

/// Aggregates results per method. Row `i` holds one result per method in
/// the order of `methods`.
pub fn summarize(methods: &[Method], rows: &[&[MethodResult]]) -> Vec<MethodSummary> {
    methods
        .iter()
        .enumerate()
        .map(|(i, &method)| {
            let rs: Vec<&MethodResult> = rows.iter().filter_map(|r| r.get(i)).collect();
            let n = rs.len().max(1) as f64;
            let successes = rs.iter().filter(|r| r.success).count();
            MethodSummary {
                method,
                scenes: rs.len(),
                successes,
                success_rate: successes as f64 / n,
                sdr: rs.iter().filter(|r| r.detected).count() as f64 / n,
                mean_l0: rs.iter().map(|r| r.l0 as f64).sum::<f64>() / n,
                mean_value: rs.iter().map(|r| r.final_value).sum::<f64>() / n,
            }
        })
        .collect()
}

/// Runs every method on every scene. Scenes are processed in parallel
/// according to `exec`; each scene's methods run sequentially.
pub fn run_batch(
    oracle: &dyn Oracle,
    scenes: &[Scene],
    kind: ObjectiveKind,
    budget: AttackBudget,
    methods: &[Method],
    cfg: &MethodConfig,
    exec: Execution,
) -> Result<BatchReport> {
    let mut inner = *cfg;
    inner.sampler.execution = Execution::Sequential;
    let per_scene = par::map(exec, scenes, |scene| -> Result<SceneResult> {
        let objective = Objective::new(kind, scene.target.clone());
        let clean = oracle.evaluate(&scene.image, &objective)?;
        let results = methods
            .iter()
            .map(|&m| run_method(oracle, &scene.image, &objective, budget, m, &inner).map(|r| r.result))
            .collect::<Result<Vec<_>>>()?;
        Ok(SceneResult {
            scene: scene.name.clone(),
            clean_detected: inner.success.still_detected(&clean.detections, &objective),
            results,
        })
    });
    let scenes = per_scene.into_iter().collect::<Result<Vec<_>>>()?;
    let rows: Vec<&[MethodResult]> = scenes.iter().map(|s| s.results.as_slice()).collect();
    let summary = summarize(methods, &rows);
    Ok(BatchReport { scenes, summary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::EdgeDetector;
    use crate::scenes::square_scene;

    #[test]
    fn method_names_round_trip() {
        let all = [
            Method::Fasc,
            Method::Oasc,
            Method::Pgd0,
            Method::CwL0,
            Method::Pattern(PatternKind::AdvPatch),
            Method::Pattern(PatternKind::TwoByTwoGrid),
        ];
        for m in all {
            assert_eq!(Method::parse(&m.name()).unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(serde_json::from_str::<Method>(&json).unwrap(), m);
        }
        assert_eq!(Method::parse("pattern:2x2grid").unwrap(), Method::Pattern(PatternKind::TwoByTwoGrid));
        assert!(Method::parse("pattern:nope").is_err());
        assert!(Method::parse("sgd").is_err());
    }

    #[test]
    fn zero_budget_fails_trivially() {
        let scene = square_scene(24, 4, 4, 16, 0.1, 0.9);
        let det = EdgeDetector::new(1);
        let obj = Objective::vanishing(scene.target.clone());
        let run = run_method(&det, &scene.image, &obj, AttackBudget::Absolute(0), Method::Oasc, &MethodConfig::default())
            .unwrap();
        assert!(!run.result.success);
        assert_eq!(run.result.l0, 0);
        assert_eq!(run.example.image(), scene.image);
    }

    #[test]
    fn every_method_respects_budget() {
        let scene = square_scene(24, 4, 4, 16, 0.1, 0.9);
        let det = EdgeDetector::new(1);
        let obj = Objective::vanishing(scene.target.clone());
        let mut cfg = MethodConfig::default();
        cfg.texture.max_steps = 10;
        cfg.sampler.max_rounds = 2;
        cfg.pgd0.steps = 10;
        cfg.cwl0.inner_steps = 5;
        cfg.cwl0.removal_batch = 64;
        let mut methods = vec![Method::Fasc, Method::Oasc, Method::Pgd0, Method::CwL0];
        methods.extend(PatternKind::ALL.map(Method::Pattern));
        for m in methods {
            let run = run_method(&det, &scene.image, &obj, AttackBudget::FractionOfArea(0.1), m, &cfg).unwrap();
            assert_eq!(run.result.budget, 25);
            assert!(run.result.l0 <= 25, "{m}: {}", run.result.l0);
        }
    }
}
