//! Scattered ℓ0 baselines and an exhaustive subset search used as ground
//! truth on tiny instances.

use serde::{Deserialize, Serialize};

use crate::error::{AscError, Result};
use crate::model::{
    compose_adversarial, AdversarialExample, AttackMetadata, BinaryMask, Detection, Field3, ImagePlane,
    PerturbationTexture, CHANNELS,
};
use crate::oracle::{Objective, Oracle};
use crate::par::{self, Execution};
use crate::texture::{optimize_texture, TextureOptConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pgd0Config {
    pub steps: usize,
    pub step_size: f64,
    #[serde(default)]
    pub success: crate::analysis::SuccessCriterion,
}

impl Default for Pgd0Config {
    fn default() -> Self {
        Self { steps: 200, step_size: 0.05, success: Default::default() }
    }
}

/// Keeps the `n0` pixels of `candidate` that deviate most from `base`
/// (channel-summed absolute difference, ties in raster order) and resets the
/// rest to the base. Returns the projected image and the kept support.
pub fn project_l0(base: &ImagePlane, candidate: &Field3, n0: usize) -> (Field3, BinaryMask) {
    let (h, w) = base.dims();
    let n = h * w;
    if n0 >= n {
        return (candidate.clone(), BinaryMask::full(h, w));
    }
    let dev: Vec<f64> = (0..n)
        .map(|p| base.pixel(p).iter().zip(candidate.pixel(p)).map(|(b, c)| (c - b).abs()).sum())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| dev[b].total_cmp(&dev[a]).then(a.cmp(&b)));
    let keep = BinaryMask::from_indices(h, w, order.into_iter().take(n0));
    let mut out = base.field().clone();
    for p in keep.indices() {
        out.pixel_mut(p).copy_from_slice(candidate.pixel(p));
    }
    (out, keep)
}

/// PGD₀: a clipped gradient step on a dense texture, followed by projection
/// of the texture onto the `n0` most-deviating pixels. The gradient is taken
/// at the projected image; the dense texture keeps accumulating, so a pixel
/// dropped by one projection can return later. Returns the best iterate.
pub fn pgd0_attack(
    oracle: &dyn Oracle,
    image: &ImagePlane,
    objective: &Objective,
    n0: usize,
    cfg: &Pgd0Config,
) -> Result<AdversarialExample> {
    if n0 == 0 {
        return Err(AscError::ContractViolation("PGD0 needs n0 >= 1".into()));
    }
    if !(cfg.step_size > 0.0 && cfg.step_size.is_finite()) {
        return Err(AscError::ContractViolation(format!("step size {} must be positive", cfg.step_size)));
    }
    let (h, w) = image.dims();
    let mut dense = image.field().clone();
    let mut current = image.clone();
    let mut report = if cfg.steps > 0 { oracle.evaluate_with_gradient(image, objective)? } else { oracle.evaluate(image, objective)? };
    let mut best = (report.value, current.clone(), BinaryMask::empty(h, w), report.detections.clone());

    for step in 1..=cfg.steps {
        let grad = report.grad.take().ok_or_else(|| AscError::Capability("oracle returned no gradient".into()))?;
        if !grad.is_finite() {
            return Err(AscError::NumericFailure { step, detail: "non-finite gradient".into() });
        }
        for (v, g) in dense.as_mut_slice().iter_mut().zip(grad.as_slice()) {
            *v = (*v + cfg.step_size * g).clamp(0.0, 1.0);
        }
        let (projected, support) = project_l0(image, &dense, n0);
        current = ImagePlane::new(projected)?;
        report = if step < cfg.steps {
            oracle.evaluate_with_gradient(&current, objective)?
        } else {
            oracle.evaluate(&current, objective)?
        };
        if report.value > best.0 {
            best = (report.value, current.clone(), support, report.detections.clone());
        }
    }

    let (value, adv, mask, detections) = best;
    // Drop support pixels that ended up equal to the base.
    let mask = BinaryMask::from_indices(h, w, mask.indices().filter(|&p| adv.pixel(p) != image.pixel(p)));
    let success = cfg.success.attack_succeeded(&detections, objective);
    Ok(AdversarialExample {
        base: image.clone(),
        texture: PerturbationTexture::new(adv.into_field())?,
        mask,
        metadata: AttackMetadata { seed: 0, iterations: cfg.steps, final_value: value, success, detections },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CwL0Config {
    pub inner_steps: usize,
    pub step_size: f64,
    /// Pixels removed per outer iteration.
    pub removal_batch: usize,
    #[serde(default)]
    pub success: crate::analysis::SuccessCriterion,
}

impl Default for CwL0Config {
    fn default() -> Self {
        Self { inner_steps: 50, step_size: 0.05, removal_batch: 8, success: Default::default() }
    }
}

/// C&W-ℓ0 style shrinking: optimize the texture on the allowed set, drop the
/// `removal_batch` pixels with the smallest `|Σ_c g·(t − x)|`, and repeat
/// until at most `n0` pixels remain; the last optimization is the result.
pub fn cw_l0_attack(
    oracle: &dyn Oracle,
    image: &ImagePlane,
    objective: &Objective,
    n0: usize,
    cfg: &CwL0Config,
) -> Result<AdversarialExample> {
    if n0 == 0 || cfg.removal_batch == 0 {
        return Err(AscError::ContractViolation("C&W-l0 needs n0 >= 1 and removal_batch >= 1".into()));
    }
    let (h, w) = image.dims();
    let tcfg = TextureOptConfig {
        step_size: cfg.step_size,
        max_steps: cfg.inner_steps,
        early_stop: false,
        record_trace: false,
        success: cfg.success,
    };
    let mut allowed = BinaryMask::full(h, w);
    let mut texture = PerturbationTexture::from_image(image);
    let mut iterations = 0;
    loop {
        let out = optimize_texture(oracle, image, &allowed, objective, &tcfg, &texture)?;
        iterations += out.steps;
        texture = out.texture;
        if allowed.count() <= n0 {
            let success = cfg.success.attack_succeeded(&out.detections, objective);
            return Ok(AdversarialExample {
                base: image.clone(),
                mask: allowed,
                texture,
                metadata: AttackMetadata {
                    seed: 0,
                    iterations,
                    final_value: out.best_value,
                    success,
                    detections: out.detections,
                },
            });
        }
        let adv = compose_adversarial(image, &allowed, &texture)?;
        let grad = oracle.gradient(&adv, objective)?;
        let mut scored: Vec<(f64, usize)> = allowed
            .indices()
            .map(|p| {
                let s: f64 = (0..CHANNELS).map(|c| grad.pixel(p)[c] * (texture.pixel(p)[c] - image.pixel(p)[c])).sum();
                (s.abs(), p)
            })
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let remove = cfg.removal_batch.min(allowed.count() - n0);
        let mut reset = texture.clone();
        for &(_, p) in scored.iter().take(remove) {
            allowed.set_index(p, false);
            reset.copy_pixel_from(p, image.pixel(p));
        }
        texture = reset;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BruteForceLimit {
    pub max_subsets: u64,
    #[serde(default)]
    pub execution: Execution,
}

impl Default for BruteForceLimit {
    fn default() -> Self {
        Self { max_subsets: 1_000_000, execution: Execution::Parallel }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BruteForceResult {
    pub mask: BinaryMask,
    pub texture: PerturbationTexture,
    pub value: f64,
    pub detections: Vec<Detection>,
    pub subsets: u128,
}

/// `C(n, k)`, saturating at `u128::MAX`.
pub fn binomial(n: u64, k: u64) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = match acc.checked_mul((n - i) as u128) {
            Some(v) => v / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    acc
}

/// Tries every `n0`-pixel subset and returns the one with the highest
/// objective after texture optimization. The texture uses the oracle's
/// closed form when it has one, otherwise `tcfg` gradient ascent from the
/// base image. Ties go to the lexicographically smallest subset.
pub fn brute_force_attack(
    oracle: &dyn Oracle,
    image: &ImagePlane,
    objective: &Objective,
    n0: usize,
    limit: &BruteForceLimit,
    tcfg: &TextureOptConfig,
) -> Result<BruteForceResult> {
    if limit.max_subsets == 0 {
        return Err(AscError::ContractViolation("max_subsets must be at least 1".into()));
    }
    let (h, w) = image.dims();
    let n = h * w;
    let subsets = binomial(n as u64, n0 as u64);
    if subsets > limit.max_subsets as u128 {
        return Err(AscError::CombinatorialBlowup { subsets, limit: limit.max_subsets });
    }
    let tcfg = TextureOptConfig { early_stop: false, record_trace: false, ..*tcfg };
    let score = |subset: &[usize]| -> Result<(f64, PerturbationTexture, Vec<Detection>)> {
        let mask = BinaryMask::from_indices(h, w, subset.iter().copied());
        let texture = match oracle.closed_form_texture(image, objective, &mask) {
            Some(t) => t,
            None if mask.is_empty() => PerturbationTexture::from_image(image),
            None => optimize_texture(oracle, image, &mask, objective, &tcfg, &PerturbationTexture::from_image(image))?.texture,
        };
        let report = oracle.evaluate(&compose_adversarial(image, &mask, &texture)?, objective)?;
        Ok((report.value, texture, report.detections))
    };

    type Best = Option<(f64, Vec<usize>, PerturbationTexture, Vec<Detection>)>;
    let shard = |first: usize| -> Result<Best> {
        let mut best: Best = None;
        let mut subset = vec![first];
        for_each_combination(first + 1, n, n0 - 1, &mut subset, &mut |s| {
            let (v, t, d) = score(s)?;
            if best.as_ref().is_none_or(|b| v > b.0) {
                best = Some((v, s.to_vec(), t, d));
            }
            Ok(())
        })?;
        Ok(best)
    };

    let (value, subset, texture, detections) = if n0 == 0 {
        let (v, t, d) = score(&[])?;
        (v, Vec::new(), t, d)
    } else {
        let shards = par::map_range(limit.execution, n, shard);
        let mut best: Best = None;
        for s in shards {
            if let Some(c) = s? {
                if best.as_ref().is_none_or(|b| c.0 > b.0) {
                    best = Some(c);
                }
            }
        }
        best.ok_or_else(|| AscError::ContractViolation(format!("no {n0}-subset of {n} pixels")))?
    };
    Ok(BruteForceResult { mask: BinaryMask::from_indices(h, w, subset), texture, value, detections, subsets })
}

/// Visits all `k`-combinations of `start..n` in lexicographic order, each
/// appended to `prefix`.
fn for_each_combination(
    start: usize,
    n: usize,
    k: usize,
    prefix: &mut Vec<usize>,
    f: &mut dyn FnMut(&[usize]) -> Result<()>,
) -> Result<()> {
    if k == 0 {
        return f(prefix);
    }
    for i in start..n.saturating_sub(k - 1) {
        prefix.push(i);
        for_each_combination(i + 1, n, k - 1, prefix, f)?;
        prefix.pop();
    }
    Ok(())
}
