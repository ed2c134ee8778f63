//! O-ASC: a selection field θ around the prior contour, refined by MAP-style
//! updates and Monte Carlo mask sampling, alternated with texture
//! optimization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AscError, Result};
use crate::model::{
    compose_adversarial, resolve_budget, AdversarialExample, AttackBudget, AttackMetadata, BinaryMask, Detection,
    ImagePlane, PerturbationTexture, ScalarField,
};
use crate::oracle::{Objective, Oracle};
use crate::par::{self, Execution};
use crate::patterns::{contour_from_segmentation, dilate_square, prior_contour};
use crate::texture::{optimize_texture, TextureOptConfig};

/// Temperatures at or below this value are treated as the zero-temperature
/// limit, where sampling degenerates to top-k projection.
pub const TEMPERATURE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ThetaField {
    pub theta: ScalarField,
    pub theta0: ScalarField,
    pub band: BinaryMask,
    pub band_radius: usize,
}

impl ThetaField {
    pub fn dims(&self) -> (usize, usize) {
        self.band.dims()
    }

    /// Band pixels sorted by θ descending, ties in raster order.
    fn ranked_band(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = self.band.indices().collect();
        idx.sort_by(|&a, &b| self.theta.data[b].total_cmp(&self.theta.data[a]).then(a.cmp(&b)));
        idx
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub beta: f64,
    pub samples_per_round: usize,
    pub max_rounds: usize,
    pub temperature: f64,
    pub band_radius: usize,
    pub rng_seed: u64,
    #[serde(default)]
    pub execution: Execution,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            beta: 0.3,
            samples_per_round: 8,
            max_rounds: 10,
            temperature: 0.5,
            band_radius: 2,
            rng_seed: 0,
            execution: Execution::Parallel,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(AscError::ContractViolation(format!("beta {} outside [0, 1]", self.beta)));
        }
        if self.samples_per_round == 0 {
            return Err(AscError::ContractViolation("samples_per_round must be at least 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(AscError::ContractViolation(format!("temperature {} must be positive", self.temperature)));
        }
        Ok(())
    }
}

/// θ0 is 1 on the contour and decays linearly with Chebyshev distance,
/// reaching 0 at `band_radius`; the band is the contour dilated by the radius.
pub fn theta_init(contour: &BinaryMask, band_radius: usize) -> Result<ThetaField> {
    if contour.is_empty() {
        return Err(AscError::DegeneratePrior("prior contour is empty".into()));
    }
    let (h, w) = contour.dims();
    let mut theta0 = ScalarField::zeros(h, w);
    for p in contour.indices() {
        theta0.data[p] = 1.0;
    }
    let mut reached = contour.clone();
    for d in 1..=band_radius {
        let next = dilate_square(contour, d);
        let value = 1.0 - d as f64 / band_radius as f64;
        for p in next.and_not(&reached).indices() {
            theta0.data[p] = value;
        }
        reached = next;
    }
    Ok(ThetaField { theta: theta0.clone(), theta0, band: reached, band_radius })
}

/// `θ ← (1−β)θ + β(g + θ0)` on the band; zero elsewhere.
pub fn theta_update(field: &ThetaField, surrogate: &ScalarField, beta: f64) -> Result<ThetaField> {
    if (surrogate.height, surrogate.width) != field.dims() {
        return Err(AscError::DimensionMismatch("surrogate does not match theta field".into()));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(AscError::ContractViolation(format!("beta {beta} outside [0, 1]")));
    }
    let mut theta = ScalarField::zeros(surrogate.height, surrogate.width);
    for p in field.band.indices() {
        let g = surrogate.data[p];
        if !g.is_finite() {
            return Err(AscError::NumericFailure { step: 0, detail: format!("non-finite surrogate at pixel {p}") });
        }
        theta.data[p] = (1.0 - beta) * field.theta.data[p] + beta * (g + field.theta0.data[p]);
    }
    Ok(ThetaField { theta, ..field.clone() })
}

/// Channel-summed absolute pixel gradient, zero off the band and scaled so
/// its maximum over the band is 1 (unless it is identically zero).
pub fn grad_surrogate(
    oracle: &dyn Oracle,
    image: &ImagePlane,
    objective: &Objective,
    band: &BinaryMask,
) -> Result<ScalarField> {
    let grad = oracle.gradient(image, objective)?;
    let (h, w) = image.dims();
    if grad.dims() != (h, w) || band.dims() != (h, w) {
        return Err(AscError::DimensionMismatch("gradient or band does not match image".into()));
    }
    let sums = grad.channel_abs_sum();
    let mut out = ScalarField::zeros(h, w);
    let mut max = 0.0f64;
    for p in band.indices() {
        out.data[p] = sums[p];
        max = max.max(sums[p]);
    }
    if !max.is_finite() {
        return Err(AscError::NumericFailure { step: 0, detail: "non-finite gradient in surrogate".into() });
    }
    if max > 0.0 {
        out.data.iter_mut().for_each(|v| *v /= max);
    }
    Ok(out)
}

/// The `n0` largest θ values inside the band (ties in raster order).
pub fn project_theta(field: &ThetaField, n0: usize) -> BinaryMask {
    let (h, w) = field.dims();
    BinaryMask::from_indices(h, w, field.ranked_band().into_iter().take(n0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledMasks {
    pub masks: Vec<BinaryMask>,
    /// Set when the band holds fewer than `n0` pixels and every mask had to
    /// shrink to the band.
    pub truncated: bool,
}

/// Draws `count` masks of `min(n0, |band|)` band pixels each, without
/// replacement, with probabilities ∝ exp(θ/τ) (Gumbel-top-k).
pub fn sample_masks<R: Rng + ?Sized>(
    field: &ThetaField,
    n0: usize,
    count: usize,
    temperature: f64,
    rng: &mut R,
) -> SampledMasks {
    let (h, w) = field.dims();
    let band: Vec<usize> = field.band.indices().collect();
    let truncated = band.len() < n0;
    let k = n0.min(band.len());
    let tau = temperature.max(TEMPERATURE_FLOOR);
    let masks = (0..count)
        .map(|_| {
            if tau <= TEMPERATURE_FLOOR {
                return project_theta(field, k);
            }
            let mut keyed: Vec<(f64, usize)> =
                band.iter().map(|&p| (field.theta.data[p] / tau + gumbel(rng), p)).collect();
            keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            BinaryMask::from_indices(h, w, keyed.into_iter().take(k).map(|(_, p)| p))
        })
        .collect();
    SampledMasks { masks, truncated }
}

fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // Uniform on the open interval (0, 1).
    let u = ((rng.gen::<u64>() >> 11) as f64 + 0.5) / (1u64 << 53) as f64;
    -(-u.ln()).ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub best_value: f64,
    pub mask_popcount: usize,
    pub candidates: usize,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AscOutcome {
    pub example: AdversarialExample,
    pub rounds: Vec<RoundRecord>,
    /// The band could not hold the full budget.
    pub band_truncated: bool,
}

pub fn rounds_json(rounds: &[RoundRecord]) -> String {
    serde_json::to_string_pretty(rounds).expect("round records serialize")
}

#[derive(Clone)]
struct Candidate {
    mask: BinaryMask,
    texture: PerturbationTexture,
    value: f64,
    success: bool,
    detections: Vec<Detection>,
    iterations: usize,
}

impl Candidate {
    /// Successful candidates win over unsuccessful ones, then higher value.
    fn beats(&self, other: &Candidate) -> bool {
        (self.success, self.value) > (other.success, other.value)
    }
}

/// Runs O-ASC on the target's segmentation. Round 0 is F-ASC; see
/// [`asc_attack_traced`] for the round semantics.
pub fn asc_attack(
    oracle: &dyn Oracle,
    image: &ImagePlane,
    objective: &Objective,
    budget: AttackBudget,
    scfg: &SamplerConfig,
    tcfg: &TextureOptConfig,
) -> Result<AscOutcome> {
    let mut rounds = Vec::new();
    asc_attack_traced(oracle, image, objective, budget, scfg, tcfg, &mut rounds)
}

/// Like [`asc_attack`] but appends each round to `rounds` as it completes,
/// so a caller still holds the partial trace if an oracle call fails.
pub fn asc_attack_traced(
    oracle: &dyn Oracle,
    image: &ImagePlane,
    objective: &Objective,
    budget: AttackBudget,
    scfg: &SamplerConfig,
    tcfg: &TextureOptConfig,
    rounds: &mut Vec<RoundRecord>,
) -> Result<AscOutcome> {
    let target = &objective.target;
    let (h, w) = image.dims();
    target.validate(h, w)?;
    let seg = target
        .segmentation
        .as_ref()
        .ok_or_else(|| AscError::MissingPrior("contour attack needs a segmentation".into()))?;
    let n0 = resolve_budget(budget, target)?;
    let initial = contour_from_segmentation(seg, n0)?;
    let prior = prior_contour(seg, n0)?;
    asc_from_prior(oracle, image, objective, n0, &initial, &prior, scfg, tcfg, rounds)
}

/// O-ASC from an explicit prior: `initial` is the round-0 mask and `prior`
/// seeds θ0 and the band.
///
/// Round 0 optimizes texture on `initial` and returns at once on success.
/// Every later round recomputes the surrogate at the current best
/// adversarial image, updates θ, draws `samples_per_round` masks plus the
/// projected mask, optimizes each (warm-started from the best texture) and
/// keeps the global best.
#[allow(clippy::too_many_arguments)]
pub fn asc_from_prior(
    oracle: &dyn Oracle,
    image: &ImagePlane,
    objective: &Objective,
    n0: usize,
    initial: &BinaryMask,
    prior: &BinaryMask,
    scfg: &SamplerConfig,
    tcfg: &TextureOptConfig,
    rounds: &mut Vec<RoundRecord>,
) -> Result<AscOutcome> {
    scfg.validate()?;
    tcfg.validate()?;
    if initial.count() > n0 {
        return Err(AscError::ContractViolation(format!("initial mask has {} pixels, budget {n0}", initial.count())));
    }
    if initial.dims() != image.dims() || prior.dims() != image.dims() {
        return Err(AscError::DimensionMismatch("prior masks do not match image".into()));
    }
    let clean_texture = PerturbationTexture::from_image(image);
    let mut best = if initial.is_empty() {
        let report = oracle.evaluate(image, objective)?;
        Candidate {
            mask: initial.clone(),
            texture: clean_texture.clone(),
            value: report.value,
            success: tcfg.success.attack_succeeded(&report.detections, objective),
            detections: report.detections,
            iterations: 0,
        }
    } else {
        optimize_candidate(oracle, image, objective, initial.clone(), tcfg, &clean_texture)?
    };
    let mut iterations = best.iterations;
    rounds.push(record(0, &best, 1));

    let mut band_truncated = false;
    if !best.success && scfg.max_rounds > 0 && n0 > 0 {
        let mut field = theta_init(prior, scfg.band_radius)?;
        let mut rng = ChaCha8Rng::seed_from_u64(scfg.rng_seed);
        for round in 1..=scfg.max_rounds {
            let current = compose_adversarial(image, &best.mask, &best.texture)?;
            let g = grad_surrogate(oracle, &current, objective, &field.band)?;
            field = theta_update(&field, &g, scfg.beta)?;
            let sampled = sample_masks(&field, n0, scfg.samples_per_round, scfg.temperature, &mut rng);
            band_truncated |= sampled.truncated;
            let mut masks = sampled.masks;
            masks.push(project_theta(&field, n0));

            let warm = best.texture.clone();
            let results = par::map(scfg.execution, &masks, |m| {
                optimize_candidate(oracle, image, objective, m.clone(), tcfg, &warm)
            });
            for r in results {
                let c = r?;
                iterations += c.iterations;
                if c.beats(&best) {
                    best = c;
                }
            }
            rounds.push(record(round, &best, masks.len()));
            if best.success {
                break;
            }
        }
    }

    debug_assert!(best.mask.count() <= n0);
    Ok(AscOutcome {
        example: AdversarialExample {
            base: image.clone(),
            mask: best.mask,
            texture: best.texture,
            metadata: AttackMetadata {
                seed: scfg.rng_seed,
                iterations,
                final_value: best.value,
                success: best.success,
                detections: best.detections,
            },
        },
        rounds: rounds.clone(),
        band_truncated,
    })
}

fn record(round: usize, best: &Candidate, candidates: usize) -> RoundRecord {
    RoundRecord {
        round,
        best_value: best.value,
        mask_popcount: best.mask.count(),
        candidates,
        success: best.success,
    }
}

fn optimize_candidate(
    oracle: &dyn Oracle,
    image: &ImagePlane,
    objective: &Objective,
    mask: BinaryMask,
    tcfg: &TextureOptConfig,
    init: &PerturbationTexture,
) -> Result<Candidate> {
    // Start selected pixels from the warm texture, everything else from the base.
    let mut start = PerturbationTexture::from_image(image);
    for p in mask.indices() {
        start.copy_pixel_from(p, init.pixel(p));
    }
    let out = optimize_texture(oracle, image, &mask, objective, tcfg, &start)?;
    Ok(Candidate {
        mask,
        texture: out.texture,
        value: out.best_value,
        success: out.success,
        detections: out.detections,
        iterations: out.steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BBox, ObjectTarget};
    use crate::oracle::testutil::random_image;
    use crate::oracle::{ConstantOracle, EdgeDetector, LinearDetector};
    use proptest::prelude::*;

    fn field_from(theta: Vec<f64>, h: usize, w: usize) -> ThetaField {
        let f = ScalarField::from_vec(h, w, theta).unwrap();
        ThetaField { theta: f.clone(), theta0: f, band: BinaryMask::full(h, w), band_radius: 0 }
    }

    #[test]
    fn init_radius_zero_is_indicator() {
        let c = BinaryMask::from_indices(4, 4, [1, 6, 11]);
        let f = theta_init(&c, 0).unwrap();
        assert_eq!(f.band, c);
        for p in 0..16 {
            assert_eq!(f.theta0.data[p], if c.get_index(p) { 1.0 } else { 0.0 });
        }
        assert_eq!(f.theta, f.theta0);
        assert!(matches!(theta_init(&BinaryMask::empty(4, 4), 1), Err(AscError::DegeneratePrior(_))));
    }

    #[test]
    fn init_single_pixel_radius_two() {
        let c = BinaryMask::from_indices(7, 7, [24]);
        let f = theta_init(&c, 2).unwrap();
        assert_eq!(f.band.count(), 25);
        for r in 0..7i64 {
            for col in 0..7i64 {
                let d = (r - 3).abs().max((col - 3).abs());
                let expect = match d {
                    0 => 1.0,
                    1 => 0.5,
                    _ => 0.0,
                };
                assert_eq!(f.theta0.data[(r * 7 + col) as usize], expect);
                assert_eq!(f.band.get(r as usize, col as usize), d <= 2);
            }
        }
    }

    #[test]
    fn update_endpoints() {
        let c = BinaryMask::from_indices(5, 5, [12]);
        let f = theta_init(&c, 2).unwrap();
        let g = ScalarField::from_vec(5, 5, (0..25).map(|i| i as f64 / 25.0).collect()).unwrap();
        let same = theta_update(&f, &g, 0.0).unwrap();
        assert_eq!(same.theta, f.theta);
        let jump = theta_update(&f, &g, 1.0).unwrap();
        for p in 0..25 {
            assert_eq!(jump.theta.data[p], g.data[p] + f.theta0.data[p]);
        }
    }

    #[test]
    fn contraction_to_prior() {
        let c = BinaryMask::from_indices(5, 5, [6, 7, 8]);
        let mut f = theta_init(&c, 1).unwrap();
        let g = ScalarField::from_vec(5, 5, vec![0.9; 25]).unwrap();
        f = theta_update(&f, &g, 1.0).unwrap();
        let zero = ScalarField::zeros(5, 5);
        let dist = |f: &ThetaField| f.theta.data.iter().zip(&f.theta0.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let mut d = dist(&f);
        for _ in 0..20 {
            f = theta_update(&f, &zero, 0.5).unwrap();
            let next = dist(&f);
            assert!((next - 0.5 * d).abs() < 1e-12);
            d = next;
        }
        // Off-band pixels stay at zero.
        assert!(f.band.not().indices().all(|p| f.theta.data[p] == 0.0));
    }

    #[test]
    fn surrogate_cases() {
        let img = random_image(6, 6, 3);
        let obj = Objective::vanishing(ObjectTarget::new(BBox::new(0.0, 0.0, 6.0, 6.0), 0));
        let band = BinaryMask::rect(6, 6, 1, 1, 4, 4);
        let zero = grad_surrogate(&ConstantOracle::new(0.3), &img, &obj, &band).unwrap();
        assert!(zero.data.iter().all(|v| *v == 0.0));

        let det = LinearDetector::new(12);
        let s = grad_surrogate(&det, &img, &obj, &band).unwrap();
        let w = det.objectness_weights(6, 6, &obj).channel_abs_sum();
        let wmax = band.indices().map(|p| w[p]).fold(0.0, f64::max);
        for p in 0..36 {
            let expect = if band.get_index(p) { w[p] / wmax } else { 0.0 };
            assert!((s.data[p] - expect).abs() < 1e-12);
        }
        assert_eq!(band.indices().map(|p| s.data[p]).fold(0.0, f64::max), 1.0);
    }

    #[test]
    fn projection_rules() {
        let f = field_from((0..9).map(|i| 9.0 - i as f64).collect(), 3, 3);
        assert_eq!(project_theta(&f, 3), BinaryMask::from_indices(3, 3, [0, 1, 2]));
        let flat = field_from(vec![0.4; 9], 3, 3);
        assert_eq!(project_theta(&flat, 2), BinaryMask::from_indices(3, 3, [0, 1]));
        assert_eq!(project_theta(&flat, 50), BinaryMask::full(3, 3));
    }

    #[test]
    fn sampling_basics() {
        let c = BinaryMask::from_indices(6, 6, [14]);
        let f = theta_init(&c, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_masks(&f, 3, 0, 0.5, &mut rng).masks.is_empty());
        let s = sample_masks(&f, 20, 4, 0.5, &mut rng);
        assert!(s.truncated);
        assert!(s.masks.iter().all(|m| *m == f.band));
        let a = sample_masks(&f, 4, 10, 0.5, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_masks(&f, 4, 10, 0.5, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn inclusion_frequency_follows_theta() {
        let f = field_from((0..16).map(|i| i as f64 / 15.0).collect(), 4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = sample_masks(&f, 4, 1000, 0.5, &mut rng);
        let top = s.masks.iter().filter(|m| m.get_index(15)).count();
        let bottom = s.masks.iter().filter(|m| m.get_index(0)).count();
        assert!(top >= bottom, "top {top} bottom {bottom}");
    }

    proptest! {
        #[test]
        fn floor_temperature_is_projection(theta in proptest::collection::vec(0.0f64..2.0, 25), n0 in 0usize..25, seed: u64) {
            let f = field_from(theta, 5, 5);
            let s = sample_masks(&f, n0, 3, 1e-9, &mut ChaCha8Rng::seed_from_u64(seed));
            for m in &s.masks {
                prop_assert_eq!(m, &project_theta(&f, n0));
            }
        }

        #[test]
        fn samples_stay_in_band(seed: u64, n0 in 1usize..30, pix in 0usize..64, radius in 0usize..3) {
            let c = BinaryMask::from_indices(8, 8, [pix, (pix * 7) % 64]);
            let f = theta_init(&c, radius).unwrap();
            let s = sample_masks(&f, n0, 5, 0.5, &mut ChaCha8Rng::seed_from_u64(seed));
            for m in &s.masks {
                prop_assert!(m.is_subset_of(&f.band));
                prop_assert_eq!(m.count(), n0.min(f.band.count()));
            }
        }
    }

    fn square_scene() -> (ImagePlane, Objective) {
        let seg = BinaryMask::rect(16, 16, 3, 3, 10, 10);
        let mut field = crate::model::Field3::filled(16, 16, 0.85);
        for p in seg.indices() {
            field.pixel_mut(p).fill(0.15);
        }
        let img = ImagePlane::new(field).unwrap();
        (img, Objective::vanishing(ObjectTarget::from_segmentation(seg, 0).unwrap()))
    }

    #[test]
    fn early_exit_when_prior_suffices() {
        let (img, obj) = square_scene();
        // No detections at all: the first evaluation already counts as success.
        let out = asc_attack(&ConstantOracle::new(0.0), &img, &obj, AttackBudget::Absolute(20), &SamplerConfig::default(), &TextureOptConfig::default()).unwrap();
        assert_eq!(out.rounds.len(), 1);
        let seg = obj.target.segmentation.as_ref().unwrap();
        assert_eq!(out.example.mask, contour_from_segmentation(seg, 20).unwrap());
        assert!(out.example.metadata.success);
    }

    #[test]
    fn zero_rounds_is_fasc() {
        let (img, obj) = square_scene();
        let det = EdgeDetector::new(2);
        let tcfg = TextureOptConfig { max_steps: 15, ..Default::default() };
        let scfg = SamplerConfig { max_rounds: 0, ..Default::default() };
        let out = asc_attack(&det, &img, &obj, AttackBudget::FractionOfArea(0.2), &scfg, &tcfg).unwrap();
        let seg = obj.target.segmentation.as_ref().unwrap();
        let mask = contour_from_segmentation(seg, 20).unwrap();
        let fasc = optimize_texture(&det, &img, &mask, &obj, &tcfg, &PerturbationTexture::from_image(&img)).unwrap();
        assert_eq!(out.example.mask, mask);
        assert_eq!(out.example.texture, fasc.texture);
        assert_eq!(out.example.metadata.final_value, fasc.best_value);
    }

    #[test]
    fn rounds_respect_budget_and_are_deterministic() {
        let (img, obj) = square_scene();
        let det = LinearDetector::new(4).with_bias(6.0).with_weight_scale(0.05);
        let tcfg = TextureOptConfig { max_steps: 10, ..Default::default() };
        let run = |exec| {
            let scfg = SamplerConfig { max_rounds: 3, rng_seed: 77, execution: exec, ..Default::default() };
            asc_attack(&det, &img, &obj, AttackBudget::Absolute(9), &scfg, &tcfg).unwrap()
        };
        let a = run(Execution::Parallel);
        let b = run(Execution::Sequential);
        assert_eq!(a, b);
        assert_eq!(a.rounds.len(), 4);
        assert!(a.example.l0() <= 9);
        assert!(a.rounds.windows(2).all(|w| w[1].best_value >= w[0].best_value));
        let json = rounds_json(&a.rounds);
        assert!(json.contains("\"mask_popcount\": 9"));
    }

    #[test]
    fn missing_segmentation_is_rejected() {
        let img = random_image(8, 8, 1);
        let obj = Objective::vanishing(ObjectTarget::new(BBox::new(1.0, 1.0, 4.0, 4.0), 0));
        let err = asc_attack(&ConstantOracle::new(0.0), &img, &obj, AttackBudget::Absolute(3), &SamplerConfig::default(), &TextureOptConfig::default()).unwrap_err();
        assert!(matches!(err, AscError::MissingPrior(_)));
    }
}
