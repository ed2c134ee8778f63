//! Acceptance suite. Every check prints one PASS or FAIL line; the process
//! exits nonzero if any check fails.
//!
//! The reference computations here (finite differences, corner-form CIoU,
//! ring depths, top-k ranking) are written from scratch and do not call the
//! engine code they are compared against.

use std::f64::consts::PI;
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use asc_core::analysis::{
    ciou, ciou_distance_metric, iou, nac_heatmap, nac_normalize, region_partition, NacAreas, RegionKind,
    SuccessCriterion, DEFAULT_TILE_SIZE,
};
use asc_core::baselines::{brute_force_attack, cw_l0_attack, pgd0_attack, BruteForceLimit, CwL0Config, Pgd0Config};
use asc_core::model::{
    compose_adversarial, resolve_budget, AttackBudget, BBox, BinaryMask, Detection, Field3, ImagePlane, ObjectTarget,
    PerturbationTexture, ScalarField, CHANNELS,
};
use asc_core::oracle::edge::SUGGESTED_STEP_SIZE;
use asc_core::oracle::{
    Capabilities, EdgeDetector, ForwardOnly, LinearDetector, Objective, ObjectiveKind, Oracle, OracleReport,
};
use asc_core::par::Execution;
use asc_core::patterns::{contour_from_segmentation, generate_pattern, prior_contour, PatternKind, PatternSpec};
use asc_core::protocol::{
    decode_field, encode_field, encode_image, Message, Op, QueryPayload, RemoteOracle, ServerOptions, TcpServer,
    WireObjective,
};
use asc_core::runner::{run_batch, run_method, Method, MethodConfig};
use asc_core::sampler::{
    asc_from_prior, project_theta, sample_masks, theta_init, theta_update, SamplerConfig, ThetaField,
    TEMPERATURE_FLOOR,
};
use asc_core::scenes::{scene_suite, SceneConfig};
use asc_core::texture::{optimize_texture, TextureOptConfig};
use asc_core::AscError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<T>(r: asc_core::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImagePlane {
    ImagePlane::from_vec(h, w, (0..h * w * CHANNELS).map(|_| rng.gen_range(0.02..0.98)).collect()).unwrap()
}

/// A filled rectangle or ellipse strictly inside an `h`×`w` image.
fn random_shape(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BinaryMask {
    let rh = rng.gen_range(2..=h - 2);
    let rw = rng.gen_range(2..=w - 2);
    let r0 = rng.gen_range(0..=h - rh);
    let c0 = rng.gen_range(0..=w - rw);
    if rng.gen_bool(0.5) {
        return BinaryMask::rect(h, w, r0 as i64, c0 as i64, rh as i64, rw as i64);
    }
    let (cy, cx) = (r0 as f64 + rh as f64 / 2.0, c0 as f64 + rw as f64 / 2.0);
    let (ay, ax) = (rh as f64 / 2.0, rw as f64 / 2.0);
    let mut m = BinaryMask::empty(h, w);
    for r in 0..h {
        for c in 0..w {
            let dy = (r as f64 + 0.5 - cy) / ay;
            let dx = (c as f64 + 0.5 - cx) / ax;
            m.set(r, c, dy * dy + dx * dx <= 1.0);
        }
    }
    if m.is_empty() {
        m.set(r0 + rh / 2, c0 + rw / 2, true);
    }
    m
}

fn random_target(rng: &mut ChaCha8Rng, h: usize, w: usize, classes: u32) -> ObjectTarget {
    let seg = random_shape(rng, h, w);
    let target = ObjectTarget::from_segmentation(seg.clone(), rng.gen_range(0..classes)).unwrap();
    if rng.gen_bool(0.5) {
        let (r0, _, r1, _) = seg.bounds().unwrap();
        let mid = (r0 + r1) / 2;
        let top = seg.and(&BinaryMask::rect(h, w, 0, 0, mid as i64, w as i64));
        let bottom = seg.and_not(&top);
        let parts: Vec<BinaryMask> = [top, bottom].into_iter().filter(|m| !m.is_empty()).collect();
        return target.with_parts(parts);
    }
    target
}

fn random_budget(rng: &mut ChaCha8Rng, area: usize) -> AttackBudget {
    if rng.gen_bool(0.5) {
        AttackBudget::Absolute(rng.gen_range(0..=area + 5))
    } else {
        AttackBudget::FractionOfArea(rng.gen_range(0.001..=1.0))
    }
}

// ---------------------------------------------------------------------------

fn l0_constraint() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x10);
    let mut emitted = 0usize;
    for case in 0..1000 {
        let (h, w) = (rng.gen_range(8..=40), rng.gen_range(8..=40));
        let target = random_target(&mut rng, h, w, 4);
        let seg = target.segmentation.clone().unwrap();
        let n0 = e2s(resolve_budget(random_budget(&mut rng, seg.count()), &target))?;
        let kind = PatternKind::ALL[case % PatternKind::ALL.len()];
        let spec = PatternSpec { kind, budget: n0, min_grid_pitch: rng.gen_range(1..=4) };
        let mask = e2s(generate_pattern(&spec, &target, h, w)).map_err(|e| format!("case {case} {kind}: {e}"))?;
        ensure(mask.count() <= n0, || format!("case {case}: {kind} emitted {} > {n0}", mask.count()))?;

        let contour = e2s(contour_from_segmentation(&seg, n0))?;
        ensure(contour.count() <= n0, || format!("case {case}: contour {} > {n0}", contour.count()))?;
        let prior = e2s(prior_contour(&seg, n0.max(1)))?;
        let field = e2s(theta_init(&prior, rng.gen_range(0..=3)))?;
        let surrogate = ScalarField::from_vec(h, w, (0..h * w).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let field = e2s(theta_update(&field, &surrogate, rng.gen()))?;
        let projected = project_theta(&field, n0);
        ensure(projected.count() <= n0, || format!("case {case}: projection {} > {n0}", projected.count()))?;
        let tau = [TEMPERATURE_FLOOR, 0.1, 0.5, 3.0][case % 4];
        for m in sample_masks(&field, n0, 3, tau, &mut rng).masks {
            ensure(m.count() <= n0, || format!("case {case}: sample {} > {n0}", m.count()))?;
        }
        emitted += 6;
    }

    // Every attack path, on small images so the whole sweep stays cheap.
    let mut cfg = MethodConfig::default();
    cfg.texture.max_steps = 8;
    cfg.sampler.max_rounds = 2;
    cfg.sampler.samples_per_round = 3;
    cfg.sampler.execution = Execution::Sequential;
    cfg.pgd0.steps = 8;
    cfg.cwl0.inner_steps = 4;
    let mut methods = vec![Method::Fasc, Method::Oasc, Method::Pgd0, Method::CwL0];
    methods.extend(PatternKind::ALL.map(Method::Pattern));
    for case in 0..40u64 {
        let (h, w) = (rng.gen_range(8..=14), rng.gen_range(8..=14));
        let image = random_image(&mut rng, h, w);
        let target = random_target(&mut rng, h, w, 4);
        let budget = random_budget(&mut rng, target.segmentation.as_ref().unwrap().count());
        let n0 = e2s(resolve_budget(budget, &target))?;
        let oracle: Box<dyn Oracle> =
            if case % 2 == 0 { Box::new(LinearDetector::new(case)) } else { Box::new(EdgeDetector::new(case)) };
        let objective = Objective::vanishing(target);
        cfg.sampler.rng_seed = case;
        for &m in &methods {
            let run = e2s(run_method(oracle.as_ref(), &image, &objective, budget, m, &cfg))?;
            ensure(run.example.mask.count() <= n0 && run.result.l0 <= n0, || {
                format!("case {case}: {m} emitted {} > {n0}", run.example.mask.count())
            })?;
            for r in run.result.rounds.iter().flatten() {
                ensure(r.mask_popcount <= n0, || format!("case {case}: {m} round {} mask {} > {n0}", r.round, r.mask_popcount))?;
            }
            emitted += 1;
        }
    }
    Ok(format!("{emitted} masks checked, none over budget"))
}

// ---------------------------------------------------------------------------

fn fd_worst(oracle: &dyn Oracle, image: &ImagePlane, objective: &Objective, rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let grad = e2s(oracle.gradient(image, objective))?;
    let (h, w) = image.dims();
    let eval = |v: Vec<f64>| -> Result<f64, String> {
        let img = ImagePlane::new(Field3::from_vec(h, w, v).unwrap()).unwrap();
        Ok(e2s(oracle.evaluate(&img, objective))?.value)
    };
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let i = rng.gen_range(0..image.as_slice().len());
        let mut plus = image.as_slice().to_vec();
        let mut minus = plus.clone();
        plus[i] += step;
        minus[i] -= step;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let an = grad.as_slice()[i];
        let scale = an.abs().max(fd.abs());
        let err = if scale < 1e-9 { 0.0 } else { (fd - an).abs() / scale };
        worst = worst.max(err);
    }
    Ok(worst)
}

fn gradient_correctness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x20);
    let oracles: Vec<(&str, Box<dyn Oracle>)> =
        vec![("linear", Box::new(LinearDetector::new(5))), ("edge", Box::new(EdgeDetector::new(5)))];
    let mut worst: f64 = 0.0;
    let mut combos = 0;
    for (name, oracle) in &oracles {
        for kind in oracle.capabilities().objectives {
            for img_seed in 0..3 {
                let image = random_image(&mut ChaCha8Rng::seed_from_u64(100 + img_seed), 8, 8);
                let target = ObjectTarget::new(BBox::new(1.0, 1.5, 5.5, 5.0), 1);
                let err = fd_worst(oracle.as_ref(), &image, &Objective::new(kind, target), &mut rng)?;
                ensure(err < 1e-4, || format!("{name}/{}: relative error {err:.2e}", kind.name()))?;
                worst = worst.max(err);
                combos += 1;
            }
        }
    }
    Ok(format!("{combos} oracle/objective/image combinations, worst relative error {worst:.2e}"))
}

// ---------------------------------------------------------------------------

fn brute_force_equivalence() -> Check {
    let never = SuccessCriterion { iou_threshold: 0.0, score_threshold: 0.0 };
    let tcfg = TextureOptConfig { step_size: 0.5, max_steps: 200, early_stop: false, record_trace: false, success: never };
    let mut counts = [[0usize; 3]; 3];
    for n0 in 1..=3usize {
        for inst in 0..20u64 {
            let seed = 1000 * n0 as u64 + inst;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let image = ImagePlane::from_vec(4, 4, (0..48).map(|_| rng.gen::<f64>()).collect()).unwrap();
            let det = LinearDetector::new(seed);
            let full = BinaryMask::full(4, 4);
            let objective = Objective::vanishing(e2s(ObjectTarget::from_segmentation(full.clone(), 0))?);

            let best = e2s(brute_force_attack(&det, &image, &objective, n0, &BruteForceLimit::default(), &tcfg))?.value;
            let pgd = e2s(pgd0_attack(&det, &image, &objective, n0, &Pgd0Config { steps: 1000, step_size: 0.05, success: never }))?;
            let cw = e2s(cw_l0_attack(
                &det,
                &image,
                &objective,
                n0,
                &CwL0Config { inner_steps: 300, step_size: 0.5, success: never, ..Default::default() },
            ))?;
            let scfg = SamplerConfig { rng_seed: seed, samples_per_round: 16, max_rounds: 40, ..Default::default() };
            let initial = e2s(contour_from_segmentation(&full, n0))?;
            let oasc = e2s(asc_from_prior(&det, &image, &objective, n0, &initial, &full, &scfg, &tcfg, &mut Vec::new()))?;

            let values = [pgd.metadata.final_value, cw.metadata.final_value, oasc.example.metadata.final_value];
            for (k, v) in values.iter().enumerate() {
                if best - v <= 0.01 * best.abs() {
                    counts[n0 - 1][k] += 1;
                }
            }
        }
    }
    let names = ["PGD0", "C&W-l0", "O-ASC"];
    let detail = (0..3)
        .map(|k| format!("{} {}/{}/{}", names[k], counts[0][k], counts[1][k], counts[2][k]))
        .collect::<Vec<_>>()
        .join("; ");
    let failing: Vec<&str> = (0..3).filter(|&k| counts.iter().any(|c| c[k] < 18)).map(|k| names[k]).collect();
    if failing.is_empty() {
        Ok(format!("within 1% of optimum for n0=1/2/3: {detail}"))
    } else {
        Err(format!("below 18/20 for {}: {detail}", failing.join(", ")))
    }
}

// ---------------------------------------------------------------------------

/// Expected contour for a filled rectangle: pixels ordered by ring depth,
/// then raster order, first `n0` kept.
fn analytic_contour(h: usize, w: usize, rect: (usize, usize, usize, usize), n0: usize) -> BinaryMask {
    let (r0, c0, rh, rw) = rect;
    let mut px: Vec<(usize, usize, usize)> = Vec::new();
    for r in r0..r0 + rh {
        for c in c0..c0 + rw {
            let depth = (r - r0).min(r0 + rh - 1 - r).min(c - c0).min(c0 + rw - 1 - c);
            px.push((depth, r, c));
        }
    }
    px.sort();
    BinaryMask::from_indices(h, w, px.into_iter().take(n0).map(|(_, r, c)| r * w + c))
}

fn morphology_fixtures() -> Check {
    let (h, w) = (16, 16);
    let ten = BinaryMask::rect(h, w, 3, 3, 10, 10);
    let ring = e2s(contour_from_segmentation(&ten, 36))?;
    ensure(ring.count() == 36, || format!("10x10 ring has {} pixels", ring.count()))?;
    ensure(ring == analytic_contour(h, w, (3, 3, 10, 10), 36), || "10x10 ring differs from the border".into())?;

    let mut cases = 0;
    for rh in 1..=12 {
        for rw in 1..=12 {
            for &(r0, c0) in &[(0, 0), (2, 3), (16 - rh, 16 - rw)] {
                let seg = BinaryMask::rect(h, w, r0 as i64, c0 as i64, rh as i64, rw as i64);
                let area = rh * rw;
                let outer = if rh <= 2 || rw <= 2 { area } else { 2 * (rh + rw) - 4 };
                for n0 in [0, 1, outer / 2, outer, outer + 3, area, area + 10] {
                    let got = e2s(contour_from_segmentation(&seg, n0))?;
                    let want = analytic_contour(h, w, (r0, c0, rh, rw), n0);
                    ensure(got == want, || format!("{rh}x{rw} at ({r0},{c0}), n0={n0}"))?;
                    ensure(got == e2s(contour_from_segmentation(&seg, n0))?, || "nondeterministic trim".into())?;
                    cases += 1;
                }
            }
        }
    }
    Ok(format!("10x10 gives a 36-pixel ring; {cases} rectangle/budget cases match pixel-exactly"))
}

// ---------------------------------------------------------------------------

fn texture_contracts() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x50);
    let never = SuccessCriterion { iou_threshold: 0.0, score_threshold: 0.0 };
    let mut checked = 0;
    for case in 0..24u64 {
        let (h, w) = (10, 10);
        let image = random_image(&mut rng, h, w);
        let (oracle, step): (Box<dyn Oracle>, f64) = if case % 2 == 0 {
            (Box::new(LinearDetector::new(case)), 0.05)
        } else {
            (Box::new(EdgeDetector::new(case)), SUGGESTED_STEP_SIZE)
        };
        let target = ObjectTarget::new(BBox::new(2.0, 2.0, 6.0, 6.0), 1);
        let kind = ObjectiveKind::ALL[(case / 2) as usize % 3];
        let objective = Objective::new(kind, target);
        let mask = BinaryMask::from_bits(h, w, (0..h * w).map(|_| rng.gen_bool(0.3)).collect()).unwrap();
        let init = random_image(&mut rng, h, w);
        let init = PerturbationTexture::from_image(&init);
        let tcfg = TextureOptConfig { step_size: step, max_steps: 25, early_stop: false, record_trace: true, success: never };
        let out = e2s(optimize_texture(oracle.as_ref(), &image, &mask, &objective, &tcfg, &init))?;

        let t = out.texture.field().as_slice();
        ensure(t.iter().all(|v| (0.0..=1.0).contains(v)), || format!("case {case}: texture outside [0, 1]"))?;
        let adv = e2s(compose_adversarial(&image, &mask, &out.texture))?;
        for p in mask.not().indices() {
            ensure(out.texture.pixel(p).iter().zip(init.pixel(p)).all(|(a, b)| a.to_bits() == b.to_bits()), || {
                format!("case {case}: off-mask texture pixel {p} changed")
            })?;
            ensure(adv.pixel(p).iter().zip(image.pixel(p)).all(|(a, b)| a.to_bits() == b.to_bits()), || {
                format!("case {case}: off-mask image pixel {p} changed")
            })?;
        }

        let mut previous = f64::NEG_INFINITY;
        for steps in 0..=12 {
            let cfg = TextureOptConfig { max_steps: steps, record_trace: false, ..tcfg };
            let best = e2s(optimize_texture(oracle.as_ref(), &image, &mask, &objective, &cfg, &init))?.best_value;
            ensure(best >= previous, || format!("case {case}: best value fell from {previous} to {best} at {steps} steps"))?;
            previous = best;
        }
        checked += 1;
    }

    // Convergence to the exact optimum of the linear detector. The gradient
    // of log(1 - s) is -s·w, so an entry moves at least α·s_min·|w| per step
    // until it is clipped. The bias is chosen so the logit stays in
    // [1, 1 + Σ|w|] for every image: s_min = σ(1), and log(1 - s) never
    // reaches the saturation floor. "Enough steps" then follows from the
    // smallest masked weight.
    let mut worst: f64 = 0.0;
    let mut longest = 0;
    for seed in 0..10u64 {
        let objective = Objective::vanishing(ObjectTarget::new(BBox::new(1.0, 2.0, 7.0, 6.0), 0));
        let probe = LinearDetector::new(seed).with_weight_scale(0.2);
        let weights = probe.objectness_weights(10, 10, &objective);
        let negative: f64 = weights.as_slice().iter().filter(|w| **w < 0.0).map(|w| -w).sum();
        let det = probe.with_bias(1.0 + negative);
        let s_min = 1.0 / (1.0 + (-1.0f64).exp());
        let image = random_image(&mut rng, 10, 10);
        let mask = BinaryMask::from_bits(10, 10, (0..100).map(|_| rng.gen_bool(0.4)).collect()).unwrap();
        let w_min = mask
            .indices()
            .flat_map(|p| weights.pixel(p).to_vec())
            .filter(|w| *w != 0.0)
            .fold(f64::INFINITY, |m, w| m.min(w.abs()));
        let alpha = 0.05;
        let steps = (1.0 / (alpha * s_min * w_min)).ceil() as usize + 1;
        ensure(steps <= 2_000_000, || format!("seed {seed}: bound needs {steps} steps"))?;
        longest = longest.max(steps);
        let tcfg = TextureOptConfig { step_size: alpha, max_steps: steps, early_stop: false, record_trace: false, success: never };
        let out = e2s(optimize_texture(&det, &image, &mask, &objective, &tcfg, &PerturbationTexture::from_image(&image)))?;
        let exact = det.closed_form_texture(&image, &objective, &mask).ok_or("no closed form")?;
        for p in mask.indices() {
            for (a, b) in out.texture.pixel(p).iter().zip(exact.pixel(p)) {
                worst = worst.max((a - b).abs());
            }
        }
        ensure(worst < alpha, || format!("seed {seed}: |t - t*| = {worst} >= step {alpha} after {steps} steps"))?;
    }
    Ok(format!("{checked} cases bounded, untouched off mask and monotone; max |t - t*| = {worst:.2e} within {longest} steps"))
}

// ---------------------------------------------------------------------------

fn random_field(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Result<ThetaField, String> {
    let seg = random_shape(rng, h, w);
    let field = e2s(theta_init(&e2s(prior_contour(&seg, rng.gen_range(1..=seg.count())))?, rng.gen_range(0..=3)))?;
    let g = ScalarField::from_vec(h, w, (0..h * w).map(|_| rng.gen::<f64>()).collect()).unwrap();
    e2s(theta_update(&field, &g, rng.gen()))
}

fn top_k(field: &ThetaField, k: usize) -> BinaryMask {
    let (h, w) = field.dims();
    let mut px: Vec<(f64, usize)> = (0..h * w).filter(|&p| field.band.get_index(p)).map(|p| (field.theta.data[p], p)).collect();
    px.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    BinaryMask::from_indices(h, w, px.into_iter().take(k).map(|(_, p)| p))
}

fn sampler_contracts() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x60);
    let (h, w) = (14, 14);
    for case in 0..50 {
        let field = random_field(&mut rng, h, w)?;
        let g = ScalarField::from_vec(h, w, (0..h * w).map(|_| rng.gen::<f64>()).collect()).unwrap();
        for beta in [0.0, 0.5, 1.0] {
            let next = e2s(theta_update(&field, &g, beta))?;
            for p in 0..h * w {
                let want = if !field.band.get_index(p) {
                    0.0
                } else if beta == 0.0 {
                    field.theta.data[p]
                } else if beta == 1.0 {
                    g.data[p] + field.theta0.data[p]
                } else {
                    0.5 * field.theta.data[p] + 0.5 * (g.data[p] + field.theta0.data[p])
                };
                ensure(next.theta.data[p].to_bits() == want.to_bits(), || {
                    format!("case {case}: beta {beta} pixel {p}: {} != {want}", next.theta.data[p])
                })?;
            }
        }

        let zero = ScalarField::zeros(h, w);
        for beta in [0.5, 0.3] {
            let mut current = field.clone();
            for step in 1..=30 {
                current = e2s(theta_update(&current, &zero, beta))?;
                let factor = (1.0 - beta).powi(step);
                for p in field.band.indices() {
                    let want = factor * (field.theta.data[p] - field.theta0.data[p]);
                    let got = current.theta.data[p] - field.theta0.data[p];
                    ensure((got - want).abs() <= 1e-12, || format!("case {case}: beta {beta} step {step}: {got} vs {want}"))?;
                }
            }
        }

        let band = field.band.count();
        let n0 = rng.gen_range(0..=band + 4);
        let k = n0.min(band);
        let reference = top_k(&field, k);
        ensure(project_theta(&field, n0) == reference, || format!("case {case}: projection is not the top-{k} set"))?;
        for tau in [TEMPERATURE_FLOOR, 1e-9] {
            let floor = sample_masks(&field, n0, 4, tau, &mut rng);
            ensure(floor.masks.iter().all(|m| *m == reference), || format!("case {case}: tau {tau} differs from projection"))?;
        }
        for tau in [0.05, 0.5, 2.0, 20.0] {
            for m in sample_masks(&field, n0, 6, tau, &mut rng).masks {
                ensure(m.is_subset_of(&field.band) && m.count() == k, || format!("case {case}: tau {tau} sample left band"))?;
            }
        }
    }
    Ok("50 fields: update exact at beta 0/0.5/1, contraction within 1e-12, floor sampling equals projection, samples in band".into())
}

// ---------------------------------------------------------------------------

fn trend_replication() -> Check {
    let seed = 7;
    let det = EdgeDetector::new(seed);
    let scenes = scene_suite(seed, 50, &SceneConfig::default());
    let methods = [
        Method::Oasc,
        Method::Fasc,
        Method::Pattern(PatternKind::SmallGrid),
        Method::Pattern(PatternKind::TwoByTwoGrid),
        Method::Pattern(PatternKind::AdvPatch),
    ];
    let mut cfg = MethodConfig::default();
    cfg.texture.step_size = SUGGESTED_STEP_SIZE;
    let report = e2s(run_batch(
        &det,
        &scenes,
        ObjectiveKind::Vanishing,
        AttackBudget::FractionOfArea(0.05),
        &methods,
        &cfg,
        Execution::Parallel,
    ))?;
    let n = |m: Method| report.summary_for(m).map(|s| s.successes).unwrap_or(0);
    let (oasc, fasc) = (n(Method::Oasc), n(Method::Fasc));
    let grid = n(Method::Pattern(PatternKind::SmallGrid)).max(n(Method::Pattern(PatternKind::TwoByTwoGrid)));
    let patch = n(Method::Pattern(PatternKind::AdvPatch));

    let wins = asc_core::par::map(Execution::Parallel, &scenes, |scene| {
        let objective = Objective::vanishing(scene.target.clone());
        let partition = region_partition(&scene.target, 1).ok()?;
        let areas = NacAreas::Grid { tile_size: DEFAULT_TILE_SIZE, partition: Some(partition) };
        let rep = nac_heatmap(&det, &scene.image, &objective, &areas, &cfg.texture, Execution::Sequential).ok()?;
        Some(rep.mean_nac(RegionKind::Contour)? > rep.mean_nac(RegionKind::Inside)?)
    });
    let contour_wins = wins.iter().filter(|w| **w == Some(true)).count();
    let detail = format!(
        "successes of 50: O-ASC {oasc}, F-ASC {fasc}, best grid {grid}, AdvPatch {patch}; contour nAC > interior in {contour_wins}/50"
    );
    if oasc >= fasc && fasc >= grid && grid >= patch && contour_wins >= 45 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------

/// CIoU from corner coordinates.
fn ciou_corners(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = (a.x, a.y, a.x + a.w, a.y + a.h);
    let (bx1, by1, bx2, by2) = (b.x, b.y, b.x + b.w, b.y + b.h);
    let inter = (ax2.min(bx2) - ax1.max(bx1)).max(0.0) * (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
    let iou = inter / union;
    let rho2 = ((ax1 + ax2) / 2.0 - (bx1 + bx2) / 2.0).powi(2) + ((ay1 + ay2) / 2.0 - (by1 + by2) / 2.0).powi(2);
    let diag2 = (ax2.max(bx2) - ax1.min(bx1)).powi(2) + (ay2.max(by2) - ay1.min(by1)).powi(2);
    let v = 4.0 / (PI * PI) * ((b.w / b.h).atan() - (a.w / a.h).atan()).powi(2);
    let alpha = if (1.0 - iou) + v > 0.0 { v / ((1.0 - iou) + v) } else { 0.0 };
    iou - rho2 / diag2 - alpha * v
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    BBox::new(rng.gen_range(-5.0..40.0), rng.gen_range(-5.0..40.0), rng.gen_range(0.5..30.0), rng.gen_range(0.5..30.0))
}

fn metrics() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x80);
    for _ in 0..100 {
        let a = random_box(&mut rng);
        ensure(e2s(iou(&a, &a))? == 1.0, || format!("IoU of {a:?} with itself"))?;
        ensure((e2s(ciou(&a, &a))? - 1.0).abs() < 1e-12, || format!("CIoU of {a:?} with itself"))?;
        let far = BBox::new(a.x + a.w + 1.0, a.y, a.w * 1.3, a.h * 0.7);
        ensure(e2s(iou(&a, &far))? == 0.0, || "disjoint IoU not 0".into())?;
        ensure(e2s(ciou(&far, &a))? < 0.0, || "disjoint CIoU not negative".into())?;
        let det = [Detection { bbox: far, score: 0.9, category: 0 }];
        ensure(ciou_distance_metric(&det, &ObjectTarget::new(a, 0)) == 0.0, || "negative CIoU not clamped to 0".into())?;
    }
    ensure(ciou_distance_metric(&[], &ObjectTarget::new(BBox::new(0.0, 0.0, 1.0, 1.0), 0)) == 0.0, || {
        "no detection should score 0".into()
    })?;

    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let a = random_box(&mut rng);
        let b = if i % 3 == 0 {
            BBox::new(a.x + rng.gen_range(-3.0..3.0), a.y + rng.gen_range(-3.0..3.0), a.w * rng.gen_range(0.5..2.0), a.h)
        } else {
            random_box(&mut rng)
        };
        let diff = (e2s(ciou(&a, &b))? - ciou_corners(&a, &b)).abs();
        worst = worst.max(diff);
        ensure(diff <= 1e-9, || format!("CIoU {a:?} vs {b:?} differs by {diff:e}"))?;
    }

    for _ in 0..100 {
        let n = rng.gen_range(2..40);
        let ac: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..5.0)).collect();
        let min = ac.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = ac.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let got = e2s(nac_normalize(&ac))?;
        for (g, a) in got.iter().zip(&ac) {
            let want = (a - min) / (max - min);
            ensure(g.to_bits() == want.to_bits(), || format!("nAC {g} != {want}"))?;
        }
        ensure(got.contains(&0.0) && got.contains(&1.0), || "nAC range not [0, 1]".into())?;
    }
    ensure(e2s(nac_normalize(&[0.7; 5]))? == vec![0.0; 5], || "constant AC should normalize to 0".into())?;
    Ok(format!("identities hold; worst CIoU gap vs corner form {worst:.1e}; nAC normalization exact"))
}

// ---------------------------------------------------------------------------

/// Supports only vanishing and fails every evaluation.
struct BrokenOracle;

impl Oracle for BrokenOracle {
    fn capabilities(&self) -> Capabilities {
        Capabilities { eval: true, grad: true, objectives: vec![ObjectiveKind::Vanishing] }
    }
    fn evaluate(&self, _: &ImagePlane, _: &Objective) -> asc_core::Result<OracleReport> {
        Err(AscError::NumericFailure { step: 0, detail: "backend exploded".into() })
    }
    fn evaluate_with_gradient(&self, image: &ImagePlane, objective: &Objective) -> asc_core::Result<OracleReport> {
        self.evaluate(image, objective)
    }
}

fn error_code(reply: &Message) -> Option<u64> {
    (reply.op == Op::Error).then(|| reply.payload["code"].as_u64()).flatten()
}

fn f32_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImagePlane {
    ImagePlane::from_vec(h, w, (0..h * w * CHANNELS).map(|_| rng.gen::<f32>() as f64).collect()).unwrap()
}

fn protocol() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x90);
    for i in 0..100 {
        let (h, w) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
        let values: Vec<f64> = (0..h * w * CHANNELS).map(|_| (rng.gen::<f32>() - 0.5) * 10f32.powi(rng.gen_range(-6..6))).map(f64::from).collect();
        let field = Field3::from_vec(h, w, values).unwrap();
        let back = e2s(decode_field(&encode_field(&field)))?;
        ensure(back.dims() == field.dims(), || format!("tensor {i}: dims changed"))?;
        ensure(back.as_slice().iter().zip(field.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits()), || {
            format!("tensor {i}: values changed")
        })?;
    }

    let timeout = Duration::from_secs(10);
    let locals: Vec<Arc<dyn Oracle>> = vec![Arc::new(LinearDetector::new(9)), Arc::new(EdgeDetector::new(9))];
    let mut worst: f64 = 0.0;
    for local in &locals {
        let mut server = e2s(TcpServer::bind(local.clone(), "127.0.0.1:0", ServerOptions::default()))?;
        let remote = e2s(RemoteOracle::connect_tcp(&server.local_addr().to_string(), timeout))?;
        for _ in 0..5 {
            let image = f32_image(&mut rng, 12, 12);
            for kind in ObjectiveKind::ALL {
                let obj = Objective::new(kind, ObjectTarget::new(BBox::new(2.0, 3.0, 7.0, 6.0), 1));
                let a = e2s(local.evaluate_with_gradient(&image, &obj))?;
                let b = e2s(remote.evaluate_with_gradient(&image, &obj))?;
                let rel = |x: f64, y: f64| if x == y { 0.0 } else { (x - y).abs() / x.abs().max(y.abs()) };
                worst = worst.max(rel(a.value, b.value));
                for (x, y) in a.grad.unwrap().as_slice().iter().zip(b.grad.unwrap().as_slice()) {
                    worst = worst.max(rel(*x, *y));
                }
                ensure(worst <= 1e-6, || format!("loopback differs from local by {worst:e} ({})", kind.name()))?;
            }
        }
        let _ = remote.close();
        server.shutdown();
    }

    let image = f32_image(&mut rng, 8, 8);
    let query = |id: u64, op: Op, kind: ObjectiveKind| {
        let obj = Objective::new(kind, ObjectTarget::new(BBox::new(1.0, 1.0, 5.0, 5.0), 0));
        Message::new(id, op, QueryPayload { image: encode_image(&image), objective: WireObjective::from(&obj) }).to_line()
    };
    let mut probes = Vec::new();
    let mut broken = e2s(TcpServer::bind(Arc::new(BrokenOracle), "127.0.0.1:0", ServerOptions::default()))?;
    let client = e2s(RemoteOracle::connect_tcp(&broken.local_addr().to_string(), timeout))?;
    let mut bad_dtype = QueryPayload {
        image: encode_image(&image),
        objective: WireObjective::from(&Objective::vanishing(ObjectTarget::new(BBox::new(1.0, 1.0, 5.0, 5.0), 0))),
    };
    bad_dtype.image.dtype = "f16".into();
    probes.push(("malformed frame", e2s(client.raw_exchange("{not json\n"))?, 1));
    probes.push(("bad tensor", e2s(client.raw_exchange(&Message::new(7, Op::Eval, bad_dtype).to_line()))?, 1));
    probes.push(("unsupported objective", e2s(client.raw_exchange(&query(8, Op::Eval, ObjectiveKind::BoxShift)))?, 2));
    probes.push(("oracle failure", e2s(client.raw_exchange(&query(9, Op::Eval, ObjectiveKind::Vanishing)))?, 3));
    let forward = e2s(TcpServer::bind(
        Arc::new(ForwardOnly(LinearDetector::new(1))),
        "127.0.0.1:0",
        ServerOptions { forward_only: true },
    ))?;
    let fwd_client = e2s(RemoteOracle::connect_tcp(&forward.local_addr().to_string(), timeout))?;
    probes.push(("grad on forward-only", e2s(fwd_client.raw_exchange(&query(10, Op::Grad, ObjectiveKind::Vanishing)))?, 2));
    broken.shutdown();
    probes.push(("after shutdown", e2s(client.raw_exchange(&query(11, Op::Eval, ObjectiveKind::Vanishing)))?, 4));
    for (name, reply, want) in &probes {
        ensure(error_code(reply) == Some(*want), || format!("{name}: expected code {want}, got {reply:?}"))?;
    }
    Ok(format!("100 tensors bit-exact; loopback worst relative gap {worst:.1e}; {} error probes return documented codes", probes.len()))
}

// ---------------------------------------------------------------------------

fn cli_determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = |out: &Path| -> Result<Vec<u8>, String> {
        let status = Command::new(env!("CARGO_BIN_EXE_asc"))
            .args(["attack", "--scenes", "4", "--seed", "21", "--budget", "0.06"])
            .args(["--method", "oasc,fasc,pgd0,cwl0,pattern:small_grid"])
            .arg("--out")
            .arg(out)
            .status()
            .map_err(|e| e.to_string())?;
        ensure(status.success(), || format!("asc attack exited with {status}"))?;
        std::fs::read(out.join("report.json")).map_err(|e| e.to_string())
    };
    let a = run(&dir.path().join("a"))?;
    let b = run(&dir.path().join("b"))?;
    ensure(a == b, || "reports differ".into())?;
    Ok(format!("two runs produced identical {}-byte reports", a.len()))
}

// ---------------------------------------------------------------------------

fn main() {
    type Criterion = (&'static str, Option<Duration>, fn() -> Check);
    let criteria: [Criterion; 10] = [
        ("l0 hard constraint", Some(Duration::from_secs(10)), l0_constraint),
        ("gradient correctness", Some(Duration::from_secs(5)), gradient_correctness),
        ("brute-force optimality equivalence", Some(Duration::from_secs(120)), brute_force_equivalence),
        ("morphology fixtures", None, morphology_fixtures),
        ("texture optimizer contract", None, texture_contracts),
        ("sampler contracts", None, sampler_contracts),
        ("desk-scale trend replication", Some(Duration::from_secs(300)), trend_replication),
        ("metrics", None, metrics),
        ("protocol", Some(Duration::from_secs(10)), protocol),
        ("CLI determinism", None, cli_determinism),
    ];
    let mut failures = 0;
    for (name, limit, check) in criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let outcome = match (outcome, limit) {
            (Ok(detail), Some(limit)) if elapsed > limit => Err(format!("{detail}; took {elapsed:.1?}, limit {limit:?}")),
            (o, _) => o,
        };
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail} [{elapsed:.1?}]"),
            Err(detail) => {
                failures += 1;
                println!("FAIL  {name}: {detail} [{elapsed:.1?}]");
            }
        }
    }
    println!("acceptance: {} passed, {failures} failed", criteria.len() - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
