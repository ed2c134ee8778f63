//! Compares contour attacks with fixed patterns on a seeded scene suite
//! using the edge detector, then checks where nAC concentrates.
//!
//! ```text
//! cargo run --release -p asc-core --example trend -- [scenes] [seed]
//! ```

use asc_core::analysis::{nac_heatmap, region_partition, NacAreas, RegionKind, DEFAULT_TILE_SIZE};
use asc_core::model::AttackBudget;
use asc_core::oracle::edge::SUGGESTED_STEP_SIZE;
use asc_core::oracle::{EdgeDetector, Objective, ObjectiveKind};
use asc_core::par::{self, Execution};
use asc_core::patterns::PatternKind;
use asc_core::runner::{run_batch, Method, MethodConfig};
use asc_core::scenes::{scene_suite, SceneConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let count: usize = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(50);
    let seed: u64 = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(7);
    let det = EdgeDetector::new(seed);
    let scenes = scene_suite(seed, count, &SceneConfig::default());

    let methods = [
        Method::Oasc,
        Method::Fasc,
        Method::Pattern(PatternKind::SmallGrid),
        Method::Pattern(PatternKind::TwoByTwoGrid),
        Method::Pattern(PatternKind::FourPatch),
        Method::Pattern(PatternKind::AdvPatch),
    ];
    let mut cfg = MethodConfig::default();
    cfg.texture.step_size = SUGGESTED_STEP_SIZE;
    let start = std::time::Instant::now();
    let report = run_batch(
        &det,
        &scenes,
        ObjectiveKind::Vanishing,
        AttackBudget::FractionOfArea(0.05),
        &methods,
        &cfg,
        Execution::Parallel,
    )?;
    let clean = report.scenes.iter().filter(|s| s.clean_detected).count();
    println!("clean detections: {clean}/{count} ({:.1?})", start.elapsed());
    for s in &report.summary {
        println!("{:<26} success {:>3}/{}  mean objective {:.4}", s.method.name(), s.successes, s.scenes, s.mean_value);
    }

    let tcfg = cfg.texture;
    let wins = par::map(Execution::Parallel, &scenes, |scene| {
        let obj = Objective::vanishing(scene.target.clone());
        let partition = region_partition(&scene.target, 1).ok()?;
        let areas = NacAreas::Grid { tile_size: DEFAULT_TILE_SIZE, partition: Some(partition) };
        let rep = nac_heatmap(&det, &scene.image, &obj, &areas, &tcfg, Execution::Sequential).ok()?;
        Some(rep.mean_nac(RegionKind::Contour)? > rep.mean_nac(RegionKind::Inside)?)
    });
    let ok = wins.iter().filter(|w| **w == Some(true)).count();
    println!("contour tiles beat interior tiles in {ok}/{count} scenes");
    Ok(())
}
