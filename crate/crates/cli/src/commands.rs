use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use asc_core::analysis::{nac_heatmap, region_partition, NacAreas, RegionKind};
use asc_core::model::{resolve_budget, ImagePlane, ObjectTarget};
use asc_core::oracle::{Objective, Oracle};
use asc_core::par::{self, Execution};
use asc_core::patterns::{generate_pattern, PatternKind, PatternSpec};
use asc_core::protocol::{conformance_check, serve_stdio, timeout_from_env, Endpoint, ServerOptions, TcpServer};
use asc_core::runner::{run_method, summarize, MethodResult, MethodRun};
use asc_core::sampler::RoundRecord;
use asc_core::scenes::{scene_suite, SceneConfig};
use asc_core::texture::trace_csv;
use serde::Serialize;

use crate::config::{AreaMode, OracleSpec, Resolved};
use crate::error::CliError;
use crate::io::{self, Annotation, AnnotationFile, ImageEntry};

/// One image with its attack target.
pub struct Input {
    pub name: String,
    pub source: String,
    pub image: ImagePlane,
    pub target: ObjectTarget,
}

pub fn load_inputs(res: &Resolved) -> Result<Vec<Input>, CliError> {
    if let Some(n) = res.scenes {
        return Ok(scene_suite(res.seed, n, &SceneConfig::default())
            .into_iter()
            .map(|s| Input { source: format!("scene:{}", s.name), name: s.name, image: s.image, target: s.target })
            .collect());
    }
    if res.images.is_empty() {
        return Err(CliError::Validation("no inputs: pass --image or --scenes".into()));
    }
    let ann_path = res
        .annotations
        .as_ref()
        .ok_or_else(|| CliError::Validation("--annotations is required with --image".into()))?;
    let (ann, base) = AnnotationFile::load(ann_path)?;

    let stems: Vec<String> = res
        .images
        .iter()
        .map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into()))
        .collect();
    let unique = stems.iter().collect::<HashSet<_>>().len() == stems.len();
    res.images
        .iter()
        .zip(stems)
        .enumerate()
        .map(|(i, (path, stem))| {
            let image = io::read_image(path)?;
            let target = ann.annotation_for(path)?.to_target(&base)?;
            let (h, w) = image.dims();
            target.validate(h, w).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
            let name = if unique { stem } else { format!("{i:03}_{stem}") };
            Ok(Input { name, source: path.display().to_string(), image, target })
        })
        .collect()
}

#[derive(Serialize)]
struct Engine {
    name: &'static str,
    version: &'static str,
}

const ENGINE: Engine = Engine { name: "asc-core", version: asc_core::VERSION };

#[derive(Serialize)]
struct Report<'a, T: Serialize> {
    engine: Engine,
    command: &'static str,
    config: &'a Resolved,
    #[serde(flatten)]
    body: T,
}

fn write_report<T: Serialize>(res: &Resolved, command: &'static str, file: &str, body: T) -> Result<(), CliError> {
    io::write_json(&res.out.join(file), &Report { engine: ENGINE, command, config: res, body })
}

/// Keeps the first error seen while still letting every item finish.
fn first_error<T>(items: &mut [(T, Option<CliError>)]) -> Option<CliError> {
    items.iter_mut().find_map(|(_, e)| e.take())
}

#[derive(Serialize)]
struct CleanInfo {
    value: f64,
    detected: bool,
    best_score: f64,
}

#[derive(Serialize)]
struct ImageReport {
    image: String,
    source: String,
    clean: Option<CleanInfo>,
    results: Vec<MethodResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

pub fn attack(res: &Resolved, oracle: &dyn Oracle) -> Result<(), CliError> {
    let inputs = load_inputs(res)?;
    let mut engine = res.engine;
    if inputs.len() > 1 {
        engine.sampler.execution = Execution::Sequential;
    }
    let mut outcomes = par::map(Execution::Parallel, &inputs, |input| {
        let mut report = ImageReport {
            image: input.name.clone(),
            source: input.source.clone(),
            clean: None,
            results: Vec::new(),
            error: None,
        };
        let err = attack_one(res, oracle, input, &engine, &mut report).err();
        report.error = err.as_ref().map(ToString::to_string);
        (report, err)
    });
    let err = first_error(&mut outcomes);
    let images: Vec<ImageReport> = outcomes.into_iter().map(|(r, _)| r).collect();
    let complete: Vec<&[MethodResult]> =
        images.iter().filter(|r| r.error.is_none()).map(|r| r.results.as_slice()).collect();

    #[derive(Serialize)]
    struct Body {
        complete: bool,
        images: Vec<ImageReport>,
        summary: Vec<asc_core::runner::MethodSummary>,
    }
    let summary = summarize(&res.methods, &complete);
    write_report(res, "attack", "report.json", Body { complete: err.is_none(), images, summary })?;
    err.map_or(Ok(()), Err)
}

fn attack_one(
    res: &Resolved,
    oracle: &dyn Oracle,
    input: &Input,
    engine: &asc_core::runner::MethodConfig,
    report: &mut ImageReport,
) -> Result<(), CliError> {
    let objective = Objective::new(res.objective, input.target.clone());
    let clean = oracle.evaluate(&input.image, &objective)?;
    report.clean = Some(CleanInfo {
        value: clean.value,
        detected: engine.success.still_detected(&clean.detections, &objective),
        best_score: clean.detections.iter().map(|d| d.score).fold(0.0, f64::max),
    });
    let dir = res.out.join(&input.name);
    for &method in &res.methods {
        let run = run_method(oracle, &input.image, &objective, res.budget, method, engine)?;
        write_artifacts(&dir.join(method.name().replace(':', "_")), &run)?;
        report.results.push(run.result);
    }
    Ok(())
}

fn write_artifacts(dir: &Path, run: &MethodRun) -> Result<(), CliError> {
    io::write_image(&dir.join("adversarial.png"), &run.example.image())?;
    io::write_mask(&dir.join("mask.png"), &run.example.mask)?;
    if let Some(rounds) = &run.result.rounds {
        io::write_text(&dir.join("trace.csv"), &rounds_csv(rounds))?;
    } else if let Some(trace) = &run.result.trace {
        io::write_text(&dir.join("trace.csv"), &trace_csv(trace))?;
    }
    Ok(())
}

fn rounds_csv(rounds: &[RoundRecord]) -> String {
    let mut s = String::from("round,best_value,mask_popcount,candidates,success\n");
    for r in rounds {
        s.push_str(&format!("{},{},{},{},{}\n", r.round, r.best_value, r.mask_popcount, r.candidates, r.success));
    }
    s
}

#[derive(Serialize)]
struct PatternEntry {
    kind: PatternKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pixels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    file: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    skipped: Option<String>,
}

#[derive(Serialize)]
struct PatternImage {
    image: String,
    budget: usize,
    patterns: Vec<PatternEntry>,
}

/// Writes every requested pattern mask. Without an explicit list, all kinds
/// are tried and those lacking a prior are reported as skipped.
pub fn patterns(res: &Resolved) -> Result<(), CliError> {
    let inputs = load_inputs(res)?;
    let explicit = !res.patterns.is_empty();
    let kinds: Vec<PatternKind> = if explicit { res.patterns.clone() } else { PatternKind::ALL.to_vec() };
    let mut images = Vec::with_capacity(inputs.len());
    for input in &inputs {
        let (h, w) = input.image.dims();
        let n0 = resolve_budget(res.budget, &input.target)?;
        let mut entries = Vec::new();
        for &kind in &kinds {
            let spec = PatternSpec { kind, budget: n0, min_grid_pitch: res.engine.min_grid_pitch };
            match generate_pattern(&spec, &input.target, h, w) {
                Ok(mask) => {
                    let rel = format!("{}/patterns/{}.png", input.name, kind.name());
                    io::write_mask(&res.out.join(&rel), &mask)?;
                    entries.push(PatternEntry { kind, pixels: Some(mask.count()), file: Some(rel), skipped: None });
                }
                Err(e) if !explicit => {
                    entries.push(PatternEntry { kind, pixels: None, file: None, skipped: Some(e.to_string()) })
                }
                Err(e) => return Err(e.into()),
            }
        }
        images.push(PatternImage { image: input.name.clone(), budget: n0, patterns: entries });
    }
    #[derive(Serialize)]
    struct Body {
        images: Vec<PatternImage>,
    }
    write_report(res, "patterns", "patterns.json", Body { images })
}

#[derive(Serialize)]
struct NacImage {
    image: String,
    areas: usize,
    mean_nac: BTreeMap<&'static str, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

pub fn nac(res: &Resolved, oracle: &dyn Oracle) -> Result<(), CliError> {
    let inputs = load_inputs(res)?;
    let tcfg = asc_core::texture::TextureOptConfig { success: res.engine.success, ..res.engine.texture };
    let mut images = Vec::with_capacity(inputs.len());
    let mut failure = None;
    for input in &inputs {
        let partition = match (res.nac.areas, &input.target.segmentation) {
            (AreaMode::Grid, None) => None,
            _ => Some(region_partition(&input.target, res.nac.contour_width)?),
        };
        let areas = match (res.nac.areas, partition) {
            (AreaMode::Partition, Some(p)) => NacAreas::Partition(p),
            (_, partition) => NacAreas::Grid { tile_size: res.nac.tile_size, partition },
        };
        let objective = Objective::new(res.objective, input.target.clone());
        match nac_heatmap(oracle, &input.image, &objective, &areas, &tcfg, Execution::Parallel) {
            Ok(report) => {
                let dir = res.out.join(&input.name);
                io::write_heatmap(&dir.join("nac.png"), &report.heatmap)?;
                io::write_text(&dir.join("nac.csv"), &report.to_csv())?;
                let mean_nac = [RegionKind::Inside, RegionKind::Contour, RegionKind::Outside]
                    .into_iter()
                    .filter_map(|k| report.mean_nac(k).map(|v| (k.name(), v)))
                    .collect();
                images.push(NacImage { image: input.name.clone(), areas: report.areas.len(), mean_nac, error: None });
            }
            Err(e) => {
                let e = CliError::from(e);
                images.push(NacImage { image: input.name.clone(), areas: 0, mean_nac: BTreeMap::new(), error: Some(e.to_string()) });
                failure = Some(e);
                break;
            }
        }
    }
    #[derive(Serialize)]
    struct Body {
        complete: bool,
        images: Vec<NacImage>,
    }
    write_report(res, "nac", "nac.json", Body { complete: failure.is_none(), images })?;
    failure.map_or(Ok(()), Err)
}

/// Writes a synthetic scene suite as PNGs plus an annotation file that the
/// other commands accept.
pub fn scenes(res: &Resolved, count: usize) -> Result<(), CliError> {
    let suite = scene_suite(res.seed, count, &SceneConfig::default());
    let dir = res.out.join("scenes");
    let mut images = Vec::with_capacity(suite.len());
    let mut annotations = Vec::with_capacity(suite.len());
    for (i, scene) in suite.iter().enumerate() {
        let file_name = format!("{}.png", scene.name);
        io::write_image(&dir.join(&file_name), &scene.image)?;
        let (h, w) = scene.image.dims();
        images.push(ImageEntry { id: i as u64, file_name, width: Some(w), height: Some(h) });
        annotations.push(Annotation::from_target(&scene.target, Some(i as u64)));
    }
    io::write_json(&dir.join("annotations.json"), &AnnotationFile { images, annotations })
}

pub fn protocol_check(endpoint: &str, out: Option<&PathBuf>) -> Result<(), CliError> {
    let endpoint = Endpoint::parse(endpoint)?;
    let remote = endpoint.connect(timeout_from_env())?;
    let report = conformance_check(&remote);
    let _ = remote.close();
    let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Internal(e.to_string()))?;
    println!("{text}");
    if let Some(dir) = out {
        io::write_json(&dir.join("protocol_check.json"), &report)?;
    }
    for c in report.checks.iter().filter(|c| c.status != asc_core::protocol::CheckStatus::Pass) {
        eprintln!("{:?}: {}: {}", c.status, c.name, c.detail);
    }
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Oracle("conformance check failed".into()))
    }
}

pub fn serve(spec: &OracleSpec, listen: Option<&str>, stdio: bool, forward_only: bool) -> Result<(), CliError> {
    if matches!(spec, OracleSpec::Remote(_)) {
        return Err(CliError::Validation("serve needs a local toy oracle".into()));
    }
    let oracle = spec.build()?;
    let options = ServerOptions { forward_only };
    if stdio {
        return serve_stdio(oracle.as_ref(), options).map_err(CliError::from);
    }
    let server = TcpServer::bind(oracle, listen.unwrap_or("127.0.0.1:0"), options)?;
    println!("listening on {}", server.local_addr());
    use std::io::Write;
    let _ = std::io::stdout().flush();
    server.join();
    Ok(())
}
