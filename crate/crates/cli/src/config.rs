//! Run configuration: an optional JSON file merged with command-line flags.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use asc_core::analysis::DEFAULT_TILE_SIZE;
use asc_core::model::AttackBudget;
use asc_core::oracle::edge::SUGGESTED_STEP_SIZE;
use asc_core::oracle::{EdgeDetector, LinearDetector, ObjectiveKind, Oracle};
use asc_core::patterns::PatternKind;
use asc_core::protocol::{timeout_from_env, Endpoint};
use asc_core::runner::{Method, MethodConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Contents of a `--config` file. Every field is optional; flags win.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub images: Vec<PathBuf>,
    pub annotations: Option<PathBuf>,
    /// Use this many synthetic scenes instead of image files.
    pub scenes: Option<usize>,
    pub oracle: Option<String>,
    pub objective: Option<String>,
    pub budget: Option<String>,
    pub methods: Vec<String>,
    pub patterns: Vec<String>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub step_size: Option<f64>,
    pub engine: Option<MethodConfig>,
    pub nac: Option<NacOptions>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum AreaMode {
    Grid,
    Partition,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NacOptions {
    pub areas: AreaMode,
    pub tile_size: usize,
    /// Depth of the contour region in erosions.
    pub contour_width: usize,
}

impl Default for NacOptions {
    fn default() -> Self {
        Self { areas: AreaMode::Grid, tile_size: DEFAULT_TILE_SIZE, contour_width: 1 }
    }
}

/// The configuration a command actually runs with. It is echoed into every
/// report, minus the output directory, so reruns into different directories
/// produce identical reports.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Resolved {
    pub images: Vec<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub scenes: Option<usize>,
    pub oracle: String,
    #[serde(serialize_with = "objective_name")]
    pub objective: ObjectiveKind,
    pub budget: AttackBudget,
    pub methods: Vec<Method>,
    pub patterns: Vec<PatternKind>,
    #[serde(skip)]
    pub out: PathBuf,
    pub seed: u64,
    pub engine: MethodConfig,
    pub nac: NacOptions,
}

fn objective_name<S: serde::Serializer>(k: &ObjectiveKind, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(k.name())
}

/// Values given on the command line.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub images: Vec<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub scenes: Option<usize>,
    pub oracle: Option<String>,
    pub objective: Option<String>,
    pub budget: Option<String>,
    pub methods: Vec<Method>,
    pub patterns: Vec<PatternKind>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub step_size: Option<f64>,
    pub nac: NacOverrides,
}

#[derive(Debug, Clone, Default)]
pub struct NacOverrides {
    pub areas: Option<AreaMode>,
    pub tile_size: Option<usize>,
    pub contour_width: Option<usize>,
}

pub fn resolve(file: RunConfig, cli: Overrides) -> Result<Resolved, CliError> {
    let seed = cli.seed.or(file.seed).unwrap_or(0);
    let oracle = cli.oracle.or(file.oracle).unwrap_or_else(|| "toy:edge".to_string());
    let oracle = OracleSpec::parse(&oracle, seed)?.canonical();

    let objective_text = cli.objective.or(file.objective).unwrap_or_else(|| "vanishing".into());
    let objective = ObjectiveKind::parse(&objective_text)
        .ok_or_else(|| CliError::Validation(format!("unknown objective {objective_text:?}")))?;
    let budget = AttackBudget::parse(&cli.budget.or(file.budget).unwrap_or_else(|| "0.05".into()))?;

    let methods = if !cli.methods.is_empty() {
        cli.methods
    } else if !file.methods.is_empty() {
        file.methods.iter().map(|m| Method::parse(m)).collect::<asc_core::Result<_>>()?
    } else {
        vec![Method::Oasc]
    };
    let patterns = if !cli.patterns.is_empty() {
        cli.patterns
    } else {
        file.patterns
            .iter()
            .map(|p| PatternKind::parse(p).ok_or_else(|| CliError::Validation(format!("unknown pattern {p:?}"))))
            .collect::<Result<_, _>>()?
    };

    let is_edge = oracle.starts_with("toy:edge");
    let mut engine = file.engine.unwrap_or_else(|| {
        let mut e = MethodConfig::default();
        e.texture.record_trace = true;
        if is_edge {
            e.texture.step_size = SUGGESTED_STEP_SIZE;
        }
        e
    });
    if let Some(step) = cli.step_size.or(file.step_size) {
        engine.texture.step_size = step;
    }
    engine.sampler.rng_seed = seed;
    engine.texture.validate()?;
    engine.sampler.validate()?;

    let mut nac = file.nac.unwrap_or_default();
    nac.areas = cli.nac.areas.unwrap_or(nac.areas);
    nac.tile_size = cli.nac.tile_size.unwrap_or(nac.tile_size);
    nac.contour_width = cli.nac.contour_width.unwrap_or(nac.contour_width);
    if nac.tile_size == 0 {
        return Err(CliError::Validation("tile size must be positive".into()));
    }

    let images = if cli.images.is_empty() { file.images } else { cli.images };
    let annotations = cli.annotations.or(file.annotations);
    for p in images.iter().chain(annotations.iter()) {
        if !p.exists() {
            return Err(CliError::io(p, "no such file"));
        }
    }
    Ok(Resolved {
        images,
        annotations,
        scenes: cli.scenes.or(file.scenes),
        oracle,
        objective,
        budget,
        methods,
        patterns,
        out: cli.out.or(file.out).unwrap_or_else(|| PathBuf::from("asc-out")),
        seed,
        engine,
        nac,
    })
}

/// Parsed `--oracle` value.
#[derive(Debug, Clone, PartialEq)]
pub enum OracleSpec {
    Linear(u64),
    Edge(u64),
    Remote(Endpoint),
}

impl OracleSpec {
    /// Accepts `toy:linear[:SEED]`, `toy:edge[:SEED]` (seed defaults to
    /// `default_seed`) or any remote endpoint form.
    pub fn parse(spec: &str, default_seed: u64) -> Result<Self, CliError> {
        if let Some(rest) = spec.strip_prefix("toy:") {
            let (kind, seed) = match rest.split_once(':') {
                Some((k, s)) => {
                    (k, s.parse().map_err(|_| CliError::Validation(format!("invalid oracle seed in {spec:?}")))?)
                }
                None => (rest, default_seed),
            };
            return match kind {
                "linear" => Ok(OracleSpec::Linear(seed)),
                "edge" => Ok(OracleSpec::Edge(seed)),
                _ => Err(CliError::Validation(format!("unknown toy oracle {kind:?}"))),
            };
        }
        Ok(OracleSpec::Remote(Endpoint::parse(spec)?))
    }

    pub fn canonical(&self) -> String {
        match self {
            OracleSpec::Linear(s) => format!("toy:linear:{s}"),
            OracleSpec::Edge(s) => format!("toy:edge:{s}"),
            OracleSpec::Remote(Endpoint::Tcp(addr)) => format!("remote:{addr}"),
            OracleSpec::Remote(Endpoint::Stdio { program, args }) => {
                std::iter::once(format!("stdio:{program}")).chain(args.iter().cloned()).collect::<Vec<_>>().join(" ")
            }
        }
    }

    pub fn build(&self) -> Result<Arc<dyn Oracle>, CliError> {
        Ok(match self {
            OracleSpec::Linear(s) => Arc::new(LinearDetector::new(*s)),
            OracleSpec::Edge(s) => Arc::new(EdgeDetector::new(*s)),
            OracleSpec::Remote(ep) => Arc::new(ep.connect(timeout_from_env())?),
        })
    }
}
