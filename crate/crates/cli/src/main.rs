//! `asc`: pattern generation, sparse attacks and nAC heatmaps from the shell.

mod commands;
mod config;
mod error;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use asc_core::patterns::PatternKind;
use asc_core::runner::Method;
use clap::{Args, Parser, Subcommand};

use crate::config::{AreaMode, NacOverrides, OracleSpec, Overrides, RunConfig};
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "asc", version, about = "Contour-guided sparse adversarial attacks on object detectors")]
struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// toy:linear[:SEED], toy:edge[:SEED], remote:HOST:PORT or "stdio:CMD ARGS".
    #[arg(long, global = true)]
    oracle: Option<String>,
    /// Fraction of the object area (e.g. 0.05) or abs:N pixels.
    #[arg(long, global = true)]
    budget: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory. Nothing is written outside it.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct InputArgs {
    #[arg(long = "image")]
    images: Vec<PathBuf>,
    /// COCO-style annotation JSON.
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Use N generated scenes instead of image files.
    #[arg(long, value_name = "N")]
    scenes: Option<usize>,
    /// vanishing, mislabel or box_shift.
    #[arg(long)]
    objective: Option<String>,
    /// Texture optimizer step size.
    #[arg(long)]
    step_size: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the prior masks of every pattern kind.
    Patterns {
        #[command(flatten)]
        inputs: InputArgs,
        #[arg(long = "pattern", value_delimiter = ',', value_parser = parse_pattern)]
        patterns: Vec<PatternKind>,
    },
    /// Run one or more attack methods and write artifacts plus report.json.
    Attack {
        #[command(flatten)]
        inputs: InputArgs,
        /// fasc, oasc, pgd0, cwl0 or pattern:<kind>; repeatable.
        #[arg(long = "method", value_delimiter = ',', value_parser = parse_method)]
        methods: Vec<Method>,
    },
    /// Compute the normalized adversarial contribution heatmap.
    Nac {
        #[command(flatten)]
        inputs: InputArgs,
        #[arg(long, value_enum)]
        areas: Option<AreaMode>,
        #[arg(long)]
        tile_size: Option<usize>,
        #[arg(long)]
        contour_width: Option<usize>,
    },
    /// Probe a remote oracle for protocol conformance.
    ProtocolCheck {
        /// Defaults to the --oracle value.
        #[arg(long)]
        endpoint: Option<String>,
    },
    /// Serve a toy oracle over TCP or stdio.
    Serve {
        #[arg(long, conflicts_with = "stdio")]
        listen: Option<String>,
        #[arg(long)]
        stdio: bool,
        /// Refuse gradient requests.
        #[arg(long)]
        forward_only: bool,
    },
    /// Write generated scenes and their annotation file.
    Scenes {
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
}

fn parse_pattern(s: &str) -> Result<PatternKind, String> {
    PatternKind::parse(s).ok_or_else(|| {
        let names: Vec<&str> = PatternKind::ALL.iter().map(|k| k.name()).collect();
        format!("unknown pattern {s:?}; expected one of {}", names.join(", "))
    })
}

fn parse_method(s: &str) -> Result<Method, String> {
    Method::parse(s).map_err(|e| e.to_string())
}

fn overrides(cli: &Cli, inputs: Option<&InputArgs>) -> Overrides {
    let mut o = Overrides {
        oracle: cli.oracle.clone(),
        budget: cli.budget.clone(),
        seed: cli.seed,
        out: cli.out.clone(),
        ..Default::default()
    };
    if let Some(i) = inputs {
        o.images = i.images.clone();
        o.annotations = i.annotations.clone();
        o.scenes = i.scenes;
        o.objective = i.objective.clone();
        o.step_size = i.step_size;
    }
    o
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = cli.config.as_deref().map(RunConfig::load).transpose()?.unwrap_or_default();
    match &cli.command {
        Command::Patterns { inputs, patterns } => {
            let o = Overrides { patterns: patterns.clone(), ..overrides(&cli, Some(inputs)) };
            commands::patterns(&config::resolve(file, o)?)
        }
        Command::Attack { inputs, methods } => {
            let o = Overrides { methods: methods.clone(), ..overrides(&cli, Some(inputs)) };
            let res = config::resolve(file, o)?;
            let oracle = OracleSpec::parse(&res.oracle, res.seed)?.build()?;
            commands::attack(&res, oracle.as_ref())
        }
        Command::Nac { inputs, areas, tile_size, contour_width } => {
            let nac = NacOverrides { areas: *areas, tile_size: *tile_size, contour_width: *contour_width };
            let o = Overrides { nac, ..overrides(&cli, Some(inputs)) };
            let res = config::resolve(file, o)?;
            let oracle = OracleSpec::parse(&res.oracle, res.seed)?.build()?;
            commands::nac(&res, oracle.as_ref())
        }
        Command::ProtocolCheck { endpoint } => {
            let endpoint = endpoint
                .clone()
                .or_else(|| cli.oracle.clone())
                .or(file.oracle)
                .ok_or_else(|| CliError::Validation("protocol-check needs --endpoint".into()))?;
            commands::protocol_check(&endpoint, cli.out.as_ref().or(file.out.as_ref()))
        }
        Command::Serve { listen, stdio, forward_only } => {
            let seed = cli.seed.or(file.seed).unwrap_or(0);
            let spec = cli.oracle.clone().or(file.oracle).unwrap_or_else(|| "toy:edge".into());
            commands::serve(&OracleSpec::parse(&spec, seed)?, listen.as_deref(), *stdio, *forward_only)
        }
        Command::Scenes { count } => commands::scenes(&config::resolve(file, overrides(&cli, None))?, *count),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
