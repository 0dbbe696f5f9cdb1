//! `voxflow`: dataset building, per-level training, bounded and unbounded
//! generation, mesh extraction and evaluation.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
//! Diagnostics go to stderr; stdout carries one summary line per command.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use voxflow::chunked::TrackingAllocator;

use config::RunConfig;

#[global_allocator]
static ALLOC: TrackingAllocator = TrackingAllocator;

pub const THREADS_ENV: &str = "VOXFLOW_THREADS";
pub const DEVICE_ENV: &str = "VOXFLOW_DEVICE";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<voxflow::Error> for CliError {
    fn from(e: voxflow::Error) -> Self {
        use voxflow::Error as E;
        match e {
            E::Config(_) | E::Parameter(_) | E::Parse { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "voxflow", version, about = "Hierarchical flow matching for volumetric scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// File of key=value lines applied before flags and overrides.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override any config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (a file for extract-mesh).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a procedural toy dataset.
    BuildDataset {
        #[command(flatten)]
        common: Common,
        /// rooms or streets.
        #[arg(long)]
        domain: Option<String>,
        /// Number of scenes.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train the flow into one level.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        level: Option<usize>,
        /// through-distributions or from-noise.
        #[arg(long)]
        mode: Option<String>,
        /// Total optimizer steps, counting resumed ones.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, value_name = "CKPT")]
        resume: Option<PathBuf>,
    },
    /// Sample a scene level by level.
    Generate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        gen: GenArgs,
    },
    /// Sample a world of any size chunk by chunk.
    GenerateUnbounded {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        gen: GenArgs,
        /// Level-1 world size in voxels: one value or x,y,z.
        #[arg(long)]
        world: Option<String>,
        /// Chunk size in voxels of each level: one value or x,y,z.
        #[arg(long)]
        chunk: Option<String>,
        #[arg(long)]
        overlap: Option<usize>,
    },
    /// Triangulate a volume's surface into an OBJ file.
    ExtractMesh {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: Option<PathBuf>,
        /// Normalized iso level; defaults to half a voxel.
        #[arg(long)]
        iso: Option<f32>,
    },
    /// Compare two scene sets; prints one CSV row.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        generated: Option<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Surface points per scene.
        #[arg(long)]
        points: Option<usize>,
        /// Maximum scenes per set.
        #[arg(long)]
        scenes: Option<usize>,
    },
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Level checkpoints; repeat or comma-separate, coarsest first.
    #[arg(long = "ckpt", value_delimiter = ',')]
    ckpt: Vec<PathBuf>,
    /// Layout manifest; omit for unconditional generation.
    #[arg(long)]
    layout: Option<PathBuf>,
    /// Comma-separated attribute tags.
    #[arg(long)]
    attrs: Option<String>,
    /// Euler steps per level.
    #[arg(long)]
    steps: Option<usize>,
}

fn device_default() -> String {
    std::env::var(DEVICE_ENV).unwrap_or_else(|_| "cpu".into())
}

fn build_config(
    name: &'static str,
    defaults: &[(&'static str, &str)],
    common: &Common,
    flags: Vec<(&str, Option<String>)>,
) -> Result<RunConfig, CliError> {
    let device = device_default();
    let mut all: Vec<(&'static str, &str)> = defaults.to_vec();
    all.push(("device", device.as_str()));
    let mut cfg = RunConfig::new(name, &all);
    if let Some(p) = &common.config {
        cfg.load_file(p)?;
    }
    let mut flags = flags;
    flags.push(("seed", common.seed.map(|s| s.to_string())));
    flags.push(("out", common.out.as_ref().map(|p| p.display().to_string())));
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
    }
    for pair in &common.set {
        cfg.set_pair(pair)?;
    }
    if cfg.raw("device") != "cpu" {
        return Err(CliError::Usage(format!(
            "device {:?} is not available; this build runs on cpu",
            cfg.raw("device")
        )));
    }
    Ok(cfg)
}

fn path_flag(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

fn gen_flags(g: &GenArgs) -> Vec<(&'static str, Option<String>)> {
    let ckpts = (!g.ckpt.is_empty()).then(|| {
        g.ckpt
            .iter()
            .map(|p| p.display().to_string())
            .collect::<Vec<_>>()
            .join(",")
    });
    vec![
        ("checkpoints", ckpts),
        ("layout", path_flag(&g.layout)),
        ("attrs", g.attrs.clone()),
        ("steps", g.steps.map(|s| s.to_string())),
    ]
}

fn run(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::BuildDataset { common, domain, n } => {
            let cfg = build_config(
                "build-dataset",
                commands::BUILD_DEFAULTS,
                &common,
                vec![("domain", domain), ("n", n.map(|n| n.to_string()))],
            )?;
            commands::build_dataset(&cfg)
        }
        Command::Train {
            common,
            dataset,
            level,
            mode,
            steps,
            resume,
        } => {
            let cfg = build_config(
                "train",
                commands::TRAIN_DEFAULTS,
                &common,
                vec![
                    ("dataset", path_flag(&dataset)),
                    ("level", level.map(|l| l.to_string())),
                    ("mode", mode),
                    ("steps", steps.map(|s| s.to_string())),
                    ("resume", path_flag(&resume)),
                ],
            )?;
            commands::train(&cfg)
        }
        Command::Generate { common, gen } => {
            let cfg = build_config("generate", commands::GENERATE_DEFAULTS, &common, gen_flags(&gen))?;
            commands::generate(&cfg)
        }
        Command::GenerateUnbounded {
            common,
            gen,
            world,
            chunk,
            overlap,
        } => {
            let mut flags = gen_flags(&gen);
            flags.extend([
                ("world", world),
                ("chunk", chunk),
                ("overlap", overlap.map(|o| o.to_string())),
            ]);
            let cfg = build_config("generate-unbounded", commands::UNBOUNDED_DEFAULTS, &common, flags)?;
            commands::generate_unbounded(&cfg)
        }
        Command::ExtractMesh { common, input, iso } => {
            let cfg = build_config(
                "extract-mesh",
                commands::EXTRACT_DEFAULTS,
                &common,
                vec![("input", path_flag(&input)), ("iso", iso.map(|v| v.to_string()))],
            )?;
            commands::extract(&cfg)
        }
        Command::Evaluate {
            common,
            generated,
            reference,
            points,
            scenes,
        } => {
            let cfg = build_config(
                "evaluate",
                commands::EVALUATE_DEFAULTS,
                &common,
                vec![
                    ("generated", path_flag(&generated)),
                    ("reference", path_flag(&reference)),
                    ("points", points.map(|p| p.to_string())),
                    ("scenes", scenes.map(|s| s.to_string())),
                ],
            )?;
            commands::evaluate(&cfg)
        }
    }
}

fn init_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV}={v:?} must be a positive integer")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match init_threads().and_then(|_| run(cli)) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
