//! Subcommands, configuration and artifact output for the `spinchern` binary.

pub mod commands;
pub mod config;
pub mod svg;

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::{Method, RunConfig};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Compute(spinchern::Error),
    Infeasible(spinchern::Error),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Compute(_) | CliError::Io(_) => 3,
            CliError::Infeasible(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Compute(e) => write!(f, "computation failed: {e}"),
            CliError::Infeasible(e) => write!(f, "compilation infeasible: {e}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<spinchern::Error> for CliError {
    fn from(e: spinchern::Error) -> Self {
        match e {
            spinchern::Error::Infeasible { .. } => CliError::Infeasible(e),
            other => CliError::Compute(other),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "spinchern", version, about = "Chern numbers and quench dynamics of spin SSH chains")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(clap::Args, Debug, Clone, Default)]
pub struct CommonArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub method: Option<Method>,
}

#[derive(Subcommand, Debug, Clone, PartialEq, Eq)]
pub enum Command {
    /// Sector-resolved spectrum at a z field.
    Spectrum,
    /// Chern number over a list of field strengths.
    Chern,
    /// Chern number on a two-parameter grid.
    PhaseDiagram,
    /// Chern number along J12 = J34 with the step located by bisection.
    Transition,
    /// Adiabatic ground-state preparation.
    Prepare,
    /// One quench with magnetization traces and extracted curvature.
    Quench,
    /// Ground-level crossings on the z axis and robustness fits.
    Degeneracy,
    /// Pulse-sequence compilation for the chain couplings.
    Compile,
    /// RF amplitude inhomogeneity ensemble on a quench.
    Noise,
    /// Runs a bundled figure recipe.
    Recipe {
        #[arg(value_parser = clap::builder::PossibleValuesParser::new(RECIPE_NAMES))]
        name: String,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Spectrum => "spectrum",
            Command::Chern => "chern",
            Command::PhaseDiagram => "phase-diagram",
            Command::Transition => "transition",
            Command::Prepare => "prepare",
            Command::Quench => "quench",
            Command::Degeneracy => "degeneracy",
            Command::Compile => "compile",
            Command::Noise => "noise",
            Command::Recipe { .. } => "recipe",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "spectrum" => Command::Spectrum,
            "chern" => Command::Chern,
            "phase-diagram" => Command::PhaseDiagram,
            "transition" => Command::Transition,
            "prepare" => Command::Prepare,
            "quench" => Command::Quench,
            "degeneracy" => Command::Degeneracy,
            "compile" => Command::Compile,
            "noise" => Command::Noise,
            _ => return None,
        })
    }
}

pub const RECIPE_NAMES: [&str; 9] = [
    "fig2c", "fig2d", "fig3c", "fig3d", "fig4a", "fig4b", "figS1", "figS5", "figS6",
];

pub fn recipe(name: &str) -> Option<&'static str> {
    Some(match name {
        "fig2c" => include_str!("../recipes/fig2c.toml"),
        "fig2d" => include_str!("../recipes/fig2d.toml"),
        "fig3c" => include_str!("../recipes/fig3c.toml"),
        "fig3d" => include_str!("../recipes/fig3d.toml"),
        "fig4a" => include_str!("../recipes/fig4a.toml"),
        "fig4b" => include_str!("../recipes/fig4b.toml"),
        "figS1" => include_str!("../recipes/figS1.toml"),
        "figS5" => include_str!("../recipes/figS5.toml"),
        "figS6" => include_str!("../recipes/figS6.toml"),
        _ => return None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputEntry {
    pub file: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact_version: String,
    pub command: String,
    pub config: RunConfig,
    pub threads: usize,
    pub started_unix_s: f64,
    pub wall_time_s: f64,
    pub outputs: Vec<OutputEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Collects artifacts written into one directory.
pub struct Outputs {
    dir: PathBuf,
    entries: Vec<OutputEntry>,
}

impl Outputs {
    pub fn new(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            entries: Vec::new(),
        })
    }

    pub fn write(&mut self, file: &str, contents: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(file);
        std::fs::write(&path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        self.entries.push(OutputEntry {
            file: file.to_string(),
            sha256: sha256_hex(contents),
            bytes: contents.len(),
        });
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, file: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
        text.push('\n');
        self.write(file, text.as_bytes())
    }

    pub fn entries(&self) -> &[OutputEntry] {
        &self.entries
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Loads the config for `command`, applying flag overrides.
pub fn resolve_config(command: &Command, args: &CommonArgs) -> Result<(Command, RunConfig), CliError> {
    let (text, origin) = match (command, &args.config) {
        (Command::Recipe { name }, None) => (
            recipe(name)
                .ok_or_else(|| CliError::Config(format!("unknown recipe `{name}`")))?
                .to_string(),
            format!("recipe {name}"),
        ),
        (Command::Recipe { .. }, Some(_)) => {
            return Err(CliError::Config("`recipe` takes no --config".into()));
        }
        (_, Some(path)) => (
            std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?,
            path.display().to_string(),
        ),
        (_, None) => return Err(CliError::Config("--config is required".into())),
    };
    let mut cfg = RunConfig::from_toml(&text).map_err(|e| CliError::Config(format!("{origin}: {e}")))?;
    let command = match command {
        Command::Recipe { name } => {
            let target = cfg
                .command
                .as_deref()
                .ok_or_else(|| CliError::Config(format!("recipe {name} names no command")))?;
            Command::from_name(target).ok_or_else(|| CliError::Config(format!("unknown command `{target}`")))?
        }
        other => {
            if let Some(c) = &cfg.command {
                if c != other.name() {
                    return Err(CliError::Config(format!(
                        "{origin} is a `{c}` config, not `{}`",
                        other.name()
                    )));
                }
            }
            other.clone()
        }
    };
    cfg.command = Some(command.name().to_string());
    if let Some(s) = args.seed {
        cfg.seed = Some(s);
    }
    if let Some(m) = args.method {
        cfg.method = Some(m);
    }
    if let Some(t) = args.threads {
        cfg.threads = Some(t);
    }
    Ok((command, cfg))
}

/// Runs one command and writes its artifacts plus the manifest into `out`.
pub fn run(command: &Command, args: &CommonArgs) -> Result<RunManifest, CliError> {
    let (command, cfg) = resolve_config(command, args)?;
    let threads = cfg.threads.unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    let started = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0);
    let clock = Instant::now();
    let mut out = Outputs::new(&args.out)?;
    pool.install(|| commands::dispatch(&command, &cfg, &mut out))?;
    let manifest = RunManifest {
        artifact_version: env!("CARGO_PKG_VERSION").to_string(),
        command: command.name().to_string(),
        config: cfg,
        threads: pool.current_num_threads(),
        started_unix_s: started,
        wall_time_s: clock.elapsed().as_secs_f64(),
        outputs: out.entries().to_vec(),
    };
    let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Io(e.to_string()))?;
    text.push('\n');
    let path = args.out.join(MANIFEST_FILE);
    std::fs::write(&path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(manifest)
}
