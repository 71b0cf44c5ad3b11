//! `jndloc`: operator command line.
//!
//! Exit codes: 0 success, 2 config error, 3 input error, 4 pipeline error.
//! Failures print one JSON object to stderr.

mod commands;
mod inputs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use jndloc_core::config::{StudyConfig, CONFIG_KEYS};
use jndloc_core::imaging::CodecId;

#[derive(Debug, Parser)]
#[command(name = "jndloc", version, about = "Build, run and analyze PJND and critical-region studies")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Study config (TOML, or JSON by extension). Flags override its keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; every artifact lands below it.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Overrides `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides `target_responses`.
    #[arg(long, global = true)]
    pub target_responses: Option<u32>,
    /// Overrides `codecs` (comma separated).
    #[arg(long, global = true, value_delimiter = ',')]
    pub codecs: Option<Vec<CodecId>>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Distortion ladders (levels 0..=100).
    #[command(subcommand)]
    Ladder(LadderCmd),
    /// Gold item synthesis.
    #[command(subcommand)]
    Gold(GoldCmd),
    /// Study setup.
    #[command(subcommand)]
    Study(StudyCmd),
    /// Run the HTTP service on the study in `--out`.
    Serve(ServeArgs),
    /// Simulated study: scenario, qualification, HITs, event log.
    Simulate(SimulateArgs),
    /// Quality control.
    #[command(subcommand)]
    Qc(QcCmd),
    /// Aggregate QC-filtered responses per image.
    Analyze(AnalyzeArgs),
    /// Write the annotated dataset (records and criticality maps).
    Export(ExportArgs),
    /// Compare mean PJND against a reference dataset.
    Compare(CompareArgs),
}

#[derive(Debug, Subcommand)]
pub enum LadderCmd {
    /// Encode every image of a directory into `<out>/ladders`.
    Build {
        #[arg(long)]
        images: PathBuf,
        #[arg(long, default_value = "jpeg")]
        codec: CodecId,
    },
}

#[derive(Debug, Subcommand)]
pub enum GoldCmd {
    /// Gold specs from pilot clicks and levels into `<out>/gold`.
    Synth {
        /// Candidate/pilot JSON with clicks per image.
        #[arg(long)]
        pilot: PathBuf,
        #[arg(long, default_value = "jpeg")]
        codec: CodecId,
        /// Restrict to the gold ids chosen by `study init --candidates-only`.
        #[arg(long)]
        selection: Option<PathBuf>,
        /// Source images; builds gold ladders into `<out>/ladders`.
        #[arg(long)]
        images: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum StudyCmd {
    /// Select gold candidates and study images, then assemble `<out>/study.json`.
    Init {
        #[arg(long)]
        candidates: PathBuf,
        /// Directory of gold specs (`<id>.json`); required unless `--candidates-only`.
        #[arg(long)]
        gold: Option<PathBuf>,
        /// Stop after writing `<out>/candidates.json`.
        #[arg(long)]
        candidates_only: bool,
    },
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: std::net::SocketAddr,
    /// Ladder cache root; defaults to `<out>/ladders`.
    #[arg(long)]
    pub ladders: Option<PathBuf>,
    /// Copied to `<out>/study.json` when that file does not exist yet.
    #[arg(long)]
    pub study: Option<PathBuf>,
    #[arg(long, env = "JNDLOC_ADMIN_TOKEN", hide_env_values = true)]
    pub admin_token: String,
    /// Events between state snapshots; 0 disables them.
    #[arg(long, default_value_t = 1000)]
    pub snapshot_every: u64,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 504)]
    pub pool: usize,
    #[arg(long, default_value_t = 300)]
    pub images: usize,
    #[arg(long, default_value_t = 256)]
    pub size: u32,
    #[arg(long, default_value = "jpeg")]
    pub codec: CodecId,
    #[arg(long, default_value_t = 150)]
    pub observers: usize,
    /// Spammers from the first item.
    #[arg(long, default_value_t = 8)]
    pub spammers: usize,
    /// Spammers that turn after 1 to 4 honest HITs.
    #[arg(long, default_value_t = 7)]
    pub lapsing: usize,
    #[arg(long, default_value_t = 10.0)]
    pub click_jitter: f64,
    /// Scenario seed; the study seed comes from the config.
    #[arg(long, default_value_t = 2024)]
    pub scenario_seed: u64,
}

#[derive(Debug, Subcommand)]
pub enum QcCmd {
    /// Three-stage filter over an event log.
    Run {
        #[arg(long)]
        events: PathBuf,
        /// Study whose config is used when no `--config` is given.
        #[arg(long)]
        study: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Filtered responses from `qc run`.
    #[arg(long)]
    pub responses: PathBuf,
    #[arg(long)]
    pub study: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub aggregation: PathBuf,
    #[arg(long)]
    pub study: PathBuf,
    /// Stage report to embed in the manifest.
    #[arg(long)]
    pub qc_report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Exported dataset directory.
    #[arg(long)]
    pub dataset: PathBuf,
    /// JSON map of image id to mean PJND, or another dataset directory.
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long, default_value = "jpeg")]
    pub codec: CodecId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Config,
    Input,
    Pipeline,
}

impl Kind {
    fn code(self) -> u8 {
        match self {
            Kind::Config => 2,
            Kind::Input => 3,
            Kind::Pipeline => 4,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Kind::Config => "config",
            Kind::Input => "input",
            Kind::Pipeline => "pipeline",
        }
    }
}

#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub error: anyhow::Error,
}

pub type Outcome<T> = Result<T, Failure>;

pub trait Classify<T> {
    fn or_fail(self, kind: Kind) -> Outcome<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn or_fail(self, kind: Kind) -> Outcome<T> {
        self.map_err(|e| Failure { kind, error: e.into() })
    }
}

pub fn fail<T>(kind: Kind, msg: impl std::fmt::Display) -> Outcome<T> {
    Err(Failure {
        kind,
        error: anyhow::anyhow!("{msg}"),
    })
}

impl Global {
    /// Config file (or `base`, or defaults) with flag overrides applied.
    pub fn config(&self, base: Option<&StudyConfig>) -> Outcome<StudyConfig> {
        let mut cfg = match (&self.config, base) {
            (Some(path), _) => StudyConfig::load(path).or_fail(Kind::Config)?,
            (None, Some(b)) => b.clone(),
            (None, None) => StudyConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(t) = self.target_responses {
            cfg.target_responses = t;
        }
        if let Some(c) = &self.codecs {
            cfg.codecs = c.clone();
        }
        cfg.validate().or_fail(Kind::Config)?;
        Ok(cfg)
    }
}

fn config_help() -> String {
    let width = CONFIG_KEYS.iter().map(|(k, _, _)| k.len()).max().unwrap_or(0);
    let mut s = String::from("Config keys (default, meaning):\n");
    for (key, default, meaning) in CONFIG_KEYS {
        s.push_str(&format!("  {key:<width$}  {default:<14}  {meaning}\n"));
    }
    s
}

fn main() -> ExitCode {
    let matches = Cli::command().after_help(config_help()).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let body = serde_json::json!({
                "error": f.kind.name(),
                "message": f.error.to_string(),
            });
            eprintln!("{body}");
            ExitCode::from(f.kind.code())
        }
    }
}
