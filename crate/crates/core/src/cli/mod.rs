//! Command-line front end. Every stage reads and writes a run directory and
//! records hashes of what it touched in `manifest.json`, so a stage can be
//! rerun alone once its inputs exist.
//!
//! Exit codes: 0 success, 1 invalid rules, 2 configuration or usage error,
//! 3 missing stage input, 4 stage failure, 5 I/O error.

pub mod config;
pub mod manifest;
pub mod stages;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use crate::llm::BackendKind;
pub use config::{FormatChoice, Overrides, RunConfig};
pub use manifest::{RunManifest, MANIFEST_FILE};
pub use stages::Runner;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{stage}: missing input {path}")]
    StageInputMissing { stage: &'static str, path: String },
    #[error("{stage}: {message}")]
    Stage {
        stage: &'static str,
        message: String,
    },
    #[error("{failed} of {total} rule files failed to compile")]
    Invalid { failed: usize, total: usize },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid { .. } => 1,
            CliError::Config(_) => 2,
            CliError::StageInputMissing { .. } => 3,
            CliError::Stage { .. } => 4,
            CliError::Io(_) => 5,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::StageInputMissing { .. } => "stage_input_missing",
            CliError::Stage { .. } => "stage",
            CliError::Invalid { .. } => "invalid_rules",
            CliError::Io(_) => "io",
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "rulesmith",
    version,
    about = "Generate and evaluate detection rules for malicious packages"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML config, or a run's manifest.json to repeat that run.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; 0 picks one per core.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Seed for clustering and the baseline forest.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub format: Option<FormatChoice>,
    /// Minimum number of matching rules for a package to count as detected.
    #[arg(long, global = true)]
    pub threshold: Option<usize>,
    #[arg(long = "llm-backend", global = true, value_enum)]
    pub llm_backend: Option<BackendArg>,
    /// Record LLM exchanges to this JSONL file.
    #[arg(long = "record-fixtures", global = true)]
    pub record_fixtures: Option<PathBuf>,
    #[arg(long = "allow-network", global = true)]
    pub allow_network: bool,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum BackendArg {
    Remote,
    Replay,
    Record,
}

impl From<BackendArg> for BackendKind {
    fn from(b: BackendArg) -> Self {
        match b {
            BackendArg::Remote => BackendKind::Remote,
            BackendArg::Replay => BackendKind::Replay,
            BackendArg::Record => BackendKind::Record,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Unpack, label and deduplicate package archives.
    Ingest,
    /// Split sources into basic units and audit package metadata.
    Segment,
    /// Embed units and cluster them.
    Cluster,
    /// Draft, refine and align rules with the LLM backend.
    Generate,
    /// Compile rule files and report every error.
    Validate {
        /// Rule files or directories; defaults to the run's rules.
        paths: Vec<PathBuf>,
    },
    /// Match rules against the corpus.
    Scan {
        /// Rule file or directory to scan with instead of the generated rules.
        #[arg(long)]
        rules: Option<PathBuf>,
    },
    /// Confusion metrics, per-rule precision and coverage.
    Eval,
    /// Build the string-scoring baseline rules and evaluate them.
    Baseline,
    /// Taxonomy breakdown, score distributions and overlap.
    Analyze,
    /// Run every stage in order.
    Pipeline,
}

#[derive(Serialize)]
struct ErrorLine<'a> {
    error: &'a str,
    message: String,
    exit_code: i32,
}

fn build_config(g: &GlobalArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(&Overrides {
        out_dir: g.out.clone(),
        jobs: g.jobs,
        seed: g.seed,
        formats: g.format,
        threshold: g.threshold,
        llm_backend: g.llm_backend.map(Into::into),
        record_fixtures: g.record_fixtures.clone(),
        allow_network: g.allow_network,
    })?;
    Ok(cfg)
}

fn print_json<T: Serialize>(value: &T) {
    let mut out = std::io::stdout().lock();
    if let Ok(text) = serde_json::to_string_pretty(value) {
        let _ = writeln!(out, "{text}");
    }
}

/// Runs one command against an already built runner.
pub fn execute(runner: &mut Runner, command: &Command) -> Result<(), CliError> {
    match command {
        Command::Ingest => print_json(&runner.ingest()?),
        Command::Segment => {
            let (units, audit) = runner.segment()?;
            print_json(&serde_json::json!({
                "units": units.len(),
                "packages": audit.len(),
                "flagged_packages": audit.iter().filter(|a| !a.flags.is_empty()).count(),
            }));
        }
        Command::Cluster => {
            let m = runner.cluster()?;
            print_json(&serde_json::json!({
                "k": m.k,
                "k_source": m.k_source,
                "points": m.points,
                "retained": m.clusters.iter().filter(|c| c.retained).count(),
            }));
        }
        Command::Generate => {
            let r = runner.generate()?;
            print_json(&serde_json::json!({
                "jobs": r.jobs,
                "rules": r.rules,
                "failures": r.failures.len(),
                "duplicates": r.duplicates.len(),
            }));
        }
        Command::Validate { paths } => {
            let results = runner.validate(paths)?;
            print_json(&results);
            let failed = results.iter().filter(|v| !v.ok).count();
            if failed > 0 {
                return Err(CliError::Invalid {
                    failed,
                    total: results.len(),
                });
            }
        }
        Command::Scan { rules } => {
            let r = runner.scan(rules.as_deref())?;
            print_json(&serde_json::json!({
                "threshold": r.threshold,
                "detected": r.verdicts.iter().filter(|v| v.predicted).count(),
                "packages": r.verdicts.len(),
                "issues": r.issues.len(),
            }));
        }
        Command::Eval => print_json(&runner.eval()?),
        Command::Baseline => print_json(&runner.baseline()?),
        Command::Analyze => print_json(&runner.analyze()?),
        Command::Pipeline => print_json(&runner.pipeline()?),
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .try_init();
    let result = build_config(&cli.global).and_then(|cfg| {
        if cfg.jobs > 0 {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.jobs)
                .build_global();
        }
        let mut runner = Runner::new(cfg)?;
        execute(&mut runner, &cli.command)
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            let code = e.exit_code();
            let line = ErrorLine {
                error: e.kind(),
                message: e.to_string(),
                exit_code: code,
            };
            if let Ok(text) = serde_json::to_string(&line) {
                eprintln!("{text}");
            }
            code
        }
    }
}
