use clap::{Parser, Subcommand};
use restorebot_core::association::MatchMode;
use restorebot_core::config::PipelineConfig;
use restorebot_core::pipeline::{self, Layout, PipelineError};
use serde_json::json;
use std::path::PathBuf;
use std::process::ExitCode;

/// Post-deployment pipeline for rangeland survey sessions.
#[derive(Debug, Parser)]
#[command(name = "restorebot", version)]
struct Cli {
    /// Pipeline configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory holding every artifact.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Cross-season matching mode.
    #[arg(long, global = true, value_parser = parse_mode)]
    mode: Option<MatchMode>,
    /// Comma-separated pose drift sigmas (meters) for the report sweep.
    #[arg(long, global = true, value_delimiter = ',', num_args = 1..)]
    noise_sweep: Option<Vec<f64>>,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a world and one session per season.
    Generate,
    /// Build a season map for every session.
    Map,
    /// Match season maps and track landmark persistence.
    Associate,
    /// Score matches against simulator truth.
    Evaluate,
    /// Write CSV tables and SVG plots.
    Report,
}

fn parse_mode(s: &str) -> Result<MatchMode, String> {
    s.parse()
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Pipeline(PipelineError),
}

impl Failure {
    fn record(&self) -> serde_json::Value {
        let (kind, message) = match self {
            Failure::Usage(m) => ("usage", m.clone()),
            Failure::Pipeline(e) => (e.kind(), e.to_string()),
        };
        json!({ "error": { "kind": kind, "message": message } })
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure::Pipeline(e)
    }
}

fn run(cli: Cli) -> Result<serde_json::Value, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p).map_err(PipelineError::from)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(mode) = cli.mode {
        cfg = cfg.with_mode(mode);
    }
    if let Some(s) = &cli.noise_sweep {
        if s.iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
            return Err(Failure::Usage("--noise-sweep sigmas must be finite and non-negative".into()));
        }
    }
    let layout = Layout::new(&cli.out);
    let summary = match cli.command {
        Command::Generate => {
            let ids = pipeline::generate(&cfg, &layout)?;
            json!({ "command": "generate", "sessions": ids })
        }
        Command::Map => {
            let ids = pipeline::map(&cfg, &layout)?;
            json!({ "command": "map", "maps": ids })
        }
        Command::Associate => {
            let r = pipeline::associate(&cfg, &layout)?;
            let matches: usize = r.pairs.iter().map(|p| p.matches.len()).sum();
            json!({
                "command": "associate",
                "mode": cfg.association.matching.mode.as_str(),
                "pairs": r.pairs.len(),
                "matches": matches,
                "tracks": r.tracks.len(),
            })
        }
        Command::Evaluate => {
            let r = pipeline::evaluate(&cfg, &layout)?;
            json!({
                "command": "evaluate",
                "mode": r.mode.as_str(),
                "precision": r.mean_precision,
                "recall": r.mean_recall,
                "f1": r.mean_f1,
            })
        }
        Command::Report => {
            let files = pipeline::report(&cfg, &layout, cli.noise_sweep.as_deref())?;
            let files: Vec<String> = files.iter().map(|p| p.display().to_string()).collect();
            json!({ "command": "report", "files": files })
        }
    };
    Ok(summary)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // help and version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let f = Failure::Usage(e.to_string().trim().to_string());
            eprintln!("{}", f.record());
            return ExitCode::from(2);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("{}", f.record());
            ExitCode::FAILURE
        }
    }
}
