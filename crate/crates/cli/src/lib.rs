//! Experiment driver: `molrmog <subcommand> --config FILE [--set k=v]...
//! [--seed N] [--out DIR]`.
//!
//! Every subcommand validates the whole configuration first, runs inside a
//! worker pool sized by `threads` (or `MOLRG_THREADS`), writes its artifacts
//! and records itself in `manifest.json`.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;
pub mod report;

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::Parser;

use crate::artifacts::{versions, Artifacts, Manifest, RunRecord};
use crate::config::{ExperimentConfig, Threads};
pub use crate::error::{CliError, CliResult};

pub const THREADS_ENV: &str = "MOLRG_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subcommand {
    Gen,
    ScoreCheck,
    Estimation,
    Hessian,
    Overlap,
    Train,
    Sample,
    Report,
}

impl Subcommand {
    pub const ALL: [Subcommand; 8] = [
        Subcommand::Gen,
        Subcommand::ScoreCheck,
        Subcommand::Estimation,
        Subcommand::Hessian,
        Subcommand::Overlap,
        Subcommand::Train,
        Subcommand::Sample,
        Subcommand::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Subcommand::Gen => "gen",
            Subcommand::ScoreCheck => "score-check",
            Subcommand::Estimation => "estimation",
            Subcommand::Hessian => "hessian",
            Subcommand::Overlap => "overlap",
            Subcommand::Train => "train",
            Subcommand::Sample => "sample",
            Subcommand::Report => "report",
        }
    }
}

impl FromStr for Subcommand {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| CliError::UnknownSubcommand(s.to_string()))
    }
}

#[derive(Debug, Parser)]
#[command(name = "molrmog", version, about = "Run MoLR-MoG diffusion experiments and write CSV/JSON artifacts")]
pub struct Args {
    /// One of gen, score-check, estimation, hessian, overlap, train, sample, report.
    pub subcommand: String,
    /// JSON experiment configuration (optional for `report` when `--out` is given).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dot-path override such as `gd.m_max=200`; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; overrides `out_dir` from the configuration.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Outcome of a finished subcommand.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub files: Vec<String>,
}

fn resolve_threads(cfg: Option<Threads>) -> CliResult<usize> {
    let requested = match std::env::var(THREADS_ENV) {
        Ok(v) if v.trim().eq_ignore_ascii_case("auto") => Threads::default(),
        Ok(v) => Threads::Count(
            v.trim()
                .parse()
                .map_err(|_| CliError::Validation(format!("{THREADS_ENV}={v} is neither a count nor `auto`")))?,
        ),
        Err(_) => cfg.unwrap_or_default(),
    };
    Ok(match requested {
        Threads::Count(0) => return Err(CliError::Validation("thread count must be positive".into())),
        Threads::Count(n) => n,
        Threads::Auto(_) => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    })
}

fn load_config(args: &Args) -> CliResult<ExperimentConfig> {
    let path = args
        .config
        .as_deref()
        .ok_or_else(|| CliError::ConfigParse("--config FILE is required".into()))?;
    let mut cfg = ExperimentConfig::load(path, &args.overrides)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn dispatch(cmd: Subcommand, cfg: Option<&ExperimentConfig>, dir: &Path, out: &mut Artifacts) -> CliResult<()> {
    if cmd == Subcommand::Report {
        return report::write(dir, out);
    }
    let cfg = cfg.expect("non-report subcommands always load a config");
    let model = cfg.validate()?;
    match cmd {
        Subcommand::Gen => commands::gen(cfg, &model, out),
        Subcommand::ScoreCheck => commands::score_check(cfg, &model, out),
        Subcommand::Estimation => commands::estimation(cfg, &model, out),
        Subcommand::Hessian => commands::hessian(cfg, &model, out),
        Subcommand::Overlap => commands::overlap(cfg, &model, out),
        Subcommand::Train => commands::train(cfg, &model, out),
        Subcommand::Sample => commands::sample(cfg, &model, out),
        Subcommand::Report => unreachable!(),
    }
}

/// Runs one subcommand. Once the output directory is known, the manifest
/// records the outcome whether or not the run succeeds.
pub fn execute(args: &Args) -> CliResult<RunSummary> {
    let cmd: Subcommand = args.subcommand.parse()?;
    let cfg = if cmd == Subcommand::Report && args.config.is_none() {
        None
    } else {
        Some(load_config(args)?)
    };
    let dir = match (&cfg, &args.out) {
        (Some(c), _) => c.out_dir.clone(),
        (None, Some(out)) => out.clone(),
        (None, None) => return Err(CliError::ConfigParse("report needs --config or --out".into())),
    };
    let start = Instant::now();
    let mut out = Artifacts::create(&dir)?;
    let threads = resolve_threads(cfg.as_ref().map(|c| c.threads));
    let result = threads.and_then(|n| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Validation(format!("cannot start {n} worker threads: {e}")))?;
        pool.install(|| dispatch(cmd, cfg.as_ref(), &dir, &mut out)).map(|_| n)
    });
    let record = RunRecord {
        status: if result.is_ok() { "ok" } else { "failed" }.to_string(),
        error_kind: result.as_ref().err().map(|e| e.kind().to_string()),
        error: result.as_ref().err().map(|e| e.to_string()),
        config_hash: cfg.as_ref().map(ExperimentConfig::hash),
        seed: cfg.as_ref().map(|c| c.seed),
        threads: *result.as_ref().unwrap_or(&0),
        versions: versions(),
        wall_time_s: start.elapsed().as_secs_f64(),
        files: out.files().to_vec(),
    };
    Manifest::record(&dir, cmd.name(), record)?;
    result?;
    Ok(RunSummary {
        out_dir: dir,
        files: out.files().to_vec(),
    })
}

/// Parses `argv` (including the program name), runs, and returns the exit
/// status: 0 on success, 2 for usage or validation errors, 3 for numerical
/// failures.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args = match Args::try_parse_from(argv) {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&args) {
        Ok(summary) => {
            for f in &summary.files {
                println!("{}", summary.out_dir.join(f).display());
            }
            0
        }
        Err(e) => {
            eprintln!("error [{}]: {e}", e.kind());
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subcommand_names_round_trip() {
        for c in Subcommand::ALL {
            assert_eq!(c.name().parse::<Subcommand>().unwrap(), c);
        }
        assert!(matches!("fit".parse::<Subcommand>(), Err(CliError::UnknownSubcommand(_))));
    }

    #[test]
    fn missing_config_file_exits_with_two() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("absent.json");
        let code = run(["molrmog", "gen", "--config", cfg.to_str().unwrap()]);
        assert_eq!(code, 2);
    }
}
