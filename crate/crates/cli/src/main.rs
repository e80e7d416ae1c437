//! `dronedet` command-line front end.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
//! Failures end with one line `error: kind=<kind> msg=<message>` on stderr.

mod cmd;
mod config;
mod io;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand};

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "dronedet", version, about = "Drone detection toolkit: architecture checks, anchors, matching, augmentation, evaluation and dataset tools")]
struct Cli {
    /// Flat `key = value` run configuration.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Overrides one configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (0 = one per core).
    #[arg(long, global = true, env = "DRONEDET_WORKERS")]
    workers: Option<usize>,

    /// Writes the effective configuration to FILE (`-` for stderr).
    #[arg(long, global = true, value_name = "FILE")]
    dump_config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the detector graph and print the pyramid table.
    ValidateArch(cmd::arch::ValidateArgs),
    /// Plan or check serial dilation rates.
    PlanDilations(cmd::arch::PlanArgs),
    /// Tap-path coverage of stacked dilated convolutions.
    CoverageMap(cmd::arch::CoverageArgs),
    /// Enumerate default boxes as CSV or print the per-layer summary.
    GenAnchors(cmd::anchors::GenArgs),
    /// Match annotated boxes to the anchor set.
    Match(cmd::anchors::MatchArgs),
    /// Run the augmentation pipeline over annotated images.
    Augment(cmd::augment::AugmentArgs),
    /// COCO-style evaluation of detections against annotations.
    Evaluate(cmd::evaluate::EvaluateArgs),
    /// Ingest, split, tag and summarize annotation sets.
    #[command(subcommand)]
    Dataset(cmd::dataset::DatasetCommand),
}

/// Error carrying its machine-readable kind.
#[derive(Debug)]
pub struct Failure {
    pub kind: &'static str,
    pub msg: String,
    pub usage: bool,
}

impl Failure {
    pub fn new(kind: &'static str, msg: impl Into<String>) -> Self {
        Failure {
            kind,
            msg: msg.into(),
            usage: false,
        }
    }

    pub fn usage(kind: &'static str, msg: impl Into<String>) -> Self {
        Failure {
            usage: true,
            ..Failure::new(kind, msg)
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl std::error::Error for Failure {}

fn classify(e: &anyhow::Error) -> (&'static str, bool) {
    for cause in e.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return (f.kind, f.usage);
        }
        if let Some(d) = cause.downcast_ref::<dronedet::Error>() {
            return (d.kind(), false);
        }
        if cause.is::<std::io::Error>() {
            return ("io", false);
        }
        if cause.is::<image::ImageError>() {
            return ("image", false);
        }
    }
    ("runtime", false)
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.load(path)?;
    }
    for pair in &cli.set {
        cfg.set_pair(pair).map_err(|e| Failure::usage("config", e))?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    let flags = match &cli.command {
        Command::ValidateArch(a) => a.overrides(),
        Command::GenAnchors(a) => a.overrides(),
        Command::Match(a) => a.overrides(),
        Command::Augment(a) => a.overrides(),
        Command::Dataset(d) => d.overrides(),
        _ => Vec::new(),
    };
    for (k, v) in flags {
        cfg.set(k, &v).map_err(|e| Failure::usage("config", e))?;
    }
    cfg.validate().map_err(|e| Failure::usage("config", e))?;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = resolve_config(&cli)?;
    eprintln!("seed={}", cfg.seed);
    if let Some(path) = &cli.dump_config {
        if path.as_os_str() == "-" {
            eprint!("{}", cfg.to_text());
        } else {
            std::fs::write(path, cfg.to_text())?;
        }
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build()?;
    pool.install(|| match cli.command {
        Command::ValidateArch(a) => cmd::arch::validate(&a, &cfg),
        Command::PlanDilations(a) => cmd::arch::plan(&a),
        Command::CoverageMap(a) => cmd::arch::coverage(&a),
        Command::GenAnchors(a) => cmd::anchors::generate(&a, &cfg),
        Command::Match(a) => cmd::anchors::run_match(&a, &cfg),
        Command::Augment(a) => cmd::augment::run(&a, &cfg),
        Command::Evaluate(a) => cmd::evaluate::run(&a),
        Command::Dataset(d) => cmd::dataset::run(&d, &cfg),
    })
}

fn main() -> ExitCode {
    if std::env::args_os().len() <= 1 {
        eprintln!("{}", Cli::command().render_help());
        return ExitCode::from(2);
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let rendered = e.render().to_string();
            let first = rendered.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", Cli::command().render_usage());
            eprintln!("error: kind=usage msg={}", one_line(first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, usage) = classify(&e);
            eprintln!("error: kind={kind} msg={}", one_line(&format!("{e:#}")));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
