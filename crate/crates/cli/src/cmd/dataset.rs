use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Subcommand};
use dronedet::datasetio::{
    ingest, split, stats, tag_scenario, write_canonical, AnnotationRecord, Layout, Reject, Scenario, ScenarioRules,
    Source,
};

use crate::config::RunConfig;
use crate::{io, Failure};

#[derive(Subcommand, Debug)]
pub enum DatasetCommand {
    /// Convert a source layout to the canonical annotation format.
    Ingest(IngestArgs),
    /// Seeded, source-stratified train/validation split.
    Split(SplitArgs),
    /// Attach scenario tags from record metadata.
    Tag(TagArgs),
    /// Per-source image, box, scenario and size counts.
    Stats(StatsArgs),
}

impl DatasetCommand {
    pub fn overrides(&self) -> Vec<(&'static str, String)> {
        match self {
            DatasetCommand::Split(a) => a.val_fraction.map(|f| ("val_fraction", f.to_string())).into_iter().collect(),
            _ => Vec::new(),
        }
    }
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    /// One of canonical, real_world, det_fly, midgard, drone_vs_bird, usc_drone.
    #[arg(long)]
    pub layout: String,
    /// Dataset directory (or a single annotation file).
    #[arg(long, value_name = "PATH")]
    pub root: PathBuf,
    /// Canonical output (`-` for stdout).
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Rejects report; without it rejects are printed as warnings.
    #[arg(long, value_name = "FILE")]
    pub rejects: Option<PathBuf>,
    /// Tag scenarios while ingesting.
    #[arg(long)]
    pub tag: bool,
    /// Scenario rules file (`<source|*> <key> <value> <scenario>` lines).
    #[arg(long, value_name = "FILE")]
    pub rules: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    /// Receives `train.tsv` and `val.tsv`.
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub val_fraction: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TagArgs {
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub rules: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

pub fn run(cmd: &DatasetCommand, cfg: &RunConfig) -> anyhow::Result<()> {
    match cmd {
        DatasetCommand::Ingest(a) => run_ingest(a),
        DatasetCommand::Split(a) => run_split(a, cfg),
        DatasetCommand::Tag(a) => run_tag(a),
        DatasetCommand::Stats(a) => run_stats(a),
    }
}

fn load_rules(path: Option<&Path>) -> anyhow::Result<ScenarioRules> {
    match path {
        Some(p) => {
            io::require_file(p)?;
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(ScenarioRules::parse(&text).with_context(|| format!("rules file {}", p.display()))?)
        }
        None => Ok(ScenarioRules::default()),
    }
}

fn write_records(path: Option<&Path>, records: &[AnnotationRecord]) -> anyhow::Result<()> {
    let mut out = io::create(path)?;
    write_canonical(records, &mut out)?;
    out.flush()?;
    Ok(())
}

fn write_rejects(path: &Path, rejects: &[Reject]) -> anyhow::Result<()> {
    let mut out = io::create(Some(path))?;
    writeln!(out, "# dronedet rejects v1")?;
    writeln!(out, "file\tline\taction\treason")?;
    for r in rejects {
        let line = r.line.map_or("-".to_string(), |l| l.to_string());
        writeln!(out, "{}\t{line}\t{}\t{}", r.file, r.action.name(), r.reason.replace(['\t', '\n'], " "))?;
    }
    out.flush()?;
    Ok(())
}

fn run_ingest(a: &IngestArgs) -> anyhow::Result<()> {
    let layout: Layout = a.layout.parse().map_err(|e: dronedet::Error| Failure::usage("usage", e.to_string()))?;
    if !a.root.exists() {
        return Err(Failure::new("input", format!("{} does not exist", a.root.display())).into());
    }
    let rules = load_rules(a.rules.as_deref())?;
    let result = ingest(layout, &a.root)?;
    let records = if a.tag || a.rules.is_some() {
        tag_scenario(result.records, &rules)
    } else {
        result.records
    };
    write_records(Some(&a.out), &records)?;
    match &a.rejects {
        Some(p) => write_rejects(p, &result.rejects)?,
        None => io::warn_rejects(&result.rejects),
    }
    let boxes: usize = records.iter().map(|r| r.boxes.len()).sum();
    eprintln!("records={} boxes={boxes} rejects={}", records.len(), result.rejects.len());
    Ok(())
}

fn run_split(a: &SplitArgs, cfg: &RunConfig) -> anyhow::Result<()> {
    let records = io::read_records(&a.input)?;
    let (train, val) = split(&records, cfg.val_fraction, cfg.seed)?;
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    write_records(Some(&a.out_dir.join("train.tsv")), &train)?;
    write_records(Some(&a.out_dir.join("val.tsv")), &val)?;
    let count = |rs: &[AnnotationRecord]| {
        let mut m: BTreeMap<Source, usize> = BTreeMap::new();
        for r in rs {
            *m.entry(r.source).or_default() += 1;
        }
        m
    };
    let (t, v) = (count(&train), count(&val));
    let mut out = io::create(None)?;
    writeln!(out, "# dronedet split v1")?;
    writeln!(out, "source,total,train,val")?;
    for s in Source::ALL {
        let (nt, nv) = (t.get(&s).copied().unwrap_or(0), v.get(&s).copied().unwrap_or(0));
        if nt + nv > 0 {
            writeln!(out, "{s},{},{nt},{nv}", nt + nv)?;
        }
    }
    writeln!(out, "total,{},{},{}", records.len(), train.len(), val.len())?;
    out.flush()?;
    Ok(())
}

fn run_tag(a: &TagArgs) -> anyhow::Result<()> {
    let rules = load_rules(a.rules.as_deref())?;
    let records = tag_scenario(io::read_records(&a.input)?, &rules);
    write_records(a.out.as_deref(), &records)
}

fn run_stats(a: &StatsArgs) -> anyhow::Result<()> {
    let records = io::read_records(&a.input)?;
    let per_source = stats(&records);
    let mut out = io::create(a.out.as_deref())?;
    writeln!(out, "# dronedet dataset-stats v1")?;
    writeln!(
        out,
        "source,images,boxes,empty_images,unreliable,indoor,urban,countryside,small,medium,large"
    )?;
    let mut total = [0usize; 10];
    for (source, s) in &per_source {
        let sc = |k: Scenario| s.scenarios.get(&k).copied().unwrap_or(0);
        let row = [
            s.images,
            s.boxes,
            s.empty_images,
            s.unreliable,
            sc(Scenario::Indoor),
            sc(Scenario::Urban),
            sc(Scenario::Countryside),
            s.sizes[0],
            s.sizes[1],
            s.sizes[2],
        ];
        for (t, v) in total.iter_mut().zip(row) {
            *t += v;
        }
        writeln!(out, "{source},{}", super::join(&row))?;
    }
    writeln!(out, "total,{}", super::join(&total))?;
    out.flush()?;
    Ok(())
}
