use std::io::Write;
use std::path::PathBuf;

use clap::Args;
use dronedet::anchors::LAYER_COUNTS;
use dronedet::dilation::{coverage_map, hdc_check, hdc_distances, plan_rates, reach};
use dronedet::graph::{forward, Retain, Weights};
use dronedet::pyramid::{build_detector, level_table, BackboneConfig, INPUT_SIZE};
use dronedet::{Grid, Shape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{join, parse_rates};
use crate::config::RunConfig;
use crate::{io, Failure};

/// Background plus drone.
const NUM_CLASSES: usize = 2;

#[derive(Args, Debug)]
pub struct ValidateArgs {
    /// Divides every channel width (must divide 64).
    #[arg(long)]
    pub width_divisor: Option<usize>,
    /// Also run a seeded forward pass and compare executed shapes.
    #[arg(long)]
    pub forward: bool,
    /// Writes the graph in its text format.
    #[arg(long, value_name = "FILE")]
    pub dump: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

impl ValidateArgs {
    pub fn overrides(&self) -> Vec<(&'static str, String)> {
        self.width_divisor.map(|d| ("width_divisor", d.to_string())).into_iter().collect()
    }
}

pub fn validate(args: &ValidateArgs, cfg: &RunConfig) -> anyhow::Result<()> {
    let backbone = BackboneConfig {
        width_divisor: cfg.width_divisor,
        center_rates: cfg.center_rates.clone(),
        ..BackboneConfig::default()
    };
    let layers = super::anchors::default_layout(cfg)?;
    let per_cell: Vec<usize> = layers.iter().map(|l| l.per_cell()).collect();
    let graph = build_detector(&backbone, &per_cell, NUM_CLASSES)?;
    let table = level_table(&graph)?;

    let mut out = io::create(args.out.as_deref())?;
    writeln!(out, "# dronedet arch-table v1")?;
    writeln!(out, "level,tag,stride,feature_map,channels,anchors_per_cell,anchors")?;
    let mut total = 0;
    for (row, layer) in table.iter().zip(&layers) {
        total += layer.count();
        writeln!(
            out,
            "{},of_{},{},{},{},{},{}",
            row.level,
            row.level,
            row.stride,
            row.size,
            row.channels,
            layer.per_cell(),
            layer.count()
        )?;
    }
    writeln!(out, "total,,,,,,{total}")?;
    out.flush()?;

    let mut failed = Vec::new();
    let mut check = |name: &str, ok: bool| {
        eprintln!("check {name}={}", if ok { "pass" } else { "fail" });
        if !ok {
            failed.push(name.to_string());
        }
    };
    check(
        "strides",
        table.iter().enumerate().all(|(k, r)| r.stride == 4 << k && r.size == 128 >> k),
    );
    let counts: Vec<usize> = layers.iter().map(|l| l.count()).collect();
    check("anchor_counts", counts == LAYER_COUNTS);
    for (name, rates) in graph.dilation_groups() {
        check(&format!("hdc.{name}"), hdc_check(rates, 3)?.pass);
    }
    if args.forward {
        let weights = Weights::<f32>::seeded(&graph, cfg.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let image = Grid::from_fn(Shape::new(3, INPUT_SIZE, INPUT_SIZE), |_, _, _| rng.gen_range(-1.0f32..1.0))?;
        let acts = forward(&graph, &weights, &[image], Retain::Tagged)?;
        check("forward_shapes", acts.executed_shapes() == graph.infer_shapes()?.as_slice());
    }
    if let Some(path) = &args.dump {
        std::fs::write(path, graph.to_text())?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::new("check", format!("failed checks: {}", failed.join(", "))).into())
    }
}

#[derive(Args, Debug)]
pub struct PlanArgs {
    /// Number of serial dilated convolutions to plan.
    #[arg(long, default_value_t = 3)]
    pub depth: usize,
    #[arg(long, default_value_t = 3)]
    pub kernel: usize,
    /// Check this sequence instead of planning one.
    #[arg(long, value_name = "R1,R2,..")]
    pub rates: Option<String>,
}

pub fn plan(args: &PlanArgs) -> anyhow::Result<()> {
    if args.depth == 0 {
        return Err(Failure::usage("usage", "depth must be at least 1").into());
    }
    let rates = match &args.rates {
        Some(s) => parse_rates(s)?,
        None => plan_rates(args.depth, args.kernel),
    };
    let m = hdc_distances(&rates, args.kernel)?;
    let verdict = hdc_check(&rates, args.kernel)?;
    let map = coverage_map(&rates, args.kernel, 2 * reach(&rates, args.kernel) + 1)?;
    let mut out = io::create(None)?;
    writeln!(out, "# dronedet dilation-plan v1")?;
    writeln!(out, "rates={}", join(&rates))?;
    writeln!(out, "kernel={}", args.kernel)?;
    writeln!(out, "max_distances={}", join(&m))?;
    writeln!(out, "m2={}", verdict.m2.map_or("-".to_string(), |v| v.to_string()))?;
    writeln!(out, "hdc={}", if verdict.pass { "pass" } else { "fail" })?;
    writeln!(out, "holes={}", map.hole_count())?;
    out.flush()?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct CoverageArgs {
    #[arg(long, default_value = "1,2,3", value_name = "R1,R2,..")]
    pub rates: String,
    #[arg(long, default_value_t = 3)]
    pub kernel: usize,
    /// Grid side; defaults to the receptive field plus a one-cell margin.
    #[arg(long)]
    pub grid: Option<usize>,
    #[arg(long, value_name = "FILE")]
    pub csv: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub svg: Option<PathBuf>,
    /// Cell side in the SVG, pixels.
    #[arg(long, default_value_t = 16)]
    pub cell_px: usize,
}

pub fn coverage(args: &CoverageArgs) -> anyhow::Result<()> {
    let rates = parse_rates(&args.rates)?;
    let grid = args.grid.unwrap_or(2 * reach(&rates, args.kernel) + 3);
    let map = coverage_map(&rates, args.kernel, grid)?;
    let verdict = hdc_check(&rates, args.kernel)?;
    let mut out = io::create(None)?;
    writeln!(out, "# dronedet coverage-summary v1")?;
    writeln!(out, "rates={}", join(&rates))?;
    writeln!(out, "kernel={}", args.kernel)?;
    writeln!(out, "grid={grid}")?;
    writeln!(out, "reach={}", reach(&rates, args.kernel))?;
    writeln!(out, "total={}", map.total())?;
    writeln!(out, "hole_count={}", map.hole_count())?;
    writeln!(out, "holes={}", map.has_holes())?;
    writeln!(out, "hdc={}", if verdict.pass { "pass" } else { "fail" })?;
    let width = map.counts.iter().max().map_or(1, |m| m.to_string().len());
    for y in 0..map.size {
        let row: Vec<String> = (0..map.size).map(|x| format!("{:>width$}", map.get(y, x))).collect();
        writeln!(out, "{}", row.join(" "))?;
    }
    out.flush()?;
    if let Some(p) = &args.csv {
        std::fs::write(p, map.to_csv())?;
    }
    if let Some(p) = &args.svg {
        std::fs::write(p, map.to_svg(args.cell_px))?;
    }
    Ok(())
}
