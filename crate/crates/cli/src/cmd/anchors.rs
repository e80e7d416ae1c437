use std::io::Write;
use std::path::PathBuf;

use anyhow::Context;
use clap::Args;
use dronedet::anchors::{
    default_configs, generate as generate_set, scale_schedule, ssd300_configs, weighted_scales, LayerAnchorConfig,
    SSD300_IMAGE, LAYER_SIZES,
};
use dronedet::matching::{match_anchors, Label, MatchConfig};
use dronedet::pyramid::INPUT_SIZE;
use rayon::prelude::*;

use crate::config::{AnchorLayout, RunConfig};
use crate::{io, Failure};

/// The eight-level layout with min sizes from the configured schedule and
/// beta. Each max size keeps its default ratio to the min size, so the
/// defaults reproduce `LAYER_SIZES` exactly.
pub fn default_layout(cfg: &RunConfig) -> anyhow::Result<Vec<LayerAnchorConfig>> {
    let schedule = scale_schedule(cfg.s_min, cfg.s_max, LAYER_SIZES.len())?;
    let scales = weighted_scales(&schedule, &cfg.beta)?;
    let mut layers = default_configs();
    for ((layer, s), &(min, max)) in layers.iter_mut().zip(scales).zip(&LAYER_SIZES) {
        let size = (INPUT_SIZE as f64 * s).round();
        if size < 1.0 {
            return Err(Failure::usage("config", format!("{}: min size rounds to {size}", layer.name)).into());
        }
        layer.min_size = size;
        layer.max_size = size * max as f64 / min as f64;
    }
    Ok(layers)
}

pub fn layout(cfg: &RunConfig) -> anyhow::Result<(Vec<LayerAnchorConfig>, usize)> {
    Ok(match cfg.anchor_layout {
        AnchorLayout::Default => (default_layout(cfg)?, INPUT_SIZE),
        AnchorLayout::Ssd300 => (ssd300_configs(), SSD300_IMAGE),
    })
}

fn ratio_text(r: f64) -> String {
    let inv = 1.0 / r;
    if r < 1.0 && (inv - inv.round()).abs() < 1e-9 && inv.round() != 2.0 {
        format!("1/{}", inv.round())
    } else {
        format!("{r}")
    }
}

pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Args, Debug)]
pub struct GenArgs {
    /// Print the per-layer table instead of every box.
    #[arg(long)]
    pub summary: bool,
    /// `default` (eight levels, 512 input) or `ssd300`.
    #[arg(long)]
    pub layout: Option<String>,
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

impl GenArgs {
    pub fn overrides(&self) -> Vec<(&'static str, String)> {
        self.layout.iter().map(|l| ("anchor_layout", l.clone())).collect()
    }
}

pub fn generate(args: &GenArgs, cfg: &RunConfig) -> anyhow::Result<()> {
    let (layers, size) = layout(cfg)?;
    let mut out = io::create(args.out.as_deref())?;
    if args.summary {
        writeln!(out, "# dronedet anchors-summary v1")?;
        writeln!(out, "layer,stride,feature_map,scale,ratios,per_cell,anchors")?;
        for l in &layers {
            let ratios: Vec<String> = l.ratios.iter().map(|&r| ratio_text(r)).collect();
            writeln!(
                out,
                "{},{},{},{}({}),\"1:({})\",{},{}",
                l.name,
                l.stride,
                l.grid.0,
                l.min_size,
                l.max_size,
                ratios.join(","),
                l.per_cell(),
                l.count()
            )?;
        }
        writeln!(out, "total,,,,,,{}", layers.iter().map(LayerAnchorConfig::count).sum::<usize>())?;
    } else {
        let set = generate_set::<f64>(&layers, size)?;
        writeln!(out, "# dronedet anchors v1")?;
        writeln!(out, "layer,cell_y,cell_x,ratio_tag,x_min,y_min,x_max,y_max")?;
        for i in 0..set.len() {
            let at = set.locate(i).expect("index in range");
            let b = set.boxes[i];
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                set.layers[at.layer].name,
                at.row,
                at.col,
                set.slot_tag(at),
                b.x_min,
                b.y_min,
                b.x_max,
                b.y_max
            )?;
        }
    }
    out.flush()?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct MatchArgs {
    /// Canonical annotation file.
    #[arg(long, value_name = "FILE")]
    pub annotations: PathBuf,
    #[arg(long)]
    pub iou_threshold: Option<f64>,
    #[arg(long)]
    pub layout: Option<String>,
    /// Keep records flagged unreliable.
    #[arg(long)]
    pub include_unreliable: bool,
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

impl MatchArgs {
    pub fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut v: Vec<_> = self.layout.iter().map(|l| ("anchor_layout", l.clone())).collect();
        v.extend(self.iou_threshold.map(|t| ("iou_threshold", t.to_string())));
        v
    }
}

struct ImageMatch {
    gts: usize,
    positives: usize,
    forced: usize,
    min_per_gt: Option<usize>,
    per_layer: Vec<usize>,
}

pub fn run_match(args: &MatchArgs, cfg: &RunConfig) -> anyhow::Result<()> {
    let records: Vec<_> = io::read_records(&args.annotations)?
        .into_iter()
        .filter(|r| args.include_unreliable || !r.unreliable)
        .collect();
    let (layers, size) = layout(cfg)?;
    let set = generate_set::<f64>(&layers, size)?;
    let mcfg = MatchConfig {
        threshold: cfg.iou_threshold,
        variances: cfg.variances,
    };
    let results: Vec<ImageMatch> = records
        .par_iter()
        .map(|r| {
            let gts = r.normalized_boxes::<f64>();
            let m = match_anchors(&set.boxes, &gts, &mcfg).with_context(|| format!("image {}", r.image_id))?;
            let mut per_gt = vec![0usize; gts.len()];
            let mut per_layer = vec![0usize; set.layers.len()];
            let mut forced = 0;
            for (i, label) in m.labels.iter().enumerate() {
                if let Label::Positive { gt, forced: f } = label {
                    per_gt[*gt] += 1;
                    forced += usize::from(*f);
                    per_layer[set.locate(i).expect("index in range").layer] += 1;
                }
            }
            Ok(ImageMatch {
                gts: gts.len(),
                positives: m.num_positive(),
                forced,
                min_per_gt: per_gt.iter().copied().min(),
                per_layer,
            })
        })
        .collect::<anyhow::Result<_>>()?;

    let opt = |v: Option<usize>| v.map_or(String::new(), |v| v.to_string());
    let mut out = io::create(args.out.as_deref())?;
    writeln!(out, "# dronedet match v1")?;
    writeln!(out, "kind,key,gts,positives,forced,min_per_gt")?;
    for (r, m) in records.iter().zip(&results) {
        writeln!(
            out,
            "image,{},{},{},{},{}",
            csv_field(&r.image_id),
            m.gts,
            m.positives,
            m.forced,
            opt(m.min_per_gt)
        )?;
    }
    for (k, layer) in set.layers.iter().enumerate() {
        let n: usize = results.iter().map(|m| m.per_layer[k]).sum();
        writeln!(out, "scale,{}({}),,{n},,", layer.name, layers[k].min_size)?;
    }
    let sum = |f: fn(&ImageMatch) -> usize| results.iter().map(f).sum::<usize>();
    let min = results.iter().filter_map(|m| m.min_per_gt).min();
    writeln!(
        out,
        "total,,{},{},{},{}",
        sum(|m| m.gts),
        sum(|m| m.positives),
        sum(|m| m.forced),
        opt(min)
    )?;
    out.flush()?;
    Ok(())
}
