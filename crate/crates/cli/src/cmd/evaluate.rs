use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use dronedet::datasetio::Scenario;
use dronedet::evalkit::{coco_summary, report_csv, report_svg, EvalDet, GtBox};
use dronedet::BBox;

use crate::{io, Failure};

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Canonical annotation file with the ground truth.
    #[arg(long, value_name = "FILE")]
    pub gt: PathBuf,
    /// Detections, one `image_id x_min y_min x_max y_max score` per line.
    #[arg(long, value_name = "FILE")]
    pub det: PathBuf,
    /// Directory for `report.csv` and `pr_curves.svg`.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Keep records flagged unreliable.
    #[arg(long)]
    pub include_unreliable: bool,
    /// Restrict to images tagged with this scenario.
    #[arg(long)]
    pub scenario: Option<String>,
}

/// Pixel detections; ids are the 0-based order of detection lines.
pub fn read_detections(path: &Path) -> anyhow::Result<Vec<EvalDet<f64>>> {
    io::require_file(path)?;
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut dets = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let t: Vec<&str> = line.split_whitespace().collect();
        let bad = |why: &str| Failure::new("parse", format!("{}:{}: {why}", path.display(), i + 1));
        if t.len() != 6 {
            return Err(bad(&format!("expected 6 fields, found {}", t.len())).into());
        }
        let v: Vec<f64> = t[1..]
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| bad("non-numeric field"))?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(bad("non-finite value").into());
        }
        let bbox = BBox::new(v[0], v[1], v[2], v[3]);
        if !bbox.is_valid() {
            return Err(bad("box has min > max").into());
        }
        dets.push(EvalDet {
            id: dets.len(),
            image_id: t[0].to_string(),
            bbox,
            score: v[4],
        });
    }
    Ok(dets)
}

pub fn run(args: &EvaluateArgs) -> anyhow::Result<()> {
    let scenario: Option<Scenario> = match &args.scenario {
        Some(s) => Some(s.parse().map_err(|e: dronedet::Error| Failure::usage("usage", e.to_string()))?),
        None => None,
    };
    let records: Vec<_> = io::read_records(&args.gt)?
        .into_iter()
        .filter(|r| args.include_unreliable || !r.unreliable)
        .filter(|r| scenario.is_none_or(|s| r.scenario == Some(s)))
        .collect();
    let images: BTreeSet<&str> = records.iter().map(|r| r.image_id.as_str()).collect();
    let gts: Vec<GtBox<f64>> = records
        .iter()
        .flat_map(|r| {
            r.boxes.iter().map(|b| GtBox {
                image_id: r.image_id.clone(),
                bbox: *b,
            })
        })
        .collect();
    let all = read_detections(&args.det)?;
    let total = all.len();
    let dets: Vec<_> = all.into_iter().filter(|d| images.contains(d.image_id.as_str())).collect();
    if dets.len() < total {
        eprintln!("warning: {} detections on images outside the evaluated set were ignored", total - dets.len());
    }
    let report = coco_summary(&dets, &gts)?;

    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    std::fs::write(args.out.join("report.csv"), report_csv(&report))?;
    std::fs::write(args.out.join("pr_curves.svg"), report_svg(&report))?;
    let mut out = io::create(None)?;
    writeln!(out, "# dronedet eval-summary v1")?;
    writeln!(out, "images={}", images.len())?;
    writeln!(out, "ground_truths={}", gts.len())?;
    writeln!(out, "detections={}", dets.len())?;
    for (name, v) in report.metrics() {
        writeln!(out, "{name}={v}")?;
    }
    out.flush()?;
    Ok(())
}
