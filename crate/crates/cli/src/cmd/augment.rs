use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use dronedet::augment::{pipeline, write_ppm, Branch, LabeledBox, Sample, Trace};
use dronedet::datasetio::{to_normalized, to_pixels, write_canonical, AnnotationRecord};
use dronedet::{Grid, Shape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::anchors::csv_field;
use crate::config::RunConfig;
use crate::{io, Failure};

/// Records processed concurrently; bounds peak memory.
const CHUNK: usize = 32;

#[derive(Args, Debug)]
pub struct AugmentArgs {
    /// Canonical annotation file.
    #[arg(long, value_name = "FILE")]
    pub annotations: PathBuf,
    /// Root for relative image paths; defaults to the annotation file's directory.
    #[arg(long, value_name = "DIR")]
    pub images: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Also write every augmented image as a PPM.
    #[arg(long)]
    pub preview: bool,
    /// Augmented samples per record.
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    /// Use only the first N records.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub crop_prob: Option<f64>,
    #[arg(long)]
    pub output_size: Option<usize>,
    #[arg(long)]
    pub include_unreliable: bool,
}

impl AugmentArgs {
    pub fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut v: Vec<_> = self.crop_prob.map(|p| ("crop_prob", p.to_string())).into_iter().collect();
        v.extend(self.output_size.map(|s| ("output_size", s.to_string())));
        v
    }
}

fn load(root: &Path, r: &AnnotationRecord) -> anyhow::Result<Sample<f32>> {
    let path = root.join(&r.image_path);
    let img = image::open(&path).with_context(|| format!("loading {}", path.display()))?.to_rgb8();
    if (img.width(), img.height()) != (r.width, r.height) {
        return Err(Failure::new(
            "input",
            format!(
                "{} is {}x{}, annotation says {}x{}",
                path.display(),
                img.width(),
                img.height(),
                r.width,
                r.height
            ),
        )
        .into());
    }
    let shape = Shape::new(3, r.height as usize, r.width as usize);
    let grid = Grid::from_fn(shape, |c, y, x| f32::from(img.get_pixel(x as u32, y as u32)[c]) / 255.0)?;
    let gts = r
        .boxes
        .iter()
        .map(|b| LabeledBox {
            bbox: to_normalized::<f32>(b, r.width, r.height),
            class_id: 1,
        })
        .collect();
    Ok(Sample::new(grid, gts)?)
}

struct Output {
    record: AnnotationRecord,
    trace: Trace,
    image: Option<Grid<f32>>,
}

fn trace_row(n: usize, source_id: &str, t: &Trace, boxes: usize) -> String {
    let (branch, gt, rho, sigma, fallback) = match t.branch {
        Branch::Crop(c) => ("crop", c.gt_index.to_string(), c.rho.to_string(), String::new(), false),
        Branch::Blur { sigma, fallback } => ("blur", String::new(), String::new(), sigma.to_string(), fallback),
    };
    format!(
        "{n},{},{branch},{gt},{rho},{sigma},{},{},{},{boxes}",
        csv_field(source_id),
        u8::from(fallback),
        u8::from(t.flipped),
        u8::from(t.jittered)
    )
}

/// Each sample draws from its own ChaCha stream (`seed`, sample index), so
/// results do not depend on the worker count.
pub fn run(args: &AugmentArgs, cfg: &RunConfig) -> anyhow::Result<()> {
    if args.repeats == 0 {
        return Err(Failure::usage("usage", "repeats must be at least 1").into());
    }
    let mut records: Vec<_> = io::read_records(&args.annotations)?
        .into_iter()
        .filter(|r| args.include_unreliable || !r.unreliable)
        .collect();
    if let Some(n) = args.limit {
        records.truncate(n);
    }
    let root = match &args.images {
        Some(dir) => dir.clone(),
        None => args.annotations.parent().unwrap_or(Path::new(".")).to_path_buf(),
    };
    io::require_dir(&root)?;
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let aug = cfg.augment();
    let size = aug.output_size as u32;

    let mut trace = io::create(Some(&args.out.join("trace.csv")))?;
    writeln!(trace, "# dronedet augment-trace v1")?;
    writeln!(trace, "sample,image_id,branch,gt_index,rho,sigma,fallback,flipped,jittered,boxes")?;
    let mut produced = Vec::new();
    for (chunk_no, chunk) in records.chunks(CHUNK).enumerate() {
        let outputs: Vec<Vec<Output>> = chunk
            .par_iter()
            .enumerate()
            .map(|(i, r)| {
                let sample = load(&root, r)?;
                (0..args.repeats)
                    .map(|k| {
                        let n = (chunk_no * CHUNK + i) * args.repeats + k;
                        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                        rng.set_stream(n as u64);
                        let (s, t) = pipeline(&sample, &aug, &mut rng)?;
                        let mut rec = AnnotationRecord::new(format!("{}#{k}", r.image_id), format!("{n:06}.ppm"), size, size, r.source);
                        rec.boxes = s.gts.iter().map(|g| to_pixels(&g.bbox, size, size)).collect();
                        rec.scenario = r.scenario;
                        rec.unreliable = r.unreliable;
                        rec.meta.insert("augmented_from".into(), r.image_id.clone());
                        Ok(Output {
                            record: rec,
                            trace: t,
                            image: args.preview.then_some(s.image),
                        })
                    })
                    .collect::<anyhow::Result<Vec<_>>>()
            })
            .collect::<anyhow::Result<_>>()?;
        for o in outputs.into_iter().flatten() {
            let n = produced.len();
            let source = o.record.meta["augmented_from"].clone();
            writeln!(trace, "{}", trace_row(n, &source, &o.trace, o.record.boxes.len()))?;
            if let Some(img) = &o.image {
                let path = args.out.join(&o.record.image_path);
                let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
                let mut w = BufWriter::new(f);
                write_ppm(img, &mut w)?;
                w.flush()?;
            }
            produced.push(o.record);
        }
    }
    trace.flush()?;
    let mut ann = io::create(Some(&args.out.join("annotations.tsv")))?;
    write_canonical(&produced, &mut ann)?;
    ann.flush()?;
    eprintln!("samples={}", produced.len());
    Ok(())
}
