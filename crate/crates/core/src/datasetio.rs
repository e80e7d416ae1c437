//! Unified drone annotation records: ingestion of the public dataset layouts,
//! the canonical line format, seeded stratified splits and scenario tags.
//!
//! Boxes are stored in pixels, `[0, width] x [0, height]`. Every box is a
//! drone; other labels found in source files are skipped and reported.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::evalkit::AreaRange;
use crate::scalar::Scalar;

pub const SCHEMA: &str = "# dronedet annotations v1";
pub const DRONE: &str = "drone";
pub const DEFAULT_VAL_FRACTION: f64 = 0.10;
/// Frames covered by one USC-Drone label line.
pub const USC_LABEL_SPAN: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Source {
    RealWorld,
    DetFly,
    Midgard,
    DroneVsBird,
    UscDrone,
}

impl Source {
    pub const ALL: [Source; 5] = [
        Source::RealWorld,
        Source::DetFly,
        Source::Midgard,
        Source::DroneVsBird,
        Source::UscDrone,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Source::RealWorld => "real_world",
            Source::DetFly => "det_fly",
            Source::Midgard => "midgard",
            Source::DroneVsBird => "drone_vs_bird",
            Source::UscDrone => "usc_drone",
        }
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Source::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid("source", format!("unknown source `{s}`")))
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Ordered by difficulty: `Countryside < Urban < Indoor`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scenario {
    Countryside,
    Urban,
    Indoor,
}

impl Scenario {
    /// Hardest first.
    pub const BY_DIFFICULTY: [Scenario; 3] = [Scenario::Indoor, Scenario::Urban, Scenario::Countryside];

    pub fn difficulty(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Countryside => "countryside",
            Scenario::Urban => "urban",
            Scenario::Indoor => "indoor",
        }
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::BY_DIFFICULTY
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid("scenario", format!("unknown scenario `{s}`")))
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One image and its drone boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub image_path: String,
    pub width: u32,
    pub height: u32,
    /// Pixel boxes; the class is always [`DRONE`].
    pub boxes: Vec<BBox<f64>>,
    pub source: Source,
    pub scenario: Option<Scenario>,
    /// Set for labels known to drift from the pictured drone.
    pub unreliable: bool,
    pub meta: BTreeMap<String, String>,
}

impl AnnotationRecord {
    pub fn new(image_id: impl Into<String>, image_path: impl Into<String>, width: u32, height: u32, source: Source) -> Self {
        AnnotationRecord {
            image_id: image_id.into(),
            image_path: image_path.into(),
            width,
            height,
            boxes: Vec::new(),
            source,
            scenario: None,
            unreliable: false,
            meta: BTreeMap::new(),
        }
    }

    /// Checks the record invariants and that every field fits the line format.
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::invalid("record", format!("{}: {reason}", self.image_id)));
        if self.width == 0 || self.height == 0 {
            return bad("width and height must be positive".into());
        }
        for (what, s) in [("image_id", &self.image_id), ("image_path", &self.image_path)] {
            if s.is_empty() || s == "-" || s.contains(['\t', '\n', '\r']) {
                return bad(format!("{what} must be non-empty and free of tabs and newlines"));
            }
        }
        for (k, v) in &self.meta {
            if k.is_empty() || k.contains(['\t', '\n', '\r', ';', '=']) || v.contains(['\t', '\n', '\r', ';']) {
                return bad(format!("meta entry `{k}` is not representable"));
            }
        }
        let (w, h) = (f64::from(self.width), f64::from(self.height));
        for b in &self.boxes {
            let inside = b.x_min >= 0.0 && b.y_min >= 0.0 && b.x_max <= w && b.y_max <= h;
            if !(b.is_valid() && inside) {
                return bad(format!("box {b:?} outside the {w}x{h} image"));
            }
        }
        Ok(())
    }

    pub fn normalized_boxes<T: Scalar>(&self) -> Vec<BBox<T>> {
        self.boxes.iter().map(|b| to_normalized(b, self.width, self.height)).collect()
    }

    /// Official split recorded by the source (`train`, `val` or `test`).
    pub fn official_split(&self) -> Option<&str> {
        self.meta.get("split").map(String::as_str)
    }
}

pub fn to_normalized<T: Scalar>(b: &BBox<f64>, width: u32, height: u32) -> BBox<T> {
    let (w, h) = (f64::from(width), f64::from(height));
    let c = |v: f64| T::lit(v);
    BBox::new(c(b.x_min / w), c(b.y_min / h), c(b.x_max / w), c(b.y_max / h))
}

pub fn to_pixels<T: Scalar>(b: &BBox<T>, width: u32, height: u32) -> BBox<f64> {
    let (w, h) = (f64::from(width), f64::from(height));
    let c = |v: T| v.to_f64().unwrap_or(f64::NAN);
    BBox::new(c(b.x_min) * w, c(b.y_min) * h, c(b.x_max) * w, c(b.y_max) * h)
}

// ---------------------------------------------------------------------------
// canonical format

/// Writes the schema line followed by one tab-separated line per record.
pub fn write_canonical<W: Write>(records: &[AnnotationRecord], mut out: W) -> Result<()> {
    writeln!(out, "{SCHEMA}")?;
    for r in records {
        r.validate()?;
        writeln!(out, "{}", canonical_line(r))?;
    }
    Ok(())
}

pub fn to_canonical_string(records: &[AnnotationRecord]) -> Result<String> {
    let mut buf = Vec::new();
    write_canonical(records, &mut buf)?;
    Ok(String::from_utf8(buf).expect("canonical output is UTF-8"))
}

fn canonical_line(r: &AnnotationRecord) -> String {
    let scenario = r.scenario.map_or("-", Scenario::name);
    let meta = if r.meta.is_empty() {
        "-".to_string()
    } else {
        r.meta.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";")
    };
    let boxes = if r.boxes.is_empty() {
        "-".to_string()
    } else {
        r.boxes
            .iter()
            .map(|b| format!("{DRONE}:{},{},{},{}", b.x_min, b.y_min, b.x_max, b.y_max))
            .collect::<Vec<_>>()
            .join(";")
    };
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
        r.image_id,
        r.image_path,
        r.width,
        r.height,
        r.source,
        scenario,
        u8::from(r.unreliable),
        meta,
        boxes
    )
}

/// Reads a canonical file. Malformed lines and out-of-range boxes go to the
/// rejects list; a missing schema line is an error.
pub fn read_canonical<R: BufRead>(input: R, file: &str) -> Result<Ingest> {
    let mut lines = input.lines();
    match lines.next().transpose()? {
        Some(first) if first.trim_end() == SCHEMA => {}
        Some(first) => return Err(Error::parse(1, format!("expected `{SCHEMA}`, found `{first}`"))),
        None => return Err(Error::parse(1, "empty file, missing schema line")),
    }
    let mut log = RejectLog::new(file);
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let no = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        match parse_canonical_line(&line, no, &mut log) {
            Ok(r) => records.push(r),
            Err(reason) => log.drop(Some(no), reason),
        }
    }
    Ok(Ingest {
        records,
        rejects: log.entries,
    })
}

fn parse_canonical_line(line: &str, no: usize, log: &mut RejectLog) -> std::result::Result<AnnotationRecord, String> {
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() != 9 {
        return Err(format!("expected 9 tab-separated fields, found {}", f.len()));
    }
    let dim = |s: &str, what: &str| match s.parse::<u32>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(format!("{what} `{s}` is not a positive integer")),
    };
    let source: Source = f[4].parse().map_err(|e: Error| e.to_string())?;
    let mut r = AnnotationRecord::new(f[0], f[1], dim(f[2], "width")?, dim(f[3], "height")?, source);
    if f[0].is_empty() || f[1].is_empty() {
        return Err("empty image_id or image_path".into());
    }
    if f[5] != "-" {
        r.scenario = Some(f[5].parse().map_err(|e: Error| e.to_string())?);
    }
    r.unreliable = match f[6] {
        "0" => false,
        "1" => true,
        other => return Err(format!("unreliable flag `{other}` must be 0 or 1")),
    };
    if f[7] != "-" {
        for kv in f[7].split(';') {
            let (k, v) = kv.split_once('=').ok_or_else(|| format!("meta entry `{kv}` lacks `=`"))?;
            r.meta.insert(k.to_string(), v.to_string());
        }
    }
    if f[8] != "-" {
        for item in f[8].split(';') {
            let (class, coords) = item.split_once(':').ok_or_else(|| format!("box `{item}` lacks a class"))?;
            if class != DRONE {
                return Err(format!("box class `{class}` is not `{DRONE}`"));
            }
            let v: Vec<f64> = coords
                .split(',')
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| format!("box `{item}` has a non-numeric coordinate"))?;
            if v.len() != 4 {
                return Err(format!("box `{item}` needs 4 coordinates"));
            }
            let b = BBox::new(v[0], v[1], v[2], v[3]);
            if let Some(b) = log.admit(Some(no), b, r.width, r.height) {
                r.boxes.push(b);
            }
        }
    }
    Ok(r)
}

// ---------------------------------------------------------------------------
// ingestion

/// Supported on-disk layouts. See the README for each format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// `*.tsv` files in the canonical format.
    Canonical,
    /// Pascal VOC `*.xml` files (Real World, Det-Fly).
    Voc(Source),
    /// `*.csv` with one row per box and a `sort` column (MIDGARD).
    MidgardCsv,
    /// Per-video `*.txt` frame annotations; each label line covers `span` frames.
    Frames { source: Source, span: usize },
}

impl Layout {
    pub const NAMES: [&'static str; 6] = ["canonical", "real_world", "det_fly", "midgard", "drone_vs_bird", "usc_drone"];

    fn extension(self) -> &'static str {
        match self {
            Layout::Canonical => "tsv",
            Layout::Voc(_) => "xml",
            Layout::MidgardCsv => "csv",
            Layout::Frames { .. } => "txt",
        }
    }
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "canonical" => Layout::Canonical,
            "real_world" => Layout::Voc(Source::RealWorld),
            "det_fly" => Layout::Voc(Source::DetFly),
            "midgard" => Layout::MidgardCsv,
            "drone_vs_bird" => Layout::Frames {
                source: Source::DroneVsBird,
                span: 1,
            },
            "usc_drone" => Layout::Frames {
                source: Source::UscDrone,
                span: USC_LABEL_SPAN,
            },
            _ => {
                return Err(Error::invalid(
                    "ingest",
                    format!("unknown layout `{s}` (expected one of {})", Layout::NAMES.join(", ")),
                ))
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectAction {
    /// The entry was discarded.
    Dropped,
    /// A box was clipped to the image and kept.
    Clamped,
    /// A non-drone label was ignored.
    Skipped,
}

impl RejectAction {
    pub fn name(self) -> &'static str {
        match self {
            RejectAction::Dropped => "dropped",
            RejectAction::Clamped => "clamped",
            RejectAction::Skipped => "skipped",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reject {
    pub file: String,
    pub line: Option<usize>,
    pub action: RejectAction,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Ingest {
    pub records: Vec<AnnotationRecord>,
    pub rejects: Vec<Reject>,
}

struct RejectLog {
    file: String,
    entries: Vec<Reject>,
}

impl RejectLog {
    fn new(file: &str) -> Self {
        RejectLog {
            file: file.to_string(),
            entries: Vec::new(),
        }
    }

    fn push(&mut self, line: Option<usize>, action: RejectAction, reason: impl Into<String>) {
        self.entries.push(Reject {
            file: self.file.clone(),
            line,
            action,
            reason: reason.into(),
        });
    }

    fn drop(&mut self, line: Option<usize>, reason: impl Into<String>) {
        self.push(line, RejectAction::Dropped, reason);
    }

    /// Clamps a pixel box into the image, logging any change.
    fn admit(&mut self, line: Option<usize>, b: BBox<f64>, width: u32, height: u32) -> Option<BBox<f64>> {
        let coords = [b.x_min, b.y_min, b.x_max, b.y_max];
        if coords.iter().any(|v| !v.is_finite()) {
            self.drop(line, format!("box {coords:?} has a non-finite coordinate"));
            return None;
        }
        if !b.is_valid() {
            self.drop(line, format!("box {coords:?} has min > max"));
            return None;
        }
        let (w, h) = (f64::from(width), f64::from(height));
        let c = BBox::new(b.x_min.clamp(0.0, w), b.y_min.clamp(0.0, h), b.x_max.clamp(0.0, w), b.y_max.clamp(0.0, h));
        if c.area() <= 0.0 {
            self.drop(line, format!("box {coords:?} has no area inside the {width}x{height} image"));
            return None;
        }
        if c != b {
            self.push(
                line,
                RejectAction::Clamped,
                format!("box {coords:?} clamped to [{}, {}, {}, {}]", c.x_min, c.y_min, c.x_max, c.y_max),
            );
        }
        Some(c)
    }
}

/// Reads every file of the layout's extension under `root` (or `root` itself
/// if it is a file). Files are parsed in parallel and merged in path order;
/// later records repeating an `image_id` are rejected.
pub fn ingest(layout: Layout, root: &Path) -> Result<Ingest> {
    let files = collect_files(root, layout.extension())?;
    let base = if root.is_file() {
        root.parent().unwrap_or(Path::new("")).to_path_buf()
    } else {
        root.to_path_buf()
    };
    let parts: Vec<Result<Ingest>> = files
        .par_iter()
        .map(|path| {
            let rel = path.strip_prefix(&base).unwrap_or(path);
            ingest_file(layout, path, rel)
        })
        .collect();
    let mut out = Ingest::default();
    let mut seen = HashSet::new();
    for part in parts {
        let part = part?;
        out.rejects.extend(part.rejects);
        for r in part.records {
            if seen.insert(r.image_id.clone()) {
                out.records.push(r);
            } else {
                out.rejects.push(Reject {
                    file: r.image_path.clone(),
                    line: None,
                    action: RejectAction::Dropped,
                    reason: format!("duplicate image_id `{}`", r.image_id),
                });
            }
        }
    }
    Ok(out)
}

/// Layout name given as a string, e.g. from the command line.
pub fn ingest_named(layout: &str, root: &Path) -> Result<Ingest> {
    ingest(layout.parse()?, root)
}

fn collect_files(root: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    if root.is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == ext) {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn slash_path(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

/// Relative path without its extension, `/`-separated.
fn stem_id(rel: &Path) -> String {
    slash_path(&rel.with_extension(""))
}

fn ingest_file(layout: Layout, path: &Path, rel: &Path) -> Result<Ingest> {
    let name = slash_path(rel);
    match layout {
        Layout::Canonical => read_canonical(std::io::BufReader::new(std::fs::File::open(path)?), &name),
        Layout::Voc(source) => Ok(parse_voc(&std::fs::read_to_string(path)?, rel, &name, source)),
        Layout::MidgardCsv => Ok(parse_midgard(&std::fs::read(path)?, &name)),
        Layout::Frames { source, span } => Ok(parse_frames(&std::fs::read_to_string(path)?, rel, &name, source, span)),
    }
}

fn parse_voc(text: &str, rel: &Path, name: &str, source: Source) -> Ingest {
    let mut log = RejectLog::new(name);
    let record = voc_record(text, rel, source, &mut log).map_err(|reason| log.drop(None, reason)).ok();
    Ingest {
        records: record.into_iter().collect(),
        rejects: log.entries,
    }
}

fn voc_record(text: &str, rel: &Path, source: Source, log: &mut RejectLog) -> std::result::Result<AnnotationRecord, String> {
    let doc = roxmltree::Document::parse(text).map_err(|e| format!("invalid XML: {e}"))?;
    let root = doc.root_element();
    let child = |node: roxmltree::Node<'_, '_>, tag: &str| {
        node.children()
            .find(|c| c.has_tag_name(tag))
            .and_then(|c| c.text())
            .map(str::trim)
            .map(str::to_string)
    };
    let filename = child(root, "filename").ok_or("missing <filename>")?;
    let size = root.children().find(|c| c.has_tag_name("size")).ok_or("missing <size>")?;
    let dim = |tag: &str| -> std::result::Result<u32, String> {
        let s = child(size, tag).ok_or(format!("missing <size>/<{tag}>"))?;
        match s.parse::<u32>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(format!("<{tag}> `{s}` is not a positive integer")),
        }
    };
    let (width, height) = (dim("width")?, dim("height")?);
    let mut r = AnnotationRecord::new(stem_id(rel), filename, width, height, source);
    for key in ["background", "scene"] {
        if let Some(v) = child(root, key) {
            r.meta.insert(key.to_string(), v);
        }
    }
    // a train/val/test directory marks the source's own split
    if let Some(split) = rel
        .components()
        .map(|c| c.as_os_str().to_string_lossy().to_lowercase())
        .find(|c| matches!(c.as_str(), "train" | "val" | "test"))
    {
        r.meta.insert("split".into(), split);
    }
    for obj in root.children().filter(|c| c.has_tag_name("object")) {
        let label = child(obj, "name").unwrap_or_default();
        if !label.eq_ignore_ascii_case(DRONE) {
            log.push(None, RejectAction::Skipped, format!("object label `{label}` is not a drone"));
            continue;
        }
        let Some(bnd) = obj.children().find(|c| c.has_tag_name("bndbox")) else {
            log.drop(None, "object without <bndbox>");
            continue;
        };
        let coords: Option<Vec<f64>> = ["xmin", "ymin", "xmax", "ymax"]
            .iter()
            .map(|t| child(bnd, t).and_then(|s| s.parse().ok()))
            .collect();
        match coords {
            Some(v) => {
                if let Some(b) = log.admit(None, BBox::new(v[0], v[1], v[2], v[3]), width, height) {
                    r.boxes.push(b);
                }
            }
            None => log.drop(None, "<bndbox> with a missing or non-numeric coordinate"),
        }
    }
    Ok(r)
}

const MIDGARD_HEADER: [&str; 9] = ["image", "width", "height", "x_min", "y_min", "x_max", "y_max", "label", "sort"];

fn parse_midgard(bytes: &[u8], name: &str) -> Ingest {
    let mut log = RejectLog::new(name);
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(bytes);
    let header_ok = reader
        .headers()
        .map(|h| h.iter().map(str::trim).eq(MIDGARD_HEADER))
        .unwrap_or(false);
    if !header_ok {
        log.drop(Some(1), format!("expected header `{}`", MIDGARD_HEADER.join(",")));
        return Ingest {
            records: Vec::new(),
            rejects: log.entries,
        };
    }
    let mut records: Vec<AnnotationRecord> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    for row in reader.records() {
        let row = match row {
            Ok(row) => row,
            Err(e) => {
                log.drop(e.position().map(|p| p.line() as usize), format!("unreadable row: {e}"));
                continue;
            }
        };
        let no = row.position().map(|p| p.line() as usize);
        if let Err(reason) = midgard_row(&row, no, &mut records, &mut index, &mut log) {
            log.drop(no, reason);
        }
    }
    Ingest {
        records,
        rejects: log.entries,
    }
}

fn midgard_row(
    row: &csv::StringRecord,
    no: Option<usize>,
    records: &mut Vec<AnnotationRecord>,
    index: &mut BTreeMap<String, usize>,
    log: &mut RejectLog,
) -> std::result::Result<(), String> {
    if row.len() != MIDGARD_HEADER.len() {
        return Err(format!("expected {} columns, found {}", MIDGARD_HEADER.len(), row.len()));
    }
    let f: Vec<&str> = row.iter().map(str::trim).collect();
    let dim = |s: &str| match s.parse::<u32>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(format!("image size `{s}` is not a positive integer")),
    };
    let (width, height) = (dim(f[1])?, dim(f[2])?);
    let image = f[0];
    if image.is_empty() {
        return Err("empty image column".into());
    }
    let slot = match index.get(image) {
        Some(&i) => {
            let r = &records[i];
            if (r.width, r.height) != (width, height) {
                return Err(format!("size {width}x{height} conflicts with {}x{} for `{image}`", r.width, r.height));
            }
            i
        }
        None => {
            let id = slash_path(&Path::new(image).with_extension(""));
            let mut r = AnnotationRecord::new(id, image, width, height, Source::Midgard);
            if !f[8].is_empty() {
                r.meta.insert("sort".into(), f[8].to_string());
            }
            records.push(r);
            index.insert(image.to_string(), records.len() - 1);
            records.len() - 1
        }
    };
    if f[3..7].iter().all(|s| s.is_empty()) {
        return Ok(());
    }
    if !f[7].eq_ignore_ascii_case(DRONE) {
        log.push(no, RejectAction::Skipped, format!("label `{}` is not a drone", f[7]));
        return Ok(());
    }
    let v: Vec<f64> = f[3..7]
        .iter()
        .map(|s| s.parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| "non-numeric box coordinate".to_string())?;
    let r = &mut records[slot];
    if let Some(b) = log.admit(no, BBox::new(v[0], v[1], v[2], v[3]), r.width, r.height) {
        r.boxes.push(b);
    }
    Ok(())
}

fn parse_frames(text: &str, rel: &Path, name: &str, source: Source, span: usize) -> Ingest {
    let mut log = RejectLog::new(name);
    let video = stem_id(rel);
    let mut size = None;
    let mut frames: BTreeMap<usize, AnnotationRecord> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let no = Some(i + 1);
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens[0] == "size" {
            match (tokens.len(), tokens.get(1).map(|s| s.parse::<u32>()), tokens.get(2).map(|s| s.parse::<u32>())) {
                (3, Some(Ok(w)), Some(Ok(h))) if w > 0 && h > 0 => size = Some((w, h)),
                _ => log.drop(no, "size line must be `size <width> <height>`"),
            }
            continue;
        }
        let Some((width, height)) = size else {
            log.drop(no, "label line before the `size` line");
            continue;
        };
        match frame_line(&tokens, width, height, no, &mut log) {
            Ok((frame, boxes)) => {
                for f in frame..frame + span {
                    if frames.contains_key(&f) {
                        log.drop(no, format!("frame {f} is already labelled"));
                        continue;
                    }
                    let id = format!("{video}/{f:06}");
                    let mut r = AnnotationRecord::new(id.clone(), format!("{id}.jpg"), width, height, source);
                    r.boxes = boxes.clone();
                    if span > 1 {
                        r.unreliable = true;
                        r.meta.insert("label_frame".into(), frame.to_string());
                    }
                    frames.insert(f, r);
                }
            }
            Err(reason) => log.drop(no, reason),
        }
    }
    Ingest {
        records: frames.into_values().collect(),
        rejects: log.entries,
    }
}

/// `frame n [x y w h label]*n`, with `(x, y)` the top-left corner.
fn frame_line(
    tokens: &[&str],
    width: u32,
    height: u32,
    no: Option<usize>,
    log: &mut RejectLog,
) -> std::result::Result<(usize, Vec<BBox<f64>>), String> {
    let frame: usize = tokens[0].parse().map_err(|_| format!("frame number `{}` is not an integer", tokens[0]))?;
    let n: usize = tokens
        .get(1)
        .and_then(|s| s.parse().ok())
        .ok_or("missing or non-integer object count")?;
    if tokens.len() != 2 + 5 * n {
        return Err(format!("{n} objects need {} tokens, found {}", 2 + 5 * n, tokens.len()));
    }
    let mut boxes = Vec::new();
    for obj in tokens[2..].chunks(5) {
        if !obj[4].eq_ignore_ascii_case(DRONE) {
            log.push(no, RejectAction::Skipped, format!("label `{}` is not a drone", obj[4]));
            continue;
        }
        let v: Vec<f64> = obj[..4]
            .iter()
            .map(|s| s.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| "non-numeric box coordinate".to_string())?;
        if v[2] < 0.0 || v[3] < 0.0 {
            return Err(format!("negative box size {} x {}", v[2], v[3]));
        }
        if let Some(b) = log.admit(no, BBox::new(v[0], v[1], v[0] + v[2], v[1] + v[3]), width, height) {
            boxes.push(b);
        }
    }
    Ok((frame, boxes))
}

// ---------------------------------------------------------------------------
// split

/// Seeded train/validation split.
///
/// Records carrying an official `split` (`train`, or `val`/`test`) keep it.
/// The rest get `round(n * val_fraction)` validation records, apportioned over
/// sources by largest remainder so every source is within one record of its
/// exact share. Output keeps input order.
pub fn split(
    records: &[AnnotationRecord],
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<AnnotationRecord>, Vec<AnnotationRecord>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::invalid("split", format!("val_fraction {val_fraction} outside (0, 1)")));
    }
    let mut to_val = vec![false; records.len()];
    let mut groups: BTreeMap<Source, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        match r.official_split() {
            Some("train") => {}
            Some("val" | "test") => to_val[i] = true,
            _ => groups.entry(r.source).or_default().push(i),
        }
    }
    let free: usize = groups.values().map(Vec::len).sum();
    let target = (free as f64 * val_fraction).round() as usize;
    let mut quota: Vec<(Source, usize, f64)> = groups
        .iter()
        .map(|(s, idx)| {
            let exact = idx.len() as f64 * val_fraction;
            (*s, exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let assigned: usize = quota.iter().map(|q| q.1).sum();
    let mut order: Vec<usize> = (0..quota.len()).collect();
    order.sort_by(|&a, &b| quota[b].2.total_cmp(&quota[a].2).then(a.cmp(&b)));
    for &q in order.iter().take(target.saturating_sub(assigned)) {
        quota[q].1 += 1;
    }
    for (source, k, _) in quota {
        let mut idx = groups[&source].clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(source as u64);
        idx.shuffle(&mut rng);
        for &i in &idx[..k] {
            to_val[i] = true;
        }
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (r, v) in records.iter().zip(to_val) {
        if v { &mut val } else { &mut train }.push(r.clone());
    }
    Ok((train, val))
}

// ---------------------------------------------------------------------------
// scenarios

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioRule {
    /// `None` matches every source.
    pub source: Option<Source>,
    pub key: String,
    /// Compared case-insensitively.
    pub value: String,
    pub scenario: Scenario,
}

/// Maps record metadata to scenario tags; the first matching rule wins.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioRules(pub Vec<ScenarioRule>);

impl Default for ScenarioRules {
    /// MIDGARD sort labels and Det-Fly background classes. Det-Fly `sky`
    /// shots carry no ground context and stay untagged.
    fn default() -> Self {
        let rule = |source, key: &str, value: &str, scenario| ScenarioRule {
            source: Some(source),
            key: key.into(),
            value: value.into(),
            scenario,
        };
        ScenarioRules(vec![
            rule(Source::Midgard, "sort", "indoor", Scenario::Indoor),
            rule(Source::Midgard, "sort", "urban", Scenario::Urban),
            rule(Source::Midgard, "sort", "countryside", Scenario::Countryside),
            rule(Source::Midgard, "sort", "rural", Scenario::Countryside),
            rule(Source::DetFly, "background", "city", Scenario::Urban),
            rule(Source::DetFly, "background", "field", Scenario::Countryside),
            rule(Source::DetFly, "background", "mountain", Scenario::Countryside),
        ])
    }
}

impl ScenarioRules {
    /// One rule per line: `<source|*> <key> <value> <scenario>`; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rules = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let t: Vec<&str> = line.split_whitespace().collect();
            if t.len() != 4 {
                return Err(Error::parse(i + 1, "expected `<source|*> <key> <value> <scenario>`"));
            }
            let source = match t[0] {
                "*" => None,
                s => Some(s.parse().map_err(|e: Error| Error::parse(i + 1, e.to_string()))?),
            };
            let scenario = t[3].parse().map_err(|e: Error| Error::parse(i + 1, e.to_string()))?;
            rules.push(ScenarioRule {
                source,
                key: t[1].into(),
                value: t[2].into(),
                scenario,
            });
        }
        Ok(ScenarioRules(rules))
    }

    pub fn classify(&self, r: &AnnotationRecord) -> Option<Scenario> {
        self.0.iter().find_map(|rule| {
            let source_ok = rule.source.is_none_or(|s| s == r.source);
            let value_ok = r.meta.get(&rule.key).is_some_and(|v| v.eq_ignore_ascii_case(&rule.value));
            (source_ok && value_ok).then_some(rule.scenario)
        })
    }
}

/// Tags records the rules recognise; other records keep their current tag.
pub fn tag_scenario(mut records: Vec<AnnotationRecord>, rules: &ScenarioRules) -> Vec<AnnotationRecord> {
    for r in &mut records {
        if let Some(s) = rules.classify(r) {
            r.scenario = Some(s);
        }
    }
    records
}

// ---------------------------------------------------------------------------
// stats

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SourceStats {
    pub images: usize,
    pub boxes: usize,
    pub empty_images: usize,
    pub unreliable: usize,
    pub scenarios: BTreeMap<Scenario, usize>,
    /// Box counts in the evaluator's small/medium/large buckets.
    pub sizes: [usize; 3],
}

pub fn stats(records: &[AnnotationRecord]) -> BTreeMap<Source, SourceStats> {
    let mut out: BTreeMap<Source, SourceStats> = BTreeMap::new();
    for r in records {
        let s = out.entry(r.source).or_default();
        s.images += 1;
        s.boxes += r.boxes.len();
        s.empty_images += usize::from(r.boxes.is_empty());
        s.unreliable += usize::from(r.unreliable);
        if let Some(sc) = r.scenario {
            *s.scenarios.entry(sc).or_default() += 1;
        }
        for b in &r.boxes {
            let k = AreaRange::BUCKETS.iter().position(|a| a.contains(b.area())).unwrap_or(0);
            s.sizes[k] += 1;
        }
    }
    out
}
