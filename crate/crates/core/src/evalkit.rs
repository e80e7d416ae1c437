//! COCO-style single-class evaluation: PR curves, 101-point AP, AR and the
//! small/medium/large buckets, plus CSV and SVG report output.
//!
//! Boxes are in pixels. Detections are ranked by descending score with ties
//! broken by id, so the result does not depend on input order.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use crate::bbox::{iou, BBox};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct GtBox<T> {
    pub image_id: String,
    pub bbox: BBox<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalDet<T> {
    pub id: usize,
    pub image_id: String,
    pub bbox: BBox<T>,
    pub score: T,
}

pub const IOU_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];
pub const MAX_DETS: usize = 100;
pub const SMALL_MAX: f64 = 32.0 * 32.0;
pub const MEDIUM_MAX: f64 = 96.0 * 96.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AreaRange {
    All,
    Small,
    Medium,
    Large,
}

impl AreaRange {
    pub const BUCKETS: [AreaRange; 3] = [AreaRange::Small, AreaRange::Medium, AreaRange::Large];

    /// `S < 32^2 <= M <= 96^2 < L`, a partition of all areas.
    pub fn contains(self, area: f64) -> bool {
        match self {
            AreaRange::All => true,
            AreaRange::Small => area < SMALL_MAX,
            AreaRange::Medium => (SMALL_MAX..=MEDIUM_MAX).contains(&area),
            AreaRange::Large => area > MEDIUM_MAX,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AreaRange::All => "all",
            AreaRange::Small => "small",
            AreaRange::Medium => "medium",
            AreaRange::Large => "large",
        }
    }
}

/// Rank-ordered `(recall, precision)` points at one IoU threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve<T> {
    pub iou: T,
    pub num_gt: usize,
    pub points: Vec<(T, T)>,
}

impl<T: Scalar> PrCurve<T> {
    pub fn final_recall(&self) -> T {
        self.points.last().map_or(T::zero(), |p| p.0)
    }
}

fn check_ids<T>(dets: &[EvalDet<T>]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for d in dets {
        if !seen.insert(d.id) {
            return Err(Error::invalid("evaluate", format!("duplicate detection id {}", d.id)));
        }
    }
    Ok(())
}

fn rank<T: Scalar>(dets: &[EvalDet<T>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(dets[a].id.cmp(&dets[b].id))
    });
    order
}

/// Keeps the `max_dets` best-ranked detections of every image.
fn cap_per_image<T: Scalar>(dets: &[EvalDet<T>], max_dets: usize) -> Vec<usize> {
    let mut per_image: HashMap<&str, usize> = HashMap::new();
    rank(dets)
        .into_iter()
        .filter(|&i| {
            let n = per_image.entry(dets[i].image_id.as_str()).or_insert(0);
            *n += 1;
            *n <= max_dets
        })
        .collect()
}

/// Outcome of one detection at one threshold and area range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Outcome {
    Tp,
    Fp,
    Ignored,
}

/// Greedy matching of ranked detections. Each detection takes the unmatched
/// in-range ground truth of its image with the highest IoU at or above the
/// threshold (lowest index on ties), falling back to out-of-range ground
/// truths, which make it ignored. Unmatched out-of-range detections are
/// ignored too.
fn match_ranked<T: Scalar>(
    ranked: &[usize],
    dets: &[EvalDet<T>],
    gts_by_image: &HashMap<&str, Vec<usize>>,
    gts: &[GtBox<T>],
    threshold: T,
    range: AreaRange,
) -> Vec<Outcome> {
    let mut used = vec![false; gts.len()];
    let in_range = |b: &BBox<T>| range.contains(b.area().as_f64());
    ranked
        .iter()
        .map(|&d| {
            let det = &dets[d];
            let candidates = gts_by_image.get(det.image_id.as_str()).map_or(&[][..], Vec::as_slice);
            let pick = |want_in_range: bool| -> Option<usize> {
                let mut best: Option<(usize, T)> = None;
                for &g in candidates {
                    if used[g] || in_range(&gts[g].bbox) != want_in_range {
                        continue;
                    }
                    let v = iou(&det.bbox, &gts[g].bbox);
                    if v >= threshold && best.is_none_or(|(_, b)| v > b) {
                        best = Some((g, v));
                    }
                }
                best.map(|(g, _)| g)
            };
            if let Some(g) = pick(true) {
                used[g] = true;
                Outcome::Tp
            } else if let Some(g) = pick(false) {
                used[g] = true;
                Outcome::Ignored
            } else if in_range(&det.bbox) {
                Outcome::Fp
            } else {
                Outcome::Ignored
            }
        })
        .collect()
}

fn group_gts<T>(gts: &[GtBox<T>]) -> HashMap<&str, Vec<usize>> {
    let mut map: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, g) in gts.iter().enumerate() {
        map.entry(g.image_id.as_str()).or_default().push(i);
    }
    map
}

fn curve_at<T: Scalar>(
    ranked: &[usize],
    dets: &[EvalDet<T>],
    gts: &[GtBox<T>],
    grouped: &HashMap<&str, Vec<usize>>,
    threshold: T,
    range: AreaRange,
) -> PrCurve<T> {
    let num_gt = gts.iter().filter(|g| range.contains(g.bbox.area().as_f64())).count();
    let outcomes = match_ranked(ranked, dets, grouped, gts, threshold, range);
    let mut points = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    for o in outcomes {
        match o {
            Outcome::Ignored => continue,
            Outcome::Tp => tp += 1,
            Outcome::Fp => {}
        }
        seen += 1;
        let recall = if num_gt > 0 {
            T::of_usize(tp) / T::of_usize(num_gt)
        } else {
            T::zero()
        };
        points.push((recall, T::of_usize(tp) / T::of_usize(seen)));
    }
    PrCurve {
        iou: threshold,
        num_gt,
        points,
    }
}

/// Rank-ordered PR points over all ground truths, without a per-image cap.
pub fn pr_curve<T: Scalar>(dets: &[EvalDet<T>], gts: &[GtBox<T>], iou_threshold: T) -> Result<PrCurve<T>> {
    check_ids(dets)?;
    let ranked = rank(dets);
    Ok(curve_at(&ranked, dets, gts, &group_gts(gts), iou_threshold, AreaRange::All))
}

/// 101-point interpolated AP: mean over recall levels `0.00..=1.00` of the
/// best precision at any recall at or above the level (0 when unreachable).
pub fn average_precision<T: Scalar>(curve: &[(T, T)]) -> T {
    if curve.is_empty() {
        return T::zero();
    }
    let mut envelope: Vec<T> = curve.iter().map(|p| p.1).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut total = T::zero();
    let mut k = 0;
    for step in 0..=100 {
        let level = T::of_usize(step) / T::lit(100.0);
        while k < curve.len() && curve[k].0 < level {
            k += 1;
        }
        if k < curve.len() {
            total = total + envelope[k];
        }
    }
    total / T::lit(101.0)
}

/// The twelve summary metrics, in report order.
pub const METRIC_NAMES: [&str; 12] = [
    "ap_5095",
    "ap_50",
    "ap_75",
    "ap_small",
    "ap_medium",
    "ap_large",
    "ar_5095",
    "ar_50",
    "ar_75",
    "ar_small",
    "ar_medium",
    "ar_large",
];

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport<T> {
    pub ap_5095: T,
    pub ap_50: T,
    pub ap_75: T,
    pub ap_small: T,
    pub ap_medium: T,
    pub ap_large: T,
    pub ar_5095: T,
    pub ar_50: T,
    pub ar_75: T,
    pub ar_small: T,
    pub ar_medium: T,
    pub ar_large: T,
    /// One curve per IoU threshold over all sizes.
    pub pr_curves: Vec<PrCurve<T>>,
    /// Ground-truth counts per bucket `(small, medium, large)`.
    pub bucket_counts: (usize, usize, usize),
}

impl<T: Scalar> EvalReport<T> {
    pub fn metrics(&self) -> [(&'static str, T); 12] {
        let v = [
            self.ap_5095,
            self.ap_50,
            self.ap_75,
            self.ap_small,
            self.ap_medium,
            self.ap_large,
            self.ar_5095,
            self.ar_50,
            self.ar_75,
            self.ar_small,
            self.ar_medium,
            self.ar_large,
        ];
        std::array::from_fn(|i| (METRIC_NAMES[i], v[i]))
    }
}

/// Class-averaged mean of per-class APs (`n = 1` for drones).
pub fn mean_ap<T: Scalar>(per_class: &[T]) -> T {
    if per_class.is_empty() {
        T::zero()
    } else {
        per_class.iter().copied().sum::<T>() / T::of_usize(per_class.len())
    }
}

/// Full summary with a cap of [`MAX_DETS`] detections per image.
///
/// AR is the final recall of a curve; `ar_50`/`ar_75` use a single threshold.
/// A range without ground truths scores 0.
pub fn coco_summary<T: Scalar>(dets: &[EvalDet<T>], gts: &[GtBox<T>]) -> Result<EvalReport<T>> {
    check_ids(dets)?;
    let ranked = cap_per_image(dets, MAX_DETS);
    let grouped = group_gts(gts);
    let thresholds: Vec<T> = IOU_THRESHOLDS.iter().map(|&t| T::lit(t)).collect();

    let sweep = |range: AreaRange| -> Vec<PrCurve<T>> {
        thresholds
            .iter()
            .map(|&t| curve_at(&ranked, dets, gts, &grouped, t, range))
            .collect()
    };
    let ap = |c: &PrCurve<T>| if c.num_gt == 0 { T::zero() } else { average_precision(&c.points) };
    let mean = |cs: &[PrCurve<T>], f: &dyn Fn(&PrCurve<T>) -> T| {
        cs.iter().map(f).sum::<T>() / T::of_usize(cs.len())
    };
    let ar = |c: &PrCurve<T>| c.final_recall();

    let all = sweep(AreaRange::All);
    let small = sweep(AreaRange::Small);
    let medium = sweep(AreaRange::Medium);
    let large = sweep(AreaRange::Large);
    let count = |r: AreaRange| gts.iter().filter(|g| r.contains(g.bbox.area().as_f64())).count();
    Ok(EvalReport {
        ap_5095: mean(&all, &ap),
        ap_50: ap(&all[0]),
        ap_75: ap(&all[5]),
        ap_small: mean(&small, &ap),
        ap_medium: mean(&medium, &ap),
        ap_large: mean(&large, &ap),
        ar_5095: mean(&all, &ar),
        ar_50: ar(&all[0]),
        ar_75: ar(&all[5]),
        ar_small: mean(&small, &ar),
        ar_medium: mean(&medium, &ar),
        ar_large: mean(&large, &ar),
        bucket_counts: (count(AreaRange::Small), count(AreaRange::Medium), count(AreaRange::Large)),
        pr_curves: all,
    })
}

pub const CSV_SCHEMA: &str = "# dronedet eval-report v1";
pub const CSV_HEADER: &str = "kind,key,iou,recall,precision,value";

/// Twelve `metric` rows followed by one `curve` row per PR point.
pub fn report_csv<T: Scalar>(report: &EvalReport<T>) -> String {
    let mut out = format!("{CSV_SCHEMA}\n{CSV_HEADER}\n");
    for (name, v) in report.metrics() {
        let _ = writeln!(out, "metric,{name},,,,{v}");
    }
    for c in &report.pr_curves {
        for (r, p) in &c.points {
            let _ = writeln!(out, "curve,all,{},{r},{p},", c.iou);
        }
    }
    out
}

/// Parsed CSV: metrics by name and curve points by threshold text.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedReport<T> {
    pub metrics: BTreeMap<String, T>,
    pub curves: Vec<(T, Vec<(T, T)>)>,
}

pub fn parse_report_csv<T: Scalar>(text: &str) -> Result<ParsedReport<T>> {
    let mut lines = text.lines().enumerate();
    if lines.next().map(|l| l.1) != Some(CSV_SCHEMA) {
        return Err(Error::parse(1, format!("expected `{CSV_SCHEMA}`")));
    }
    if lines.next().map(|l| l.1) != Some(CSV_HEADER) {
        return Err(Error::parse(2, format!("expected `{CSV_HEADER}`")));
    }
    let num = |s: &str, line: usize| -> Result<T> {
        s.parse::<T>().map_err(|_| Error::parse(line, format!("bad number `{s}`")))
    };
    let mut metrics = BTreeMap::new();
    let mut curves: Vec<(T, Vec<(T, T)>)> = Vec::new();
    for (i, line) in lines {
        let n = i + 1;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(Error::parse(n, "expected 6 fields"));
        }
        match f[0] {
            "metric" => {
                metrics.insert(f[1].to_string(), num(f[5], n)?);
            }
            "curve" => {
                let t = num(f[2], n)?;
                let p = (num(f[3], n)?, num(f[4], n)?);
                match curves.last_mut() {
                    Some((last, pts)) if *last == t => pts.push(p),
                    _ => curves.push((t, vec![p])),
                }
            }
            other => return Err(Error::parse(n, format!("unknown row kind `{other}`"))),
        }
    }
    Ok(ParsedReport { metrics, curves })
}

/// PR plot with one polyline per threshold, recall on x.
pub fn report_svg<T: Scalar>(report: &EvalReport<T>) -> String {
    let (w, h, pad) = (480.0, 360.0, 40.0);
    let (pw, ph) = (w - 2.0 * pad, h - 2.0 * pad);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(out, "<!-- dronedet pr-curves v1 -->");
    let _ = writeln!(
        out,
        r##"<rect x="{pad}" y="{pad}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">recall</text>"#,
        w / 2.0,
        h - 10.0
    );
    let _ = writeln!(
        out,
        r#"<text x="12" y="{}" font-size="12" transform="rotate(-90 12 {})" text-anchor="middle">precision</text>"#,
        h / 2.0,
        h / 2.0
    );
    let n = report.pr_curves.len().max(1) as f64;
    for (i, c) in report.pr_curves.iter().enumerate() {
        let hue = 240.0 * i as f64 / n;
        let pts: Vec<String> = c
            .points
            .iter()
            .map(|(r, p)| format!("{:.2},{:.2}", pad + r.as_f64() * pw, pad + (1.0 - p.as_f64()) * ph))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline data-iou="{}" fill="none" stroke="hsl({hue:.0},70%,45%)" points="{}"/>"#,
            c.iou,
            pts.join(" ")
        );
    }
    out.push_str("</svg>\n");
    out
}
