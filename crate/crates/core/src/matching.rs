//! Anchor assignment, offset coding, the SSD training loss and NMS.

use std::cmp::Ordering;

use crate::bbox::{iou, BBox};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchConfig<T> {
    pub threshold: T,
    /// Center and size variances.
    pub variances: (T, T),
}

impl<T: Scalar> Default for MatchConfig<T> {
    fn default() -> Self {
        Self {
            threshold: T::lit(0.5),
            variances: (T::lit(0.1), T::lit(0.2)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Negative,
    /// `forced` marks the anchor a ground truth claimed for itself.
    Positive { gt: usize, forced: bool },
}

impl Label {
    pub fn gt(&self) -> Option<usize> {
        match self {
            Label::Positive { gt, .. } => Some(*gt),
            Label::Negative => None,
        }
    }
}

/// `(t_cx, t_cy, t_w, t_h)`.
pub type Offsets<T> = [T; 4];

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult<T> {
    pub labels: Vec<Label>,
    /// Encoded target for each positive anchor; `None` for negatives.
    pub offsets: Vec<Option<Offsets<T>>>,
}

impl<T> MatchResult<T> {
    pub fn num_positive(&self) -> usize {
        self.labels.iter().filter(|l| l.gt().is_some()).count()
    }

    pub fn positives(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.labels.iter().enumerate().filter_map(|(i, l)| l.gt().map(|g| (i, g)))
    }
}

/// Lowest index wins ties.
fn argmax<T: PartialOrd + Copy>(values: impl Iterator<Item = T>, skip: impl Fn(usize) -> bool) -> Option<(usize, T)> {
    let mut best: Option<(usize, T)> = None;
    for (i, v) in values.enumerate() {
        if skip(i) {
            continue;
        }
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best
}

/// Two-way assignment.
///
/// Ground truths, in index order, first claim their best still-unclaimed
/// anchor, so every ground truth owns at least one positive. Then each
/// remaining anchor whose best IoU reaches the threshold becomes positive for
/// that ground truth.
pub fn match_anchors<T: Scalar>(anchors: &[BBox<T>], gts: &[BBox<T>], config: &MatchConfig<T>) -> Result<MatchResult<T>> {
    if anchors.is_empty() {
        return Err(Error::invalid("match", "no anchors"));
    }
    let mut labels = vec![Label::Negative; anchors.len()];
    if gts.is_empty() {
        return Ok(MatchResult {
            offsets: vec![None; anchors.len()],
            labels,
        });
    }
    if gts.len() > anchors.len() {
        return Err(Error::invalid(
            "match",
            format!("{} ground truths cannot each claim one of {} anchors", gts.len(), anchors.len()),
        ));
    }
    let overlaps: Vec<Vec<T>> = gts.iter().map(|g| anchors.iter().map(|a| iou(a, g)).collect()).collect();

    for (g, row) in overlaps.iter().enumerate() {
        let (a, _) = argmax(row.iter().copied(), |i| labels[i] != Label::Negative).expect("enough anchors");
        labels[a] = Label::Positive { gt: g, forced: true };
    }
    for (a, label) in labels.iter_mut().enumerate() {
        if *label != Label::Negative {
            continue;
        }
        let (g, best) = argmax(overlaps.iter().map(|row| row[a]), |_| false).expect("nonempty");
        if best >= config.threshold {
            *label = Label::Positive { gt: g, forced: false };
        }
    }
    let offsets = labels
        .iter()
        .zip(anchors)
        .map(|(l, a)| l.gt().map(|g| encode(a, &gts[g], config.variances)).transpose())
        .collect::<Result<_>>()?;
    Ok(MatchResult { labels, offsets })
}

fn center_size<T: Scalar>(b: &BBox<T>) -> (T, T, T, T) {
    let (cx, cy) = b.center();
    (cx, cy, b.x_max - b.x_min, b.y_max - b.y_min)
}

/// Center-size offsets of `gt` relative to `anchor`, divided by the variances.
pub fn encode<T: Scalar>(anchor: &BBox<T>, gt: &BBox<T>, variances: (T, T)) -> Result<Offsets<T>> {
    let (acx, acy, aw, ah) = center_size(anchor);
    let (gcx, gcy, gw, gh) = center_size(gt);
    if !(aw > T::zero() && ah > T::zero()) {
        return Err(Error::invalid("encode", "anchor has zero size"));
    }
    if !(gw > T::zero() && gh > T::zero()) {
        return Err(Error::invalid("encode", "ground truth has zero size"));
    }
    let (vc, vs) = variances;
    Ok([
        (gcx - acx) / (aw * vc),
        (gcy - acy) / (ah * vc),
        (gw / aw).ln() / vs,
        (gh / ah).ln() / vs,
    ])
}

pub fn decode<T: Scalar>(anchor: &BBox<T>, offsets: &Offsets<T>, variances: (T, T)) -> Result<BBox<T>> {
    let (acx, acy, aw, ah) = center_size(anchor);
    if !(aw > T::zero() && ah > T::zero()) {
        return Err(Error::invalid("decode", "anchor has zero size"));
    }
    let (vc, vs) = variances;
    let cx = acx + offsets[0] * vc * aw;
    let cy = acy + offsets[1] * vc * ah;
    let w = aw * (offsets[2] * vs).exp();
    let h = ah * (offsets[3] * vs).exp();
    Ok(BBox::from_center(cx, cy, w, h))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig<T> {
    pub alpha: T,
    /// Mined negatives per positive.
    pub neg_pos_ratio: usize,
}

impl<T: Scalar> Default for LossConfig<T> {
    fn default() -> Self {
        Self {
            alpha: T::one(),
            neg_pos_ratio: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown<T> {
    pub total: T,
    /// Summed cross-entropy over positives and mined negatives.
    pub conf: T,
    /// Summed smooth-L1 over positives.
    pub loc: T,
    pub num_positive: usize,
    pub num_negative: usize,
}

pub fn smooth_l1<T: Scalar>(x: T) -> T {
    let a = x.abs();
    if a < T::one() {
        T::half() * a * a
    } else {
        a - T::half()
    }
}

/// `-log softmax(logits)[target]`, computed stably.
pub fn cross_entropy<T: Scalar>(logits: &[T], target: usize) -> T {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = m + logits.iter().map(|&z| (z - m).exp()).sum::<T>().ln();
    lse - logits[target]
}

/// `(conf + alpha * loc) / N` with 3:1 hard-negative mining.
///
/// `class_logits` holds one row per anchor with class 0 as background;
/// `gt_classes[g]` is the foreground class of ground truth `g`. With no
/// positives every term is zero.
pub fn ssd_loss<T: Scalar>(
    class_logits: &[Vec<T>],
    box_preds: &[Offsets<T>],
    matched: &MatchResult<T>,
    gt_classes: &[usize],
    config: &LossConfig<T>,
) -> Result<LossBreakdown<T>> {
    let n = matched.labels.len();
    for (what, len) in [("class rows", class_logits.len()), ("box rows", box_preds.len())] {
        if len != n {
            return Err(Error::ShapeMismatch {
                op: "ssd_loss",
                dim: what,
                expected: n,
                found: len,
            });
        }
    }
    let classes = class_logits.first().map_or(0, Vec::len);
    if classes < 2 || class_logits.iter().any(|r| r.len() != classes) {
        return Err(Error::invalid("ssd_loss", "every row needs the same number (>= 2) of class logits"));
    }
    let target_of = |g: usize| -> Result<usize> {
        match gt_classes.get(g) {
            Some(&c) if c > 0 && c < classes => Ok(c),
            Some(&c) => Err(Error::invalid("ssd_loss", format!("ground-truth class {c} out of range"))),
            None => Err(Error::invalid("ssd_loss", format!("no class for ground truth {g}"))),
        }
    };

    let num_pos = matched.num_positive();
    if num_pos == 0 {
        return Ok(LossBreakdown {
            total: T::zero(),
            conf: T::zero(),
            loc: T::zero(),
            num_positive: 0,
            num_negative: 0,
        });
    }
    let mut loc = T::zero();
    let mut conf = T::zero();
    let mut negatives: Vec<(usize, T)> = Vec::new();
    for (a, label) in matched.labels.iter().enumerate() {
        match label {
            Label::Positive { gt, .. } => {
                conf = conf + cross_entropy(&class_logits[a], target_of(*gt)?);
                let t = matched.offsets[a].ok_or_else(|| Error::invalid("ssd_loss", "positive without offsets"))?;
                for k in 0..4 {
                    loc = loc + smooth_l1(box_preds[a][k] - t[k]);
                }
            }
            Label::Negative => negatives.push((a, cross_entropy(&class_logits[a], 0))),
        }
    }
    negatives.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap_or(Ordering::Equal).then(x.0.cmp(&y.0)));
    let keep = (config.neg_pos_ratio * num_pos).min(negatives.len());
    for (_, l) in &negatives[..keep] {
        conf = conf + *l;
    }
    let n_pos = T::of_usize(num_pos);
    Ok(LossBreakdown {
        total: (conf + config.alpha * loc) / n_pos,
        conf,
        loc,
        num_positive: num_pos,
        num_negative: keep,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection<T> {
    pub image_id: String,
    pub bbox: BBox<T>,
    pub score: T,
    pub class_id: usize,
}

/// Greedy suppression per image and class: a box is dropped when its IoU
/// with an already kept, higher-ranked box exceeds `iou_threshold`. Ranking
/// is by descending score, then by input index. Output is in rank order.
pub fn nms<T: Scalar>(dets: &[Detection<T>], iou_threshold: T) -> Vec<Detection<T>> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let d = &dets[i];
        let suppressed = kept.iter().any(|&k| {
            let o = &dets[k];
            o.image_id == d.image_id && o.class_id == d.class_id && iou(&o.bbox, &d.bbox) > iou_threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i].clone()).collect()
}
