//! Default-box generation.
//!
//! Boxes are enumerated layer-major, then row-major over cells, then in
//! ratio order with the `sqrt(min * max)` square last.

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Pixel `(min, max)` sizes of the eight pyramid levels.
pub const LAYER_SIZES: [(usize, usize); 8] = [
    (28, 56),
    (56, 118),
    (118, 176),
    (176, 232),
    (232, 326),
    (326, 408),
    (408, 484),
    (484, 526),
];

/// Layer anchor counts of the default 512 configuration.
pub const LAYER_COUNTS: [usize; 8] = [65536, 24576, 6144, 1536, 384, 96, 16, 4];

pub const S_MIN: f64 = 0.15;
pub const S_MAX: f64 = 0.95;

/// `s_k = s_min + (s_max - s_min) / (m - 1) * (k - 1)` for `k = 1..=m`.
pub fn scale_schedule<T: Scalar>(s_min: T, s_max: T, m: usize) -> Result<Vec<T>> {
    if m < 2 {
        return Err(Error::invalid("scale_schedule", format!("need at least 2 layers, got {m}")));
    }
    if !(s_min > T::zero() && s_min < s_max && s_max <= T::one()) {
        return Err(Error::invalid(
            "scale_schedule",
            format!("need 0 < s_min < s_max <= 1, got {s_min} and {s_max}"),
        ));
    }
    let step = (s_max - s_min) / T::of_usize(m - 1);
    Ok((0..m).map(|k| s_min + step * T::of_usize(k)).collect())
}

/// Element-wise `beta_k * s_k`.
pub fn weighted_scales<T: Scalar>(schedule: &[T], beta: &[T]) -> Result<Vec<T>> {
    if schedule.len() != beta.len() {
        return Err(Error::ShapeMismatch {
            op: "weighted_scales",
            dim: "layers",
            expected: schedule.len(),
            found: beta.len(),
        });
    }
    if let Some(b) = beta.iter().find(|b| !(**b > T::zero() && **b <= T::one())) {
        return Err(Error::invalid("weighted_scales", format!("beta {b} outside (0, 1]")));
    }
    Ok(schedule.iter().zip(beta).map(|(&s, &b)| b * s).collect())
}

/// Decay weights that map the default schedule onto the `LAYER_SIZES` min sizes:
/// `beta_k = min_k / (image_size * s_k)`.
pub fn default_beta<T: Scalar>(image_size: usize) -> Vec<T> {
    let schedule = scale_schedule(T::lit(S_MIN), T::lit(S_MAX), LAYER_SIZES.len()).expect("valid defaults");
    LAYER_SIZES
        .iter()
        .zip(schedule)
        .map(|(&(min, _), s)| T::of_usize(min) / (T::of_usize(image_size) * s))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerAnchorConfig {
    pub name: String,
    /// Cell pitch in pixels.
    pub stride: f64,
    /// `(rows, cols)`.
    pub grid: (usize, usize),
    pub min_size: f64,
    pub max_size: f64,
    /// Width over height of each non-extra box.
    pub ratios: Vec<f64>,
}

impl LayerAnchorConfig {
    pub fn per_cell(&self) -> usize {
        self.ratios.len() + 1
    }

    pub fn count(&self) -> usize {
        self.grid.0 * self.grid.1 * self.per_cell()
    }

    fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::invalid("anchors", format!("{}: {reason}", self.name)));
        if self.grid.0 == 0 || self.grid.1 == 0 {
            return bad("empty grid".into());
        }
        if !(self.stride > 0.0 && self.min_size > 0.0 && self.max_size >= self.min_size) {
            return bad(format!(
                "need stride > 0 and 0 < min <= max, got {} / {} / {}",
                self.stride, self.min_size, self.max_size
            ));
        }
        if self.ratios.is_empty() || self.ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return bad(format!("invalid ratios {:?}", self.ratios));
        }
        Ok(())
    }
}

const NARROW: [f64; 3] = [1.0, 0.5, 2.0];
const WIDE: [f64; 5] = [1.0, 0.5, 1.0 / 3.0, 2.0, 3.0];

/// The eight-level layout for 512 inputs.
pub fn default_configs() -> Vec<LayerAnchorConfig> {
    LAYER_SIZES
        .iter()
        .enumerate()
        .map(|(k, &(min, max))| {
            let grid = 128 >> k;
            let ratios = if k == 0 || k >= 6 { NARROW.to_vec() } else { WIDE.to_vec() };
            LayerAnchorConfig {
                name: format!("of_{}", k + 1),
                stride: (4usize << k) as f64,
                grid: (grid, grid),
                min_size: min as f64,
                max_size: max as f64,
                ratios,
            }
        })
        .collect()
}

/// The classic six-level SSD300 layout.
pub fn ssd300_configs() -> Vec<LayerAnchorConfig> {
    let grids = [38, 19, 10, 5, 3, 1];
    let steps = [8.0, 16.0, 32.0, 64.0, 100.0, 300.0];
    let sizes = [30.0, 60.0, 111.0, 162.0, 213.0, 264.0, 315.0];
    (0..6)
        .map(|k| LayerAnchorConfig {
            name: format!("conv{}", k + 1),
            stride: steps[k],
            grid: (grids[k], grids[k]),
            min_size: sizes[k],
            max_size: sizes[k + 1],
            ratios: if k == 0 || k >= 4 { NARROW.to_vec() } else { WIDE.to_vec() },
        })
        .collect()
}

pub const SSD300_IMAGE: usize = 300;

/// Unclipped boxes of one cell, normalized by `image_size`.
pub fn cell_boxes<T: Scalar>(config: &LayerAnchorConfig, row: usize, col: usize, image_size: usize) -> Vec<BBox<T>> {
    let n = T::of_usize(image_size);
    let s = T::lit(config.stride);
    let cx = (T::of_usize(col) + T::half()) * s / n;
    let cy = (T::of_usize(row) + T::half()) * s / n;
    let min = T::lit(config.min_size) / n;
    let mut out: Vec<BBox<T>> = config
        .ratios
        .iter()
        .map(|&a| {
            let r = T::lit(a).sqrt();
            BBox::from_center(cx, cy, min * r, min / r)
        })
        .collect();
    let extra = (T::lit(config.min_size) * T::lit(config.max_size)).sqrt() / n;
    out.push(BBox::from_center(cx, cy, extra, extra));
    out
}

/// Label for a ratio column, e.g. `1:2` for width over height 0.5.
pub fn ratio_tag(ratio: f64) -> String {
    let near = |a: f64, b: f64| (a - b).abs() < 1e-9;
    if near(ratio, ratio.round()) {
        format!("{}:1", ratio.round())
    } else if near(1.0 / ratio, (1.0 / ratio).round()) {
        format!("1:{}", (1.0 / ratio).round())
    } else {
        format!("{ratio}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpan {
    pub name: String,
    pub start: usize,
    pub len: usize,
    pub grid: (usize, usize),
    pub per_cell: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet<T> {
    pub boxes: Vec<BBox<T>>,
    pub layers: Vec<LayerSpan>,
    pub configs: Vec<LayerAnchorConfig>,
}

/// Position of an anchor in the enumeration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnchorIndex {
    pub layer: usize,
    pub row: usize,
    pub col: usize,
    /// Index into the layer's ratios; `ratios.len()` is the extra square.
    pub slot: usize,
}

impl<T: Scalar> AnchorSet<T> {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn locate(&self, index: usize) -> Option<AnchorIndex> {
        let layer = self.layers.iter().position(|l| index >= l.start && index < l.start + l.len)?;
        let span = &self.layers[layer];
        let local = index - span.start;
        let cell = local / span.per_cell;
        Some(AnchorIndex {
            layer,
            row: cell / span.grid.1,
            col: cell % span.grid.1,
            slot: local % span.per_cell,
        })
    }

    /// Slot label: ratio tag or `extra`.
    pub fn slot_tag(&self, at: AnchorIndex) -> String {
        let ratios = &self.configs[at.layer].ratios;
        ratios.get(at.slot).map_or_else(|| "extra".to_string(), |&r| ratio_tag(r))
    }
}

/// Enumerates every anchor and clips it to the unit square.
pub fn generate<T: Scalar>(configs: &[LayerAnchorConfig], image_size: usize) -> Result<AnchorSet<T>> {
    if image_size == 0 {
        return Err(Error::invalid("anchors", "image size must be positive"));
    }
    let mut boxes = Vec::with_capacity(count(configs)?);
    let mut layers = Vec::with_capacity(configs.len());
    for cfg in configs {
        let start = boxes.len();
        for row in 0..cfg.grid.0 {
            for col in 0..cfg.grid.1 {
                boxes.extend(
                    cell_boxes::<T>(cfg, row, col, image_size)
                        .into_iter()
                        .map(|b| b.clamp(T::zero(), T::one())),
                );
            }
        }
        layers.push(LayerSpan {
            name: cfg.name.clone(),
            start,
            len: boxes.len() - start,
            grid: cfg.grid,
            per_cell: cfg.per_cell(),
        });
    }
    Ok(AnchorSet {
        boxes,
        layers,
        configs: configs.to_vec(),
    })
}

/// Total anchor count without materializing boxes.
pub fn count(configs: &[LayerAnchorConfig]) -> Result<usize> {
    configs.iter().try_fold(0, |acc, c| {
        c.validate()?;
        Ok(acc + c.count())
    })
}
