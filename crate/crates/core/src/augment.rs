//! Training-time augmentation.
//!
//! Images are `3 x H x W` grids with values in `[0, 1]`; boxes are normalized
//! to the image. Every random choice comes from the caller's RNG, so a fixed
//! seed reproduces the output bit for bit.

use std::io::{self, Write};
use std::str::FromStr;

use rand::Rng;

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Grid, Shape};

/// Drone-to-output size ratios for the anchor-based crop.
pub const RHO_VALUES: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledBox<T> {
    pub bbox: BBox<T>,
    pub class_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub image: Grid<T>,
    pub gts: Vec<LabeledBox<T>>,
}

impl<T: Scalar> Sample<T> {
    pub fn new(image: Grid<T>, gts: Vec<LabeledBox<T>>) -> Result<Self> {
        if image.channels() != 3 {
            return Err(Error::invalid("sample", format!("expected 3 channels, got {}", image.channels())));
        }
        if let Some(b) = gts.iter().find(|g| !in_unit(&g.bbox)) {
            return Err(Error::invalid("sample", format!("box {:?} outside the unit square", b.bbox)));
        }
        Ok(Self { image, gts })
    }
}

fn in_unit<T: Scalar>(b: &BBox<T>) -> bool {
    b.is_valid() && b.x_min >= T::zero() && b.y_min >= T::zero() && b.x_max <= T::one() && b.y_max <= T::one()
}

/// How the crop ratio sentence is read: the selected drone's longer side
/// becomes `output_size * rho` pixels after resizing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CropMode {
    #[default]
    AnchorSamplingV1,
}

impl CropMode {
    pub fn name(self) -> &'static str {
        match self {
            CropMode::AnchorSamplingV1 => "anchor_sampling_v1",
        }
    }
}

impl FromStr for CropMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "anchor_sampling_v1" => Ok(CropMode::AnchorSamplingV1),
            other => Err(Error::invalid("crop_mode", format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterConfig {
    /// Additive brightness delta bound.
    pub brightness: f64,
    /// Contrast factor drawn from `[1 - c, 1 + c]`.
    pub contrast: f64,
    /// Saturation factor drawn from `[1 - s, 1 + s]`.
    pub saturation: f64,
}

impl Default for JitterConfig {
    fn default() -> Self {
        Self {
            brightness: 32.0 / 255.0,
            contrast: 0.5,
            saturation: 0.5,
        }
    }
}

impl JitterConfig {
    pub const NONE: Self = Self {
        brightness: 0.0,
        contrast: 0.0,
        saturation: 0.0,
    };
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub crop_prob: f64,
    pub sigma_range: (f64, f64),
    pub flip_prob: f64,
    pub jitter_prob: f64,
    pub jitter: JitterConfig,
    pub output_size: usize,
    pub crop_mode: CropMode,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_prob: 0.6,
            sigma_range: (1.0, 3.0),
            flip_prob: 0.5,
            jitter_prob: 0.5,
            jitter: JitterConfig::default(),
            output_size: 512,
            crop_mode: CropMode::AnchorSamplingV1,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("crop_prob", self.crop_prob), ("flip_prob", self.flip_prob), ("jitter_prob", self.jitter_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid("augment", format!("{name} = {p} is not a probability")));
            }
        }
        let (lo, hi) = self.sigma_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::invalid("augment", format!("bad sigma range [{lo}, {hi}]")));
        }
        if self.output_size == 0 {
            return Err(Error::invalid("augment", "output size must be positive"));
        }
        Ok(())
    }
}

/// Pixel window `(x0, y0, w, h)` in source coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window {
    pub x0: f64,
    pub y0: f64,
    pub w: f64,
    pub h: f64,
}

/// Bilinear resample of a pixel window onto an `out x out` grid, sampling at
/// pixel centers with edge clamping.
pub fn resample<T: Scalar>(image: &Grid<T>, win: Window, out: usize) -> Result<Grid<T>> {
    if out == 0 || !(win.w > 0.0 && win.h > 0.0) {
        return Err(Error::invalid("resample", "empty window or output"));
    }
    let (h, w) = (image.height(), image.width());
    let coords = |start: f64, span: f64, n: usize| -> Vec<(usize, usize, T)> {
        (0..out)
            .map(|u| {
                let s = (start + (u as f64 + 0.5) * span / out as f64 - 0.5).clamp(0.0, (n - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n - 1);
                (i0, i1, T::lit(s - i0 as f64))
            })
            .collect()
    };
    let ys = coords(win.y0, win.h, h);
    let xs = coords(win.x0, win.w, w);
    Grid::from_fn(Shape::new(image.channels(), out, out), |c, v, u| {
        let (y0, y1, fy) = ys[v];
        let (x0, x1, fx) = xs[u];
        let top = image.get(c, y0, x0) * (T::one() - fx) + image.get(c, y0, x1) * fx;
        let bottom = image.get(c, y1, x0) * (T::one() - fx) + image.get(c, y1, x1) * fx;
        top * (T::one() - fy) + bottom * fy
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropTrace {
    pub gt_index: usize,
    pub rho: f64,
    /// Crop window in normalized source coordinates.
    pub window: BBox<f64>,
}

/// Square crop around a random drone, resized to `output_size`.
///
/// The crop side is the drone's longer pixel side over `rho`, clamped to the
/// shorter image side. Boxes whose centers leave the crop are dropped.
pub fn anchor_based_crop<T: Scalar, R: Rng + ?Sized>(
    sample: &Sample<T>,
    rng: &mut R,
    output_size: usize,
) -> Result<(Sample<T>, CropTrace)> {
    if sample.gts.is_empty() {
        return Err(Error::invalid("anchor_based_crop", "sample has no ground truths"));
    }
    let gt_index = rng.gen_range(0..sample.gts.len());
    let rho = RHO_VALUES[rng.gen_range(0..RHO_VALUES.len())];
    let (iw, ih) = (sample.image.width() as f64, sample.image.height() as f64);
    let b = sample.gts[gt_index].bbox;
    let (bx0, by0, bx1, by1) = (
        b.x_min.as_f64() * iw,
        b.y_min.as_f64() * ih,
        b.x_max.as_f64() * iw,
        b.y_max.as_f64() * ih,
    );
    let long = (bx1 - bx0).max(by1 - by0);
    let side = if long > 0.0 { long / rho } else { 1.0 }.min(iw.min(ih));
    let mut place = |lo: f64, hi: f64, extent: f64| -> f64 {
        let lo = lo.max(0.0);
        let hi = hi.min(extent - side);
        if hi > lo {
            rng.gen_range(lo..=hi)
        } else {
            lo.min(extent - side).max(0.0)
        }
    };
    let x0 = place(bx1 - side, bx0, iw);
    let y0 = place(by1 - side, by0, ih);
    let win = Window { x0, y0, w: side, h: side };
    let image = resample(&sample.image, win, output_size)?;

    let to_crop = |v: T, origin: f64, extent: f64| T::lit((v.as_f64() * extent - origin) / side);
    let gts = sample
        .gts
        .iter()
        .enumerate()
        .filter_map(|(i, g)| {
            let nb = BBox::new(
                to_crop(g.bbox.x_min, x0, iw),
                to_crop(g.bbox.y_min, y0, ih),
                to_crop(g.bbox.x_max, x0, iw),
                to_crop(g.bbox.y_max, y0, ih),
            );
            let (cx, cy) = nb.center();
            let inside = cx >= T::zero() && cx <= T::one() && cy >= T::zero() && cy <= T::one();
            (inside || i == gt_index).then(|| LabeledBox {
                bbox: nb.clamp(T::zero(), T::one()),
                class_id: g.class_id,
            })
        })
        .collect();
    let window = BBox::new(x0 / iw, y0 / ih, (x0 + side) / iw, (y0 + side) / ih);
    Ok((Sample { image, gts }, CropTrace { gt_index, rho, window }))
}

/// Normalized 1-D Gaussian taps over `[-ceil(3 sigma), ceil(3 sigma)]`.
pub fn gaussian_kernel<T: Scalar>(sigma: T) -> Result<Vec<T>> {
    if !(sigma > T::zero() && sigma.is_finite()) {
        return Err(Error::invalid("gaussian_blur", format!("sigma must be positive, got {sigma}")));
    }
    let radius = (sigma.as_f64() * 3.0).ceil() as i64;
    let two_s2 = T::two() * sigma * sigma;
    let raw: Vec<T> = (-radius..=radius)
        .map(|k| (-T::lit((k * k) as f64) / two_s2).exp())
        .collect();
    let total: T = raw.iter().copied().sum();
    Ok(raw.into_iter().map(|v| v / total).collect())
}

/// Half-sample symmetric reflection (`-1 -> 0`, `n -> n - 1`).
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Separable Gaussian filter with symmetric reflect padding; boxes unchanged.
pub fn gaussian_blur<T: Scalar>(sample: &Sample<T>, sigma: T) -> Result<Sample<T>> {
    let k = gaussian_kernel(sigma)?;
    let r = (k.len() / 2) as i64;
    let img = &sample.image;
    let s = img.shape();
    let rows = Grid::from_fn(s, |c, y, x| {
        k.iter()
            .enumerate()
            .map(|(t, &w)| w * img.get(c, y, reflect(x as i64 + t as i64 - r, s.width)))
            .sum()
    })?;
    let image = Grid::from_fn(s, |c, y, x| {
        k.iter()
            .enumerate()
            .map(|(t, &w)| w * rows.get(c, reflect(y as i64 + t as i64 - r, s.height), x))
            .sum()
    })?;
    Ok(Sample {
        image,
        gts: sample.gts.clone(),
    })
}

pub fn horizontal_flip<T: Scalar>(sample: &Sample<T>) -> Sample<T> {
    let img = &sample.image;
    let w = img.width();
    let image = Grid::from_fn(img.shape(), |c, y, x| img.get(c, y, w - 1 - x)).expect("same shape");
    let gts = sample
        .gts
        .iter()
        .map(|g| LabeledBox {
            bbox: BBox::new(T::one() - g.bbox.x_max, g.bbox.y_min, T::one() - g.bbox.x_min, g.bbox.y_max),
            class_id: g.class_id,
        })
        .collect();
    Sample { image, gts }
}

/// Brightness, contrast and saturation changes with factors drawn within
/// the configured bounds; zero bounds leave the image untouched.
pub fn color_jitter<T: Scalar, R: Rng + ?Sized>(sample: &Sample<T>, config: &JitterConfig, rng: &mut R) -> Sample<T> {
    let mut draw = |amp: f64, center: f64| {
        if amp > 0.0 {
            Some(T::lit(rng.gen_range(center - amp..=center + amp)))
        } else {
            None
        }
    };
    let delta = draw(config.brightness, 0.0);
    let contrast = draw(config.contrast, 1.0);
    let saturation = draw(config.saturation, 1.0);
    let mut image = sample.image.clone();
    if delta.is_none() && contrast.is_none() && saturation.is_none() {
        return Sample {
            image,
            gts: sample.gts.clone(),
        };
    }
    let (h, w) = (image.height(), image.width());
    for y in 0..h {
        for x in 0..w {
            let mut px = [image.get(0, y, x), image.get(1, y, x), image.get(2, y, x)];
            if let Some(d) = delta {
                px.iter_mut().for_each(|v| *v = *v + d);
            }
            if let Some(a) = contrast {
                px.iter_mut().for_each(|v| *v = *v * a);
            }
            if let Some(s) = saturation {
                let gray = T::lit(0.299) * px[0] + T::lit(0.587) * px[1] + T::lit(0.114) * px[2];
                px.iter_mut().for_each(|v| *v = gray + (*v - gray) * s);
            }
            for (c, v) in px.into_iter().enumerate() {
                image.set(c, y, x, v.max(T::zero()).min(T::one()));
            }
        }
    }
    Sample {
        image,
        gts: sample.gts.clone(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Branch {
    Crop(CropTrace),
    /// `fallback` is set when the crop was drawn but the sample had no boxes.
    Blur { sigma: f64, fallback: bool },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trace {
    pub branch: Branch,
    pub flipped: bool,
    pub jittered: bool,
}

/// Crop with probability `crop_prob`, otherwise blur and resize; then flip
/// and jitter, each independently.
pub fn pipeline<T: Scalar, R: Rng + ?Sized>(
    sample: &Sample<T>,
    config: &AugmentConfig,
    rng: &mut R,
) -> Result<(Sample<T>, Trace)> {
    config.validate()?;
    let crop = rng.gen_bool(config.crop_prob);
    let (mut out, branch) = if crop && !sample.gts.is_empty() {
        let (s, t) = anchor_based_crop(sample, rng, config.output_size)?;
        (s, Branch::Crop(t))
    } else {
        let (lo, hi) = config.sigma_range;
        let sigma = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let blurred = gaussian_blur(sample, T::lit(sigma))?;
        let whole = Window {
            x0: 0.0,
            y0: 0.0,
            w: sample.image.width() as f64,
            h: sample.image.height() as f64,
        };
        let image = resample(&blurred.image, whole, config.output_size)?;
        (
            Sample {
                image,
                gts: blurred.gts,
            },
            Branch::Blur { sigma, fallback: crop },
        )
    };
    let flipped = rng.gen_bool(config.flip_prob);
    if flipped {
        out = horizontal_flip(&out);
    }
    let jittered = rng.gen_bool(config.jitter_prob);
    if jittered {
        out = color_jitter(&out, &config.jitter, rng);
    }
    Ok((out, Trace { branch, flipped, jittered }))
}

/// Binary 8-bit portable pixmap.
pub fn write_ppm<T: Scalar, W: Write>(image: &Grid<T>, mut out: W) -> io::Result<()> {
    if image.channels() != 3 {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "ppm needs 3 channels"));
    }
    let (h, w) = (image.height(), image.width());
    write!(out, "P6\n{w} {h}\n255\n")?;
    let mut row = Vec::with_capacity(w * 3);
    for y in 0..h {
        row.clear();
        for x in 0..w {
            for c in 0..3 {
                let v = image.get(c, y, x).as_f64().clamp(0.0, 1.0);
                row.push((v * 255.0).round() as u8);
            }
        }
        out.write_all(&row)?;
    }
    Ok(())
}
