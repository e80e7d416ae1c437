//! Run configuration: a flat `key = value` text file layered under flags.
//!
//! Resolution order is defaults, then the config file, then `--set` pairs,
//! then subcommand flags. `#` starts a comment.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use dronedet::anchors::{default_beta, S_MAX, S_MIN, LAYER_SIZES};
use dronedet::augment::{AugmentConfig, CropMode, JitterConfig};
use dronedet::datasetio::DEFAULT_VAL_FRACTION;
use dronedet::dilation::DEFAULT_RATES;
use dronedet::pyramid::INPUT_SIZE;

use crate::Failure;

pub const SCHEMA: &str = "# dronedet config v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLayout {
    Default,
    Ssd300,
}

impl FromStr for AnchorLayout {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "default" => Ok(AnchorLayout::Default),
            "ssd300" => Ok(AnchorLayout::Ssd300),
            _ => Err(format!("unknown anchor layout `{s}` (default, ssd300)")),
        }
    }
}

impl AnchorLayout {
    fn name(self) -> &'static str {
        match self {
            AnchorLayout::Default => "default",
            AnchorLayout::Ssd300 => "ssd300",
        }
    }
}

/// Training hyper-parameters. Recorded so a run file documents the intended
/// schedule; no subcommand trains.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainDefaults {
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub batch_size: usize,
}

impl Default for TrainDefaults {
    fn default() -> Self {
        TrainDefaults {
            momentum: 0.9,
            weight_decay: 0.0005,
            lr: 1e-3,
            lr_decay: 0.8,
            lr_decay_every: 5,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// 0 lets the pool pick one thread per core.
    pub workers: usize,
    pub anchor_layout: AnchorLayout,
    pub s_min: f64,
    pub s_max: f64,
    pub beta: Vec<f64>,
    pub iou_threshold: f64,
    pub variances: (f64, f64),
    pub crop_prob: f64,
    pub flip_prob: f64,
    pub jitter_prob: f64,
    pub sigma_range: (f64, f64),
    pub output_size: usize,
    pub crop_mode: CropMode,
    pub val_fraction: f64,
    pub width_divisor: usize,
    pub center_rates: Vec<usize>,
    pub train: TrainDefaults,
}

impl Default for RunConfig {
    fn default() -> Self {
        let aug = AugmentConfig::default();
        RunConfig {
            seed: 0,
            workers: 0,
            anchor_layout: AnchorLayout::Default,
            s_min: S_MIN,
            s_max: S_MAX,
            beta: default_beta(INPUT_SIZE),
            iou_threshold: 0.5,
            variances: (0.1, 0.2),
            crop_prob: aug.crop_prob,
            flip_prob: aug.flip_prob,
            jitter_prob: aug.jitter_prob,
            sigma_range: aug.sigma_range,
            output_size: aug.output_size,
            crop_mode: aug.crop_mode,
            val_fraction: DEFAULT_VAL_FRACTION,
            width_divisor: 1,
            center_rates: DEFAULT_RATES.to_vec(),
            train: TrainDefaults::default(),
        }
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("{key}: cannot parse `{v}`"))
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>, String> {
    v.split(',').map(|s| num(key, s.trim())).collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Every key in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        vec![
            ("seed", self.seed.to_string()),
            ("workers", self.workers.to_string()),
            ("anchor_layout", self.anchor_layout.name().into()),
            ("s_min", self.s_min.to_string()),
            ("s_max", self.s_max.to_string()),
            ("beta", join(&self.beta)),
            ("iou_threshold", self.iou_threshold.to_string()),
            ("variance_center", self.variances.0.to_string()),
            ("variance_size", self.variances.1.to_string()),
            ("crop_prob", self.crop_prob.to_string()),
            ("flip_prob", self.flip_prob.to_string()),
            ("jitter_prob", self.jitter_prob.to_string()),
            ("sigma_min", self.sigma_range.0.to_string()),
            ("sigma_max", self.sigma_range.1.to_string()),
            ("output_size", self.output_size.to_string()),
            ("crop_mode", self.crop_mode.name().into()),
            ("val_fraction", self.val_fraction.to_string()),
            ("width_divisor", self.width_divisor.to_string()),
            ("center_rates", join(&self.center_rates)),
            ("train.momentum", t.momentum.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.lr_decay", t.lr_decay.to_string()),
            ("train.lr_decay_every", t.lr_decay_every.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let v = v.trim();
        match key {
            "seed" => self.seed = num(key, v)?,
            "workers" => self.workers = num(key, v)?,
            "anchor_layout" => self.anchor_layout = v.parse()?,
            "s_min" => self.s_min = num(key, v)?,
            "s_max" => self.s_max = num(key, v)?,
            "beta" => self.beta = list(key, v)?,
            "iou_threshold" => self.iou_threshold = num(key, v)?,
            "variance_center" => self.variances.0 = num(key, v)?,
            "variance_size" => self.variances.1 = num(key, v)?,
            "crop_prob" => self.crop_prob = num(key, v)?,
            // the two branches are complementary
            "blur_prob" => self.crop_prob = 1.0 - num::<f64>(key, v)?,
            "flip_prob" => self.flip_prob = num(key, v)?,
            "jitter_prob" => self.jitter_prob = num(key, v)?,
            "sigma_min" => self.sigma_range.0 = num(key, v)?,
            "sigma_max" => self.sigma_range.1 = num(key, v)?,
            "output_size" => self.output_size = num(key, v)?,
            "crop_mode" => self.crop_mode = v.parse().map_err(|e: dronedet::Error| e.to_string())?,
            "val_fraction" => self.val_fraction = num(key, v)?,
            "width_divisor" => self.width_divisor = num(key, v)?,
            "center_rates" => self.center_rates = list(key, v)?,
            "train.momentum" => self.train.momentum = num(key, v)?,
            "train.weight_decay" => self.train.weight_decay = num(key, v)?,
            "train.lr" => self.train.lr = num(key, v)?,
            "train.lr_decay" => self.train.lr_decay = num(key, v)?,
            "train.lr_decay_every" => self.train.lr_decay_every = num(key, v)?,
            "train.batch_size" => self.train.batch_size = num(key, v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Applies a `key=value` pair.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), String> {
        let (k, v) = pair.split_once('=').ok_or_else(|| format!("`{pair}` is not key=value"))?;
        self.set(k.trim(), v)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{SCHEMA}\n");
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
            if k == "crop_prob" {
                let _ = writeln!(out, "# blur_prob = 1 - crop_prob = {}", 1.0 - self.crop_prob);
            }
        }
        out
    }

    /// Applies a config file on top of `self`. Keys may appear once.
    pub fn apply_text(&mut self, text: &str) -> Result<(), String> {
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected `key = value`", i + 1))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(format!("line {}: duplicate key `{k}`", i + 1));
            }
            self.set(k, v).map_err(|e| format!("line {}: {e}", i + 1))?;
        }
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<(), Failure> {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::new("io", format!("{}: {e}", path.display())))?;
        self.apply_text(&text)
            .map_err(|e| Failure::new("config", format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), String> {
        for (k, p) in [
            ("crop_prob", self.crop_prob),
            ("flip_prob", self.flip_prob),
            ("jitter_prob", self.jitter_prob),
            ("iou_threshold", self.iou_threshold),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{k} = {p} is outside [0, 1]"));
            }
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(format!("val_fraction = {} is outside (0, 1)", self.val_fraction));
        }
        if self.beta.len() != LAYER_SIZES.len() {
            return Err(format!("beta needs {} values, found {}", LAYER_SIZES.len(), self.beta.len()));
        }
        if !(self.variances.0 > 0.0 && self.variances.1 > 0.0) {
            return Err("variances must be positive".into());
        }
        if self.width_divisor == 0 {
            return Err("width_divisor must be positive".into());
        }
        self.augment().validate().map_err(|e| e.to_string())
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            crop_prob: self.crop_prob,
            sigma_range: self.sigma_range,
            flip_prob: self.flip_prob,
            jitter_prob: self.jitter_prob,
            jitter: JitterConfig::default(),
            output_size: self.output_size,
            crop_mode: self.crop_mode,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.set_pair("seed=42").unwrap();
        c.set_pair("beta = 0.5,0.5,0.5,0.5,0.5,0.5,0.5,1").unwrap();
        c.set_pair("anchor_layout=ssd300").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(RunConfig::default().to_text(), RunConfig::default().to_text());
    }

    #[test]
    fn defaults_record_the_training_schedule() {
        let c = RunConfig::default();
        assert_eq!(c.train, TrainDefaults::default());
        assert_eq!((c.crop_prob, c.iou_threshold), (0.6, 0.5));
        let text = c.to_text();
        assert!(text.starts_with(SCHEMA));
        for line in ["train.momentum = 0.9", "train.weight_decay = 0.0005", "train.lr = 0.001", "train.batch_size = 16"] {
            assert!(text.contains(line), "{line}");
        }
        assert!(c.validate().is_ok());
    }

    #[test]
    fn bad_input_is_rejected() {
        let mut c = RunConfig::default();
        assert!(c.set_pair("nope=1").is_err());
        assert!(c.set_pair("seed").is_err());
        assert!(c.apply_text("seed = 1\nseed = 2\n").is_err());
        c.set_pair("crop_prob=1.5").unwrap();
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.set_pair("blur_prob=0.25").unwrap();
        assert_eq!(c.crop_prob, 0.75);
    }
}
