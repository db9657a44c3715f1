//! Training configuration as `key=value` lines.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::backbone::BackboneConfig;
use crate::data::GenConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::schedule::Schedule;
use crate::state::OutputSlot;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: f64,
    pub warmup: usize,
    pub power: f64,
    pub batch: usize,
    /// Square crop side; only full-frame crops are supported.
    pub crop: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub flip: bool,
    /// Number of training clips generated from `seed`.
    pub samples: usize,
    pub data: GenConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            lr: 2e-3,
            warmup: 100,
            power: 0.9,
            batch: 2,
            crop: 64,
            seed: 0,
            weight_decay: 0.01,
            flip: true,
            samples: 8,
            data: GenConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key} must be true or false, got {value:?}"))),
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 26] = [
        "iterations",
        "lr",
        "warmup",
        "power",
        "batch",
        "crop",
        "seed",
        "weight_decay",
        "flip",
        "samples",
        "height",
        "width",
        "classes",
        "objects",
        "min_size",
        "max_size",
        "max_shift",
        "noise",
        "grid",
        "ellipses",
        "motion_coded",
        "widths",
        "heads",
        "mlp_ratio",
        "variant",
        "slot",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "iterations" => self.iterations = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "warmup" => self.warmup = parse(key, value)?,
            "power" => self.power = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "crop" => self.crop = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "flip" => self.flip = parse_bool(key, value)?,
            "samples" => self.samples = parse(key, value)?,
            "height" => self.data.height = parse(key, value)?,
            "width" => self.data.width = parse(key, value)?,
            "classes" => {
                self.data.classes = parse(key, value)?;
                self.model.classes = self.data.classes;
            }
            "objects" => self.data.objects = parse(key, value)?,
            "min_size" => self.data.min_size = parse(key, value)?,
            "max_size" => self.data.max_size = parse(key, value)?,
            "max_shift" => self.data.max_shift = parse(key, value)?,
            "noise" => self.data.noise = parse(key, value)?,
            "grid" => self.data.grid = parse(key, value)?,
            "ellipses" => self.data.ellipses = parse_bool(key, value)?,
            "motion_coded" => self.data.motion_coded = parse_bool(key, value)?,
            "widths" => {
                let w: Vec<usize> = value
                    .split(',')
                    .map(|v| parse(key, v.trim()))
                    .collect::<Result<_>>()?;
                self.model.backbone.widths = w
                    .try_into()
                    .map_err(|_| Error::Config(format!("widths needs 5 values, got {value:?}")))?;
            }
            "heads" => self.model.heads = parse(key, value)?,
            "mlp_ratio" => self.model.mlp_ratio = parse(key, value)?,
            "variant" => {
                self.model.variant = match value {
                    "full" => Variant::Full,
                    "no_motion" => Variant::NoMotion,
                    _ => return Err(Error::Config(format!("variant must be full or no_motion, got {value:?}"))),
                }
            }
            "slot" => {
                self.model.slot = match value {
                    "f5" => OutputSlot::F5,
                    "mean" => OutputSlot::Mean,
                    _ => return Err(Error::Config(format!("slot must be f5 or mean, got {value:?}"))),
                }
            }
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies an override of the form `key=value`.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {assignment:?}")))?;
        self.set(k, v)
    }

    /// Parses config text over the defaults. Blank lines and `#` comments are
    /// skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
            cfg.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, e.to_string().trim_start_matches("config error: "))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        if self.batch == 0 || self.samples == 0 {
            return Err(Error::Config("batch and samples must be positive".into()));
        }
        if self.crop != self.data.height || self.crop != self.data.width {
            return Err(Error::Config(format!(
                "crop {} must equal the {}x{} frame (sub-frame crops are not supported)",
                self.crop, self.data.height, self.data.width
            )));
        }
        if self.model.classes != self.data.classes {
            return Err(Error::Config("model and data class counts differ".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<Schedule> {
        Schedule::new(self.lr, self.warmup, self.iterations, self.power).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn backbone(&self) -> BackboneConfig {
        self.model.backbone
    }

    /// Serializes every key, so `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let d = &self.data;
        let m = &self.model;
        let mut s = String::new();
        let w = m.backbone.widths.map(|v| v.to_string()).join(",");
        let entries: [(&str, String); 26] = [
            ("iterations", self.iterations.to_string()),
            ("lr", self.lr.to_string()),
            ("warmup", self.warmup.to_string()),
            ("power", self.power.to_string()),
            ("batch", self.batch.to_string()),
            ("crop", self.crop.to_string()),
            ("seed", self.seed.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("flip", self.flip.to_string()),
            ("samples", self.samples.to_string()),
            ("height", d.height.to_string()),
            ("width", d.width.to_string()),
            ("classes", d.classes.to_string()),
            ("objects", d.objects.to_string()),
            ("min_size", d.min_size.to_string()),
            ("max_size", d.max_size.to_string()),
            ("max_shift", d.max_shift.to_string()),
            ("noise", d.noise.to_string()),
            ("grid", d.grid.to_string()),
            ("ellipses", d.ellipses.to_string()),
            ("motion_coded", d.motion_coded.to_string()),
            ("widths", w),
            ("heads", m.heads.to_string()),
            ("mlp_ratio", m.mlp_ratio.to_string()),
            (
                "variant",
                match m.variant {
                    Variant::Full => "full",
                    Variant::NoMotion => "no_motion",
                }
                .into(),
            ),
            (
                "slot",
                match m.slot {
                    OutputSlot::F5 => "f5",
                    OutputSlot::Mean => "mean",
                }
                .into(),
            ),
        ];
        for (k, v) in entries {
            writeln!(s, "{k}={v}").expect("string write");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_covers_every_key() {
        let mut cfg = TrainConfig::default();
        cfg.set("variant", "no_motion").unwrap();
        cfg.set("widths", "4, 4, 8, 8, 8").unwrap();
        cfg.set("noise", "0.125").unwrap();
        let text = cfg.to_text();
        assert_eq!(TrainConfig::parse(&text).unwrap(), cfg);
        for key in TrainConfig::KEYS {
            assert!(text.contains(&format!("{key}=")), "{key}");
        }
    }

    #[test]
    fn comments_and_overrides() {
        let mut cfg = TrainConfig::parse("# toy\niterations = 50\n\nwarmup=5\nflip=false\n").unwrap();
        assert_eq!((cfg.iterations, cfg.warmup, cfg.flip), (50, 5, false));
        cfg.apply_override("lr=0.5").unwrap();
        assert_eq!(cfg.lr, 0.5);
        assert!(cfg.apply_override("lr").is_err());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        for text in ["colour=red", "flip=yes", "iterations=-3", "widths=1,2", "no equals sign"] {
            let err = TrainConfig::parse(text).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{text}: {err}");
            assert!(err.is_format());
        }
    }

    #[test]
    fn invariants_are_validated() {
        assert!(TrainConfig::parse("warmup=2000").is_err());
        assert!(TrainConfig::parse("power=0").is_err());
        assert!(TrainConfig::parse("crop=32").is_err());
        assert!(TrainConfig::parse("batch=0").is_err());
    }
}
