//! Run configuration and its `key = value` text form.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use secl_autodiff::AdamConfig;
use thiserror::Error;

use crate::augment::AugmentRanges;
use crate::ema::EmaConfig;
use crate::losses::RampUpSchedule;
use crate::model::ArchConfig;
use crate::sampling::{AacsConfig, RacsConfig};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected key = value")]
    Syntax { line: usize },
    #[error("unknown key {0}")]
    UnknownKey(String),
    #[error("key {key}: cannot parse {value:?}")]
    Value { key: String, value: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    SupervisedOnly,
    MeanTeacher,
    SeclRacs,
    SeclAacs,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::SupervisedOnly, Mode::MeanTeacher, Mode::SeclRacs, Mode::SeclAacs];

    pub fn name(self) -> &'static str {
        match self {
            Mode::SupervisedOnly => "supervised-only",
            Mode::MeanTeacher => "mean-teacher-consistency",
            Mode::SeclRacs => "secl-racs",
            Mode::SeclAacs => "secl-aacs",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mode {s}"))
    }
}

/// Every hyperparameter of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub arch: ArchConfig,
    pub ema: EmaConfig,
    pub tau: f64,
    /// Peak of the ramp-up weight; 0 disables the unsupervised term.
    pub lambda_peak: f64,
    pub aacs: AacsConfig,
    pub racs: RacsConfig,
    pub augment: AugmentRanges,
    pub adam: AdamConfig,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    pub epochs: usize,
    /// Validation Dice is logged every this many epochs and at the last one.
    pub val_every: usize,
    pub seed: u64,
    pub data_dir: PathBuf,
    /// Split manifest; relative paths resolve against `data_dir`.
    pub split: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::SeclAacs,
            arch: ArchConfig::default(),
            ema: EmaConfig::default(),
            tau: 0.1,
            lambda_peak: RampUpSchedule::PEAK,
            aacs: AacsConfig::default(),
            racs: RacsConfig::default(),
            augment: AugmentRanges::default(),
            adam: AdamConfig::default(),
            labeled_batch: 2,
            unlabeled_batch: 1,
            epochs: 300,
            val_every: 1,
            seed: 0,
            data_dir: PathBuf::from("data"),
            split: PathBuf::from(crate::data::SPLIT_FILE),
            out_dir: PathBuf::from("runs"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::Value {
        key: key.into(),
        value: value.into(),
    })
}

impl RunConfig {
    pub fn schedule(&self) -> RampUpSchedule {
        RampUpSchedule {
            t_max: self.epochs as f64,
            peak: self.lambda_peak,
        }
    }

    pub fn split_path(&self) -> PathBuf {
        if self.split.is_absolute() {
            self.split.clone()
        } else {
            self.data_dir.join(&self.split)
        }
    }

    /// `(key, value)` pairs in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let a = &self.arch;
        let g = &self.augment;
        vec![
            ("mode", self.mode.to_string()),
            ("extents", format!("{}x{}x{}", a.extents[0], a.extents[1], a.extents[2])),
            ("levels", a.levels.to_string()),
            ("base_channels", a.base_channels.to_string()),
            ("hidden_dim", a.hidden_dim.to_string()),
            ("emb_dim", a.emb_dim.to_string()),
            ("classes", a.classes.to_string()),
            ("alpha", self.ema.alpha.to_string()),
            ("tau", self.tau.to_string()),
            ("lambda_peak", self.lambda_peak.to_string()),
            ("aacs_k", self.aacs.k.to_string()),
            ("cube", self.aacs.cube.to_string()),
            ("racs_partitions", self.racs.partitions.to_string()),
            ("racs_subjects", self.racs.subjects.to_string()),
            ("aug_shift", g.intensity_shift.to_string()),
            ("aug_elastic_grid", g.elastic_grid.to_string()),
            ("aug_elastic_sigma", g.elastic_sigma.to_string()),
            ("aug_flip_prob", g.flip_prob.to_string()),
            ("aug_scale_min", g.scale.0.to_string()),
            ("aug_scale_max", g.scale.1.to_string()),
            ("aug_rotation_deg", g.rotation_deg.to_string()),
            ("lr", self.adam.lr.to_string()),
            ("beta1", self.adam.beta1.to_string()),
            ("beta2", self.adam.beta2.to_string()),
            ("eps", self.adam.eps.to_string()),
            ("labeled_batch", self.labeled_batch.to_string()),
            ("unlabeled_batch", self.unlabeled_batch.to_string()),
            ("epochs", self.epochs.to_string()),
            ("val_every", self.val_every.to_string()),
            ("seed", self.seed.to_string()),
            ("data_dir", self.data_dir.display().to_string()),
            ("split", self.split.display().to_string()),
            ("out_dir", self.out_dir.display().to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value;
        match key {
            "mode" => {
                self.mode = v.parse().map_err(|_| ConfigError::Value {
                    key: key.into(),
                    value: v.into(),
                })?
            }
            "extents" => {
                let parts: Vec<usize> = v
                    .split('x')
                    .map(|p| parse(key, p.trim()))
                    .collect::<Result<_, _>>()?;
                self.arch.extents = parts.try_into().map_err(|_| ConfigError::Value {
                    key: key.into(),
                    value: v.into(),
                })?;
            }
            "levels" => self.arch.levels = parse(key, v)?,
            "base_channels" => self.arch.base_channels = parse(key, v)?,
            "hidden_dim" => self.arch.hidden_dim = parse(key, v)?,
            "emb_dim" => self.arch.emb_dim = parse(key, v)?,
            "classes" => {
                self.arch.classes = parse(key, v)?;
                self.aacs.classes = self.arch.classes;
            }
            "alpha" => self.ema.alpha = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "lambda_peak" => self.lambda_peak = parse(key, v)?,
            "aacs_k" => self.aacs.k = parse(key, v)?,
            "cube" => self.aacs.cube = parse(key, v)?,
            "racs_partitions" => self.racs.partitions = parse(key, v)?,
            "racs_subjects" => self.racs.subjects = parse(key, v)?,
            "aug_shift" => self.augment.intensity_shift = parse(key, v)?,
            "aug_elastic_grid" => self.augment.elastic_grid = parse(key, v)?,
            "aug_elastic_sigma" => self.augment.elastic_sigma = parse(key, v)?,
            "aug_flip_prob" => self.augment.flip_prob = parse(key, v)?,
            "aug_scale_min" => self.augment.scale.0 = parse(key, v)?,
            "aug_scale_max" => self.augment.scale.1 = parse(key, v)?,
            "aug_rotation_deg" => self.augment.rotation_deg = parse(key, v)?,
            "lr" => self.adam.lr = parse(key, v)?,
            "beta1" => self.adam.beta1 = parse(key, v)?,
            "beta2" => self.adam.beta2 = parse(key, v)?,
            "eps" => self.adam.eps = parse(key, v)?,
            "labeled_batch" => self.labeled_batch = parse(key, v)?,
            "unlabeled_batch" => self.unlabeled_batch = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "val_every" => self.val_every = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "split" => self.split = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            other => return Err(ConfigError::UnknownKey(other.into())),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults; `#` starts a comment.
    pub fn parse_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: n + 1 })?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Invalid(format!("{}: {e}", path.display())))?;
        Self::parse_text(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.arch.validate().map_err(ConfigError::Invalid)?;
        EmaConfig::new(self.ema.alpha).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.augment.validate().map_err(ConfigError::Invalid)?;
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.lambda_peak >= 0.0) {
            return bad(format!("lambda_peak must be non-negative, got {}", self.lambda_peak));
        }
        if self.epochs == 0 || self.labeled_batch == 0 || self.unlabeled_batch == 0 {
            return bad("epochs and batch sizes must be positive".into());
        }
        if self.aacs.classes != self.arch.classes {
            return bad("AACS class count differs from the architecture".into());
        }
        let min = self.arch.min_encoder_extent();
        match self.mode {
            Mode::SeclAacs => {
                self.aacs
                    .validate(self.arch.extents)
                    .map_err(|e| ConfigError::Invalid(e.to_string()))?;
                if self.aacs.cube < min {
                    return bad(format!("cube edge {} below encoder minimum {min}", self.aacs.cube));
                }
            }
            Mode::SeclRacs => {
                self.racs
                    .validate(self.arch.extents)
                    .map_err(|e| ConfigError::Invalid(e.to_string()))?;
                if self.arch.extents[0] / self.racs.partitions < min {
                    return bad(format!("partition depth below encoder minimum {min}"));
                }
            }
            _ => {}
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return bad("invalid optimizer hyperparameters".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.mode = Mode::SeclRacs;
        cfg.ema.alpha = 0.99;
        cfg.tau = 0.07;
        cfg.seed = 17;
        cfg.augment.scale = (0.95, 1.05);
        let back = RunConfig::parse_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn errors_are_specific() {
        assert_eq!(
            RunConfig::parse_text("bogus = 1"),
            Err(ConfigError::UnknownKey("bogus".into()))
        );
        assert_eq!(RunConfig::parse_text("alpha 0.5"), Err(ConfigError::Syntax { line: 1 }));
        assert!(matches!(RunConfig::parse_text("alpha = 2"), Err(ConfigError::Invalid(_))));
        assert!(matches!(RunConfig::parse_text("mode = fancy"), Err(ConfigError::Value { .. })));
        assert!(matches!(RunConfig::parse_text("aacs_k = 2"), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let cfg = RunConfig::parse_text("# run\n\nepochs = 5 # short\n").unwrap();
        assert_eq!(cfg.epochs, 5);
    }
}
