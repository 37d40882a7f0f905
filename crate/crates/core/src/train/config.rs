use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Cosine,
    Constant,
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Schedule::Cosine => "cosine",
            Schedule::Constant => "constant",
        })
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Schedule::Cosine),
            "constant" => Ok(Schedule::Constant),
            other => Err(Error::Config(format!("unknown schedule {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: u64,
    pub schedule: Schedule,
    pub grad_clip_norm: Option<f64>,
    pub seed: u64,
    pub augment_flip: bool,
    pub augment_crop_pad: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 32,
            learning_rate: 1e-3,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 0,
            schedule: Schedule::Cosine,
            grad_clip_norm: Some(1.0),
            seed: 0,
            augment_flip: false,
            augment_crop_pad: 0,
        }
    }
}

impl TrainConfig {
    /// Desk defaults with one epoch of warmup for a dataset of `samples`.
    pub fn desk(samples: usize) -> Self {
        let mut c = Self::default();
        c.warmup_steps = c.steps_per_epoch(samples);
        c
    }

    pub fn steps_per_epoch(&self, samples: usize) -> u64 {
        samples.div_ceil(self.batch_size.max(1)) as u64
    }

    // negated comparisons also reject NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail(format!(
                "learning_rate {} must be finite and non-negative",
                self.learning_rate
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail(format!(
                "betas ({}, {}) must lie in [0, 1)",
                self.beta1, self.beta2
            ));
        }
        if self.epochs < 1 {
            return fail("epochs must be at least 1".into());
        }
        if self.batch_size < 1 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return fail("eps must be positive and weight_decay non-negative".into());
        }
        if matches!(self.grad_clip_norm, Some(c) if !(c > 0.0)) {
            return fail("grad_clip_norm must be positive".into());
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> BTreeMap<&'static str, String> {
        BTreeMap::from([
            ("augment_crop_pad", self.augment_crop_pad.to_string()),
            ("augment_flip", self.augment_flip.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("epochs", self.epochs.to_string()),
            ("eps", self.eps.to_string()),
            (
                "grad_clip_norm",
                self.grad_clip_norm
                    .map_or_else(|| "none".to_string(), |v| v.to_string()),
            ),
            ("learning_rate", self.learning_rate.to_string()),
            ("schedule", self.schedule.to_string()),
            ("seed", self.seed.to_string()),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
        ])
    }

    /// Applies one `key=value` setting; returns `false` for keys this type does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = || Error::Config(format!("invalid value {value:?} for {key}"));
        let float = || value.parse::<f64>().map_err(|_| bad());
        let int = || value.parse::<u64>().map_err(|_| bad());
        match key {
            "epochs" => self.epochs = int()?,
            "batch_size" => self.batch_size = value.parse().map_err(|_| bad())?,
            "learning_rate" => self.learning_rate = float()?,
            "weight_decay" => self.weight_decay = float()?,
            "beta1" => self.beta1 = float()?,
            "beta2" => self.beta2 = float()?,
            "eps" => self.eps = float()?,
            "warmup_steps" => self.warmup_steps = int()?,
            "schedule" => self.schedule = value.parse()?,
            "grad_clip_norm" => {
                self.grad_clip_norm = match value {
                    "none" => None,
                    v => Some(v.parse().map_err(|_| bad())?),
                }
            }
            "seed" => self.seed = int()?,
            "augment_flip" => self.augment_flip = value.parse().map_err(|_| bad())?,
            "augment_crop_pad" => self.augment_crop_pad = value.parse().map_err(|_| bad())?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Learning rate for 0-based update `step` out of `total_steps`: linear
/// warmup from zero, then cosine decay to zero at `total_steps` (or flat).
pub fn lr_at(step: u64, total_steps: u64, config: &TrainConfig) -> f64 {
    let peak = config.learning_rate;
    let warmup = config.warmup_steps;
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    match config.schedule {
        Schedule::Constant => peak,
        Schedule::Cosine => {
            let span = total_steps.saturating_sub(warmup);
            let progress = if span == 0 {
                1.0
            } else {
                ((step - warmup) as f64 / span as f64).min(1.0)
            };
            peak * 0.5 * (1.0 + (PI * progress).cos())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let c = TrainConfig {
            warmup_steps: 10,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(0, 100, &c), 0.0);
        assert!((lr_at(5, 100, &c) - 0.5 * c.learning_rate).abs() < 1e-18);
        assert_eq!(lr_at(10, 100, &c), c.learning_rate);
        assert!(lr_at(100, 100, &c) < 1e-8 * c.learning_rate);
        assert!((lr_at(55, 100, &c) - 0.5 * c.learning_rate).abs() < 1e-15);
        let flat = TrainConfig {
            schedule: Schedule::Constant,
            ..c
        };
        assert_eq!(lr_at(99, 100, &flat), flat.learning_rate);
    }

    #[test]
    fn validation() {
        TrainConfig::default().validate().unwrap();
        for bad in [
            TrainConfig {
                beta1: 1.0,
                ..Default::default()
            },
            TrainConfig {
                epochs: 0,
                ..Default::default()
            },
            TrainConfig {
                learning_rate: f64::NAN,
                ..Default::default()
            },
            TrainConfig {
                grad_clip_norm: Some(0.0),
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn pairs_roundtrip() {
        let c = TrainConfig {
            grad_clip_norm: None,
            learning_rate: 3.3e-4,
            schedule: Schedule::Constant,
            ..TrainConfig::desk(1000)
        };
        let mut d = TrainConfig::default();
        for (k, v) in c.to_pairs() {
            assert!(d.set(k, &v).unwrap());
        }
        assert_eq!(c, d);
        assert_eq!(TrainConfig::desk(1000).warmup_steps, 32);
    }
}
