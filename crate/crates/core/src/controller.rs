//! Epoch-level keep-ratio controllers.
//!
//! Both adaptive policies start dense (`r = 1`), compress the shared keep
//! ratio a little after every epoch, and jump back to `r = 1` once the
//! smoothed training accuracy signals that the network has been squeezed
//! too hard. The result is a repeating compress / recover cycle over one
//! model. The dense policy pins `r = 1` and serves as the baseline.
//!
//! A step consumes the training accuracy of the epoch that just finished
//! and returns the keep ratio for the next epoch.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::layers::KeepRatio;

pub const DEFAULT_R_MIN: f64 = 0.01;

/// Exponential moving average, seeded with the first observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmaTracker {
    factor: f64,
    value: Option<f64>,
}

impl EmaTracker {
    pub fn new(factor: f64) -> Result<Self> {
        if !(factor > 0.0 && factor < 1.0) {
            return Err(Error::Config(format!("EMA factor must lie in (0, 1), got {factor}")));
        }
        Ok(EmaTracker { factor, value: None })
    }

    pub fn factor(&self) -> f64 {
        self.factor
    }

    pub fn value(&self) -> Option<f64> {
        self.value
    }

    /// `s = factor·s_prev + (1 − factor)·x`, or `s = x` on the first call.
    pub fn observe(&mut self, x: f64) -> f64 {
        let s = match self.value {
            None => x,
            Some(prev) => self.factor * prev + (1.0 - self.factor) * x,
        };
        self.value = Some(s);
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Policy {
    Dense,
    /// Subtract `step` each epoch; reset when the smoothed accuracy drops by
    /// more than `drop_threshold` from one epoch to the next.
    Additive { step: f64, ema_factor: f64, drop_threshold: f64 },
    /// Multiply by `decay` each epoch; reset when the smoothed accuracy sits
    /// more than `gap_threshold` below its best value so far.
    Multiplicative { decay: f64, ema_factor: f64, gap_threshold: f64 },
}

impl Policy {
    pub const ADDITIVE: Policy = Policy::Additive { step: 0.01, ema_factor: 0.9, drop_threshold: 0.01 };
    pub const MULTIPLICATIVE: Policy = Policy::Multiplicative { decay: 0.98, ema_factor: 0.5, gap_threshold: 0.2 };

    pub fn kind(&self) -> StrategyKind {
        match self {
            Policy::Dense => StrategyKind::Dense,
            Policy::Additive { .. } => StrategyKind::Additive,
            Policy::Multiplicative { .. } => StrategyKind::Multiplicative,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrategyKind {
    Dense,
    Additive,
    Multiplicative,
}

impl StrategyKind {
    pub fn default_policy(self) -> Policy {
        match self {
            StrategyKind::Dense => Policy::Dense,
            StrategyKind::Additive => Policy::ADDITIVE,
            StrategyKind::Multiplicative => Policy::MULTIPLICATIVE,
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StrategyKind::Dense => "dense",
            StrategyKind::Additive => "additive",
            StrategyKind::Multiplicative => "multiplicative",
        })
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(StrategyKind::Dense),
            "additive" => Ok(StrategyKind::Additive),
            "multiplicative" => Ok(StrategyKind::Multiplicative),
            other => Err(Error::Config(format!("unknown strategy {other:?} (dense | additive | multiplicative)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    /// Keep ratio for the next epoch.
    pub r: f64,
    pub reset: bool,
    pub smoothed: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ControllerState {
    policy: Policy,
    r: f64,
    r_min: f64,
    ema: Option<EmaTracker>,
    previous_smoothed: Option<f64>,
    best_smoothed: Option<f64>,
    reset_count: usize,
}

impl ControllerState {
    pub fn new(policy: Policy, r_min: f64) -> Result<Self> {
        if !(r_min > 0.0 && r_min <= 1.0) {
            return Err(Error::Config(format!("r_min must lie in (0, 1], got {r_min}")));
        }
        let ema = match policy {
            Policy::Dense => None,
            Policy::Additive { step, ema_factor, drop_threshold } => {
                if !(step > 0.0 && drop_threshold >= 0.0) {
                    return Err(Error::Config("additive step must be positive and threshold non-negative".into()));
                }
                Some(EmaTracker::new(ema_factor)?)
            }
            Policy::Multiplicative { decay, ema_factor, gap_threshold } => {
                if !(decay > 0.0 && decay < 1.0 && gap_threshold >= 0.0) {
                    return Err(Error::Config("decay must lie in (0, 1) and threshold be non-negative".into()));
                }
                Some(EmaTracker::new(ema_factor)?)
            }
        };
        Ok(ControllerState {
            policy,
            r: 1.0,
            r_min,
            ema,
            previous_smoothed: None,
            best_smoothed: None,
            reset_count: 0,
        })
    }

    pub fn policy(&self) -> Policy {
        self.policy
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn r_min(&self) -> f64 {
        self.r_min
    }

    pub fn keep_ratio(&self) -> KeepRatio {
        KeepRatio::new(self.r).expect("controller keeps r within [r_min, 1]")
    }

    pub fn reset_count(&self) -> usize {
        self.reset_count
    }

    pub fn smoothed(&self) -> Option<f64> {
        self.ema.and_then(|e| e.value())
    }

    pub fn best_smoothed(&self) -> Option<f64> {
        self.best_smoothed
    }

    /// Feeds one epoch's training accuracy and returns the next keep ratio.
    pub fn step(&mut self, train_accuracy: f64) -> Result<StepOutcome> {
        if !(0.0..=1.0).contains(&train_accuracy) {
            return Err(Error::Input(format!("training accuracy must be a fraction in [0, 1], got {train_accuracy}")));
        }
        match self.policy {
            Policy::Dense => Ok(self.step_dense()),
            Policy::Additive { step, drop_threshold, .. } => Ok(self.step_additive(train_accuracy, step, drop_threshold)),
            Policy::Multiplicative { decay, gap_threshold, .. } => {
                Ok(self.step_multiplicative(train_accuracy, decay, gap_threshold))
            }
        }
    }

    fn step_dense(&mut self) -> StepOutcome {
        StepOutcome { r: 1.0, reset: false, smoothed: None }
    }

    fn step_additive(&mut self, acc: f64, step: f64, drop_threshold: f64) -> StepOutcome {
        let s = self.ema.as_mut().expect("adaptive policy has an EMA").observe(acc);
        let reset = matches!(self.previous_smoothed, Some(prev) if prev - s > drop_threshold);
        self.previous_smoothed = Some(s);
        self.best_smoothed = Some(self.best_smoothed.map_or(s, |b| b.max(s)));
        self.advance(reset, |r| r - step)
    }

    fn step_multiplicative(&mut self, acc: f64, decay: f64, gap_threshold: f64) -> StepOutcome {
        let s = self.ema.as_mut().expect("adaptive policy has an EMA").observe(acc);
        let best = self.best_smoothed.map_or(s, |b| b.max(s));
        self.best_smoothed = Some(best);
        self.previous_smoothed = Some(s);
        self.advance(best - s > gap_threshold, |r| r * decay)
    }

    fn advance(&mut self, reset: bool, compress: impl FnOnce(f64) -> f64) -> StepOutcome {
        if reset {
            self.r = 1.0;
            self.reset_count += 1;
        } else {
            self.r = compress(self.r).max(self.r_min);
        }
        StepOutcome { r: self.r, reset, smoothed: self.previous_smoothed }
    }
}
