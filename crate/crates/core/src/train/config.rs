use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Piecewise-constant learning-rate multipliers: `(epoch, multiplier)` pairs,
/// each applied from its epoch onward.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    milestones: Vec<(u64, f64)>,
}

impl Schedule {
    pub fn new(mut milestones: Vec<(u64, f64)>) -> Result<Self> {
        if milestones.iter().any(|&(_, m)| !(m.is_finite() && m >= 0.0)) {
            return Err(Error::invalid("schedule multipliers must be finite and non-negative"));
        }
        milestones.sort_by_key(|&(e, _)| e);
        Ok(Schedule { milestones })
    }

    pub fn constant() -> Self {
        Schedule { milestones: Vec::new() }
    }

    /// ×0.2 at epochs 60, 120, 160 and 200.
    pub fn cifar() -> Self {
        Schedule {
            milestones: vec![(60, 0.2), (120, 0.2), (160, 0.2), (200, 0.2)],
        }
    }

    /// ×0.1 at epochs 80 and 120.
    pub fn svhn() -> Self {
        Schedule {
            milestones: vec![(80, 0.1), (120, 0.1)],
        }
    }

    pub fn milestones(&self) -> &[(u64, f64)] {
        &self.milestones
    }

    pub fn multiplier(&self, epoch: u64) -> f64 {
        self.milestones
            .iter()
            .take_while(|&&(e, _)| e <= epoch)
            .map(|&(_, m)| m)
            .product()
    }
}

/// Accepts `cifar`, `svhn`, `constant`, or `epoch:multiplier` pairs separated
/// by commas (`60:0.2,120:0.2`).
impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "cifar" => Ok(Schedule::cifar()),
            "svhn" => Ok(Schedule::svhn()),
            "constant" | "" => Ok(Schedule::constant()),
            list => {
                let pairs = list
                    .split(',')
                    .map(|item| {
                        let (e, m) = item
                            .split_once(':')
                            .ok_or_else(|| Error::invalid(format!("schedule entry `{item}` is not epoch:multiplier")))?;
                        let e = e.trim().parse().map_err(|_| Error::invalid(format!("bad epoch `{e}`")))?;
                        let m = m.trim().parse().map_err(|_| Error::invalid(format!("bad multiplier `{m}`")))?;
                        Ok((e, m))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Schedule::new(pairs)
            }
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.milestones.is_empty() {
            return write!(f, "constant");
        }
        let parts: Vec<String> = self.milestones.iter().map(|(e, m)| format!("{e}:{m}")).collect();
        write!(f, "{}", parts.join(","))
    }
}

/// Arithmetic precision of the trainer. Only double precision is implemented.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "f64" | "double" => Ok(Precision::F64),
            "f32" | "single" => Err(Error::invalid("single precision is not supported; use f64")),
            other => Err(Error::invalid(format!("unknown precision `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub schedule: Schedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: u64,
    pub seed: u64,
    pub precision: Precision,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.1,
            schedule: Schedule::cifar(),
            momentum: 0.9,
            weight_decay: 5e-4,
            batch: 128,
            epochs: 200,
            seed: 0,
            precision: Precision::F64,
            augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(Error::invalid(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::invalid(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.batch == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        Ok(())
    }
}

/// `lr0` times every multiplier whose epoch is `≤ epoch` (epochs count from 0).
pub fn lr_at(cfg: &TrainConfig, epoch: u64) -> f64 {
    cfg.lr0 * cfg.schedule.multiplier(epoch)
}
