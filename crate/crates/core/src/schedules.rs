//! Single-LR baseline schedules as pure `epoch -> lr` functions.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Single,
    StepDecay,
    Cyclic,
    Sgdr,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 4] = [
        ScheduleKind::Single,
        ScheduleKind::StepDecay,
        ScheduleKind::Cyclic,
        ScheduleKind::Sgdr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Single => "single",
            ScheduleKind::StepDecay => "step_decay",
            ScheduleKind::Cyclic => "cyclic",
            ScheduleKind::Sgdr => "sgdr",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineScheduleConfig {
    pub kind: ScheduleKind,
    #[serde(default = "defaults::l_max")]
    pub l_max: f64,
    #[serde(default = "defaults::l_min")]
    pub l_min: f64,
    #[serde(default = "defaults::t_d")]
    pub t_d: usize,
    #[serde(default = "defaults::gamma")]
    pub gamma: f64,
    #[serde(default = "defaults::cycles")]
    pub cycles: usize,
    #[serde(default = "defaults::n_reset")]
    pub n_reset: usize,
    /// Total number of epochs `T`.
    pub epochs: usize,
}

mod defaults {
    pub fn l_max() -> f64 {
        0.01
    }
    pub fn l_min() -> f64 {
        0.001
    }
    pub fn t_d() -> usize {
        40
    }
    pub fn gamma() -> f64 {
        0.1
    }
    pub fn cycles() -> usize {
        5
    }
    pub fn n_reset() -> usize {
        8
    }
}

impl BaselineScheduleConfig {
    pub fn new(kind: ScheduleKind, epochs: usize) -> Self {
        Self {
            kind,
            l_max: defaults::l_max(),
            l_min: defaults::l_min(),
            t_d: defaults::t_d(),
            gamma: defaults::gamma(),
            cycles: defaults::cycles(),
            n_reset: defaults::n_reset(),
            epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.l_max > 0.0 && self.l_max.is_finite()) {
            return bad(format!("l_max must be positive, got {}", self.l_max));
        }
        if self.epochs == 0 {
            return bad("schedule needs at least one epoch".into());
        }
        match self.kind {
            ScheduleKind::Single => {}
            ScheduleKind::StepDecay => {
                if self.t_d == 0 {
                    return bad("step_decay needs t_d >= 1".into());
                }
                if !(self.gamma > 0.0 && self.gamma < 1.0) {
                    return bad(format!("gamma must lie in (0, 1), got {}", self.gamma));
                }
            }
            ScheduleKind::Cyclic | ScheduleKind::Sgdr => {
                if !(self.l_min > 0.0 && self.l_min <= self.l_max) {
                    return bad(format!(
                        "need 0 < l_min <= l_max, got l_min {} l_max {}",
                        self.l_min, self.l_max
                    ));
                }
                let (name, n) = if self.kind == ScheduleKind::Cyclic {
                    ("cycles", self.cycles)
                } else {
                    ("n_reset", self.n_reset)
                };
                if n == 0 || n > self.epochs {
                    return bad(format!("{name} must lie in 1..={}, got {n}", self.epochs));
                }
            }
        }
        Ok(())
    }

    /// Period length `T / n` of the cyclic or SGDR waveform, in epochs.
    pub fn period(&self) -> f64 {
        let n = match self.kind {
            ScheduleKind::Cyclic => self.cycles,
            ScheduleKind::Sgdr => self.n_reset,
            _ => 1,
        };
        self.epochs as f64 / n as f64
    }
}

/// Learning rate for 0-based epoch `e`.
///
/// Phases inside a period are computed as `(e * n mod T) / T` in integer
/// arithmetic, so period starts and cyclic midpoints land exactly.
pub fn lr_at(cfg: &BaselineScheduleConfig, epoch: usize) -> Result<f64> {
    cfg.validate()?;
    let total = cfg.epochs;
    if epoch >= total {
        return Err(Error::InvalidInput(format!(
            "epoch {epoch} outside schedule of {total} epochs"
        )));
    }
    let lr = match cfg.kind {
        ScheduleKind::Single => cfg.l_max,
        ScheduleKind::StepDecay => cfg.l_max * cfg.gamma.powi((epoch / cfg.t_d) as i32),
        ScheduleKind::Cyclic => {
            let r = (epoch * cfg.cycles) % total;
            // 1 at the period start, 0 at the midpoint
            let w = (2 * r).abs_diff(total) as f64 / total as f64;
            cfg.l_min * (1.0 - w) + cfg.l_max * w
        }
        ScheduleKind::Sgdr => {
            let r = (epoch * cfg.n_reset) % total;
            let frac = r as f64 / total as f64;
            cfg.l_max * (cfg.l_min / cfg.l_max).powf(frac)
        }
    };
    Ok(lr)
}
