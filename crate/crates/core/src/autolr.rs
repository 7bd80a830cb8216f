//! Layer-wise learning-rate auto-tuning.
//!
//! Every epoch is fine-tuned as a sequence of trials. Each trial restarts
//! from the epoch-start checkpoint, trains one epoch with the current
//! per-block learning rates and measures the per-block weight variations.
//! If the variations are sorted well enough (sorting quality above `tau_s`)
//! the trial is committed; otherwise new target variations are derived and
//! the learning rates are rescaled towards them.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::optim::{clamp_lr, LrVector};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutoLrConfig {
    pub alpha: f64,
    pub beta: f64,
    pub tau_s: f64,
    pub max_trials_per_epoch: usize,
    pub d_floor: f64,
    /// Order the classifier head as block `K + 1` as well.
    pub include_head: bool,
    /// Base the first-epoch targets on `min v` instead of `alpha * min v`.
    pub literal_min_base: bool,
}

impl Default for AutoLrConfig {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 0.4,
            tau_s: 0.94,
            max_trials_per_epoch: 10,
            d_floor: 1e-12,
            include_head: false,
            literal_min_base: false,
        }
    }
}

impl AutoLrConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("alpha", self.alpha)?;
        positive("beta", self.beta)?;
        positive("d_floor", self.d_floor)?;
        if !(self.tau_s > 0.0 && self.tau_s <= 1.0) {
            return Err(Error::Config(format!(
                "tau_s must lie in (0, 1], got {}",
                self.tau_s
            )));
        }
        if self.max_trials_per_epoch == 0 {
            return Err(Error::Config(
                "max_trials_per_epoch must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Index (1-based) of the block that center-out renewal keeps fixed.
pub fn center_index(k: usize) -> usize {
    k.div_ceil(2)
}

/// Ascending rank (1-based) of every entry; ties go to the lower index first.
pub fn rank_ascending(v: &[f64]) -> Result<Vec<usize>> {
    if v.is_empty() {
        return Err(Error::InvalidInput("cannot rank an empty vector".into()));
    }
    if v.iter().any(|x| x.is_nan()) {
        return Err(Error::NonFinite("variation vector (NaN)".into()));
    }
    let mut order: Vec<usize> = (0..v.len()).collect();
    // stable sort keeps index order among equal values
    order.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
    let mut ranks = vec![0; v.len()];
    for (rank, idx) in order.into_iter().enumerate() {
        ranks[idx] = rank + 1;
    }
    Ok(ranks)
}

/// `1 - (2 / K^2) * sum_k |k - rank(v_k)|`.
pub fn sorting_quality(v: &[f64]) -> Result<f64> {
    let ranks = rank_ascending(v)?;
    let k = v.len() as f64;
    let displacement: usize = ranks
        .iter()
        .enumerate()
        .map(|(i, &r)| (i + 1).abs_diff(r))
        .sum();
    Ok(1.0 - 2.0 / (k * k) * displacement as f64)
}

/// Desired per-block variations for one epoch and their spacing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSchedule {
    pub targets: Vec<f64>,
    pub spacing: f64,
}

fn check_variations(v: &[f64]) -> Result<()> {
    if v.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least two blocks, got {}",
            v.len()
        )));
    }
    if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::InvalidInput(
            "variations must be finite and nonnegative".into(),
        ));
    }
    Ok(())
}

/// `d = max((beta * max v - alpha * min v) / (K - 1), d_floor)`.
pub fn target_spacing(v: &[f64], cfg: &AutoLrConfig) -> Result<f64> {
    check_variations(v)?;
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let d = (cfg.beta * max - cfg.alpha * min) / (v.len() - 1) as f64;
    Ok(d.max(cfg.d_floor))
}

/// Linear targets from `alpha * min v` up to `beta * max v`.
pub fn initial_targets(v: &[f64], cfg: &AutoLrConfig) -> Result<TargetSchedule> {
    check_variations(v)?;
    if v.iter().all(|&x| x == 0.0) {
        return Err(Error::Degenerate("all block variations are zero".into()));
    }
    let spacing = target_spacing(v, cfg)?;
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let base = if cfg.literal_min_base {
        min
    } else {
        cfg.alpha * min
    };
    let targets = (0..v.len()).map(|k| base + k as f64 * spacing).collect();
    Ok(TargetSchedule { targets, spacing })
}

/// Repairs the ordering of `v` outward from block `center` (1-based).
///
/// Blocks already in order keep their measured value; out-of-order blocks
/// are placed `spacing` above (upward pass) or below (downward pass) their
/// inner neighbour. The result is clamped below at zero.
pub fn center_out_targets(v: &[f64], spacing: f64, center: usize) -> Result<TargetSchedule> {
    check_variations(v)?;
    if spacing.is_nan() || spacing <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "spacing must be positive, got {spacing}"
        )));
    }
    let k = v.len();
    if center == 0 || center > k {
        return Err(Error::InvalidInput(format!(
            "center {center} outside 1..={k}"
        )));
    }
    let c = center - 1;
    let mut t = vec![0.0; k];
    t[c] = v[c];
    for i in c + 1..k {
        t[i] = if t[i - 1] <= v[i] {
            v[i]
        } else {
            t[i - 1] + spacing
        };
    }
    for i in (0..c).rev() {
        t[i] = if t[i + 1] >= v[i] {
            v[i]
        } else {
            t[i + 1] - spacing
        };
    }
    for x in &mut t {
        *x = x.max(0.0);
    }
    Ok(TargetSchedule {
        targets: t,
        spacing,
    })
}

/// `lr_k * target_k / v_k`, skipping blocks with `v_k = 0`, clamped.
pub fn renew_lr(lrs: &LrVector, v: &[f64], targets: &[f64]) -> Result<LrVector> {
    if lrs.len() != v.len() || v.len() != targets.len() {
        return Err(Error::Shape(format!(
            "lengths differ: {} lrs, {} variations, {} targets",
            lrs.len(),
            v.len(),
            targets.len()
        )));
    }
    let renewed = lrs
        .as_slice()
        .iter()
        .zip(v)
        .zip(targets)
        .map(|((&lr, &vk), &tk)| if vk == 0.0 { lr } else { lr * tk / vk })
        .map(clamp_lr)
        .collect();
    Ok(LrVector(renewed))
}

/// What the controller needs from a training loop.
pub trait TrialTrainer {
    type Checkpoint: Clone;

    fn checkpoint(&self) -> Self::Checkpoint;

    fn rollback(&mut self, checkpoint: &Self::Checkpoint) -> Result<()>;

    /// Trains one epoch with the given per-block learning rates and returns
    /// the variation of every ordered block.
    fn train_epoch(&mut self, lrs: &LrVector) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    /// 1-based epoch.
    pub epoch: usize,
    /// 1-based trial within the epoch.
    pub trial: usize,
    pub variations: Vec<f64>,
    /// Targets the learning rates of this trial were solved for; `None` until
    /// the first renewal of a run.
    pub targets: Option<Vec<f64>>,
    pub lrs: LrVector,
    pub quality: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub trials: Vec<TrialRecord>,
    /// Index into `trials` of the committed trial.
    pub committed: usize,
    /// False when the trial budget ran out and the best trial was committed.
    pub converged: bool,
}

impl EpochReport {
    pub fn committed_trial(&self) -> &TrialRecord {
        &self.trials[self.committed]
    }

    pub fn trial_count(&self) -> usize {
        self.trials.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub epochs: Vec<EpochReport>,
}

impl RunReport {
    pub fn accepted_fraction(&self) -> f64 {
        if self.epochs.is_empty() {
            return 0.0;
        }
        let n = self.epochs.iter().filter(|e| e.converged).count();
        n as f64 / self.epochs.len() as f64
    }

    pub fn trials(&self) -> impl Iterator<Item = &TrialRecord> {
        self.epochs.iter().flat_map(|e| &e.trials)
    }
}

/// Trial/rollback controller holding the current per-block learning rates.
#[derive(Debug, Clone)]
pub struct AutoLr {
    cfg: AutoLrConfig,
    lrs: LrVector,
    last_targets: Option<Vec<f64>>,
}

impl AutoLr {
    pub fn new(cfg: AutoLrConfig, initial: LrVector) -> Result<Self> {
        cfg.validate()?;
        if initial.is_empty() {
            return Err(Error::Config("need at least one ordered block".into()));
        }
        Ok(Self {
            cfg,
            lrs: initial.clamped(),
            last_targets: None,
        })
    }

    pub fn config(&self) -> &AutoLrConfig {
        &self.cfg
    }

    pub fn lrs(&self) -> &LrVector {
        &self.lrs
    }

    /// Epoch 1 solves every trial for the schedule bounded by the first
    /// trial's variations; later epochs repair the latest measurement.
    fn renew_targets(
        &self,
        v: &[f64],
        epoch: usize,
        first: &mut Option<TargetSchedule>,
    ) -> Result<TargetSchedule> {
        if epoch == 1 {
            if first.is_none() {
                *first = Some(initial_targets(v, &self.cfg)?);
            }
            Ok(first.clone().expect("set above"))
        } else {
            let spacing = target_spacing(v, &self.cfg)?;
            center_out_targets(v, spacing, center_index(v.len()))
        }
    }

    /// Runs trials for one epoch until one is accepted or the budget is spent.
    pub fn run_epoch<T: TrialTrainer>(
        &mut self,
        trainer: &mut T,
        epoch: usize,
    ) -> Result<EpochReport> {
        let start = trainer.checkpoint();
        let mut trials: Vec<TrialRecord> = Vec::new();
        let mut best: Option<(usize, T::Checkpoint)> = None;
        let mut first_schedule = None;

        for trial in 1..=self.cfg.max_trials_per_epoch {
            if trial > 1 {
                trainer.rollback(&start)?;
            }
            let v = trainer.train_epoch(&self.lrs)?;
            if v.len() != self.lrs.len() {
                return Err(Error::Shape(format!(
                    "trainer reported {} variations for {} learning rates",
                    v.len(),
                    self.lrs.len()
                )));
            }
            let quality = sorting_quality(&v)?;
            let accepted = quality > self.cfg.tau_s;
            trials.push(TrialRecord {
                epoch,
                trial,
                variations: v.clone(),
                targets: self.last_targets.clone(),
                lrs: self.lrs.clone(),
                quality,
                accepted,
            });
            if accepted {
                return Ok(EpochReport {
                    epoch,
                    committed: trials.len() - 1,
                    trials,
                    converged: true,
                });
            }

            let improved = best
                .as_ref()
                .is_none_or(|(i, _)| quality > trials[*i].quality);
            if improved {
                best = Some((trials.len() - 1, trainer.checkpoint()));
            }
            if trial == self.cfg.max_trials_per_epoch {
                break;
            }

            match self.renew_targets(&v, epoch, &mut first_schedule) {
                Ok(schedule) => {
                    self.lrs = renew_lr(&self.lrs, &v, &schedule.targets)?;
                    self.last_targets = Some(schedule.targets);
                }
                Err(Error::Degenerate(msg)) => {
                    warn!("epoch {epoch} trial {trial}: {msg}; keeping learning rates");
                }
                Err(e) => return Err(e),
            }
        }

        let (idx, checkpoint) = best.expect("at least one trial ran");
        trainer.rollback(&checkpoint)?;
        self.lrs = trials[idx].lrs.clone();
        self.last_targets = trials[idx].targets.clone();
        warn!(
            "epoch {epoch}: no trial exceeded tau_s = {} within {} trials; committing trial {} (quality {:.4})",
            self.cfg.tau_s,
            self.cfg.max_trials_per_epoch,
            idx + 1,
            trials[idx].quality
        );
        Ok(EpochReport {
            epoch,
            committed: idx,
            trials,
            converged: false,
        })
    }

    /// Fine-tunes `epochs` epochs.
    pub fn run<T: TrialTrainer>(&mut self, trainer: &mut T, epochs: usize) -> Result<RunReport> {
        let mut report = RunReport::default();
        for epoch in 1..=epochs {
            report.epochs.push(self.run_epoch(trainer, epoch)?);
        }
        Ok(report)
    }
}
