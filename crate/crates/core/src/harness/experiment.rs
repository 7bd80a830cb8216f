//! Pretrain, prune and fine-tune pipelines and their on-disk outputs.

use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, LrPolicy, ScoreKind};
use super::data::{Dataset, Samples};
use super::svg::{emit_svg_lines, ChartOptions, Series};
use super::trace::{autolr_rows, write_trace_csv, TraceRow};
use super::trainer::{evaluate_accuracy, evaluate_recall, AutoLrTrainer, FineTuner};
use crate::autolr::{sorting_quality, AutoLr, AutoLrConfig, RunReport};
use crate::micronet::{build_network, transplant, NetSnapshot, Network, NetworkSpec};
use crate::optim::LrVector;
use crate::pruning::{run_pruning, PruneReport};
use crate::schedules::{lr_at, BaselineScheduleConfig, ScheduleKind};
use crate::{Error, Result};

/// Relative spread of the accumulated-gradient norm allowed across LR rescalings.
pub const ACC_GRAD_SPREAD_THRESHOLD: f64 = 0.25;
/// LR rescaling factors used for the accumulated-gradient spread measurement.
pub const ACC_GRAD_FACTORS: [f64; 5] = [0.5, 0.75, 1.0, 1.5, 2.0];

#[derive(Debug, Clone)]
pub struct Tasks {
    pub source: Dataset,
    pub target: Dataset,
}

impl Tasks {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let source = cfg.dataset.source.load()?;
        let target = cfg.dataset.target.load()?;
        for (name, d) in [("source", &source), ("target", &target)] {
            if d.dim() != cfg.network.input_dim {
                return Err(Error::Config(format!(
                    "{name} data has {} features, network.input_dim is {}",
                    d.dim(),
                    cfg.network.input_dim
                )));
            }
            if d.test.len() < 2 {
                return Err(Error::Config(format!(
                    "{name} test split needs >= 2 samples"
                )));
            }
        }
        if target.num_classes() != cfg.network.head.num_classes {
            return Err(Error::Config(format!(
                "target task has {} classes, network.head.num_classes is {}",
                target.num_classes(),
                cfg.network.head.num_classes
            )));
        }
        Ok(Self { source, target })
    }
}

/// Fine-tuning architecture: `network` with the run seed applied.
pub fn target_spec(cfg: &ExperimentConfig) -> NetworkSpec {
    NetworkSpec {
        seed: cfg.run.seed,
        ..cfg.network.clone()
    }
}

fn source_spec(cfg: &ExperimentConfig, tasks: &Tasks) -> NetworkSpec {
    let mut spec = target_spec(cfg);
    spec.head.num_classes = tasks.source.num_classes();
    spec
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub epochs: usize,
    pub final_loss: f64,
    pub source_test_accuracy: f64,
    pub snapshot_hash: String,
}

/// Trains the full network on the source task with a single LR.
pub fn pretrain(cfg: &ExperimentConfig, tasks: &Tasks) -> Result<(NetSnapshot, PretrainSummary)> {
    let net = build_network(&source_spec(cfg, tasks))?;
    let mut tuner = FineTuner::new(
        net,
        cfg.optimizer.clone(),
        &tasks.source.train,
        cfg.run.batch_size,
    )?;
    let mut final_loss = f64::NAN;
    for _ in 0..cfg.run.pretrain_epochs {
        final_loss = tuner.train_epoch_uniform(cfg.run.pretrain_lr)?.mean_loss;
    }
    let net = tuner.into_network();
    let acc = evaluate_accuracy(&net, &tasks.source.test)?;
    let snap = net.snapshot();
    info!(
        "pretrained {} epochs; source test accuracy {acc:.4}",
        cfg.run.pretrain_epochs
    );
    Ok((
        snap.clone(),
        PretrainSummary {
            epochs: cfg.run.pretrain_epochs,
            final_loss,
            source_test_accuracy: acc,
            snapshot_hash: snap.content_hash(),
        },
    ))
}

fn score(kind: ScoreKind, net: &Network, data: &Samples) -> Result<f64> {
    match kind {
        ScoreKind::Accuracy => evaluate_accuracy(net, data),
        ScoreKind::RecallAt1 => evaluate_recall(net, data, 1),
    }
}

/// Selects the depth by pruning top blocks of the pretrained backbone.
pub fn prune(
    cfg: &ExperimentConfig,
    tasks: &Tasks,
    pretrained: &NetSnapshot,
) -> Result<PruneReport> {
    let pcfg = cfg.pruning.clone().unwrap_or_default();
    let lr = pcfg.lr.unwrap_or(cfg.run.initial_lr);
    let mut report = run_pruning(
        pretrained,
        &target_spec(cfg),
        pcfg.epochs_per_attempt,
        |net, epochs| {
            let mut tuner = FineTuner::new(
                net.clone(),
                cfg.optimizer.clone(),
                &tasks.target.train,
                cfg.run.batch_size,
            )?;
            for _ in 0..epochs {
                tuner.train_epoch_uniform(lr)?;
            }
            *net = tuner.into_network();
            Ok(())
        },
        |net| score(pcfg.score, net, &tasks.target.test),
    )?;
    if cfg.run.deterministic {
        for a in &mut report.attempts {
            a.wall_time_s = 0.0;
        }
    }
    Ok(report)
}

/// Network the fine-tuning stage starts from: pretrained backbone, top
/// `blocks_removed` blocks dropped, fresh head for the target task.
pub fn finetune_start(
    cfg: &ExperimentConfig,
    pretrained: &NetSnapshot,
    blocks_removed: usize,
) -> Result<Network> {
    let spec = target_spec(cfg).without_top_blocks(blocks_removed)?;
    transplant(&spec, pretrained)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccGradSpread {
    pub factors: Vec<f64>,
    /// `norms[f][k]`: accumulated-gradient norm of block `k` under factor `f`.
    pub norms: Vec<Vec<f64>>,
    /// `(max - min) / mean` per block.
    pub spread: Vec<f64>,
    pub max_spread: f64,
    pub threshold: f64,
    pub within_threshold: bool,
}

/// Trains one epoch from the same start and batch order under rescaled LRs
/// and reports how much the accumulated-gradient norm moves.
pub fn measure_acc_grad_spread(
    trainer: &mut AutoLrTrainer<'_>,
    lrs: &LrVector,
    factors: &[f64],
) -> Result<AccGradSpread> {
    use crate::autolr::TrialTrainer;
    let start = trainer.checkpoint();
    let mut norms = Vec::with_capacity(factors.len());
    for &f in factors {
        trainer.rollback(&start)?;
        let scaled = LrVector(lrs.0.iter().map(|l| l * f).collect());
        trainer.train_epoch(&scaled)?;
        let stats = trainer.last_stats().expect("epoch just ran");
        norms.push(stats.delta.acc_grad_norms()[..trainer.ordered_blocks()].to_vec());
    }
    trainer.rollback(&start)?;
    let blocks = norms[0].len();
    let spread: Vec<f64> = (0..blocks)
        .map(|k| {
            let col: Vec<f64> = norms.iter().map(|n| n[k]).collect();
            let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let min = col.iter().copied().fold(f64::INFINITY, f64::min);
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            if mean > 0.0 {
                (max - min) / mean
            } else {
                0.0
            }
        })
        .collect();
    let max_spread = spread.iter().copied().fold(0.0, f64::max);
    Ok(AccGradSpread {
        factors: factors.to_vec(),
        norms,
        spread,
        max_spread,
        threshold: ACC_GRAD_SPREAD_THRESHOLD,
        within_threshold: max_spread < ACC_GRAD_SPREAD_THRESHOLD,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub trials: usize,
    pub converged: bool,
    pub quality: f64,
    pub train_loss: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneOutcome {
    pub policy: String,
    pub blocks_removed: usize,
    pub depth: usize,
    pub start_hash: String,
    pub epochs: Vec<EpochSummary>,
    pub final_test_accuracy: f64,
    pub final_recall_at_1: f64,
    pub final_lrs: Vec<f64>,
    #[serde(skip)]
    pub rows: Vec<TraceRow>,
    #[serde(skip)]
    pub run: Option<RunReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc_grad_spread: Option<AccGradSpread>,
    /// Whether `||dw|| = lr * ||acc||` is exact for the optimizer settings.
    pub variation_identity_exact: bool,
}

impl FinetuneOutcome {
    pub fn accepted_fraction(&self) -> f64 {
        let n = self.epochs.iter().filter(|e| e.converged).count();
        n as f64 / self.epochs.len().max(1) as f64
    }

    /// Median trials per epoch over epochs after `skip`.
    pub fn median_trials_after(&self, skip: usize) -> Option<f64> {
        let mut t: Vec<usize> = self.epochs.iter().skip(skip).map(|e| e.trials).collect();
        if t.is_empty() {
            return None;
        }
        t.sort_unstable();
        let m = t.len() / 2;
        Some(if t.len() % 2 == 1 {
            t[m] as f64
        } else {
            (t[m - 1] + t[m]) as f64 / 2.0
        })
    }
}

/// Fine-tunes `start` on the target task under `policy`.
pub fn finetune(
    cfg: &ExperimentConfig,
    tasks: &Tasks,
    start: Network,
    blocks_removed: usize,
    policy: &LrPolicy,
) -> Result<FinetuneOutcome> {
    let start_hash = start.snapshot().backbone_hash(start.depth());
    let depth = start.depth();
    let tuner = FineTuner::new(
        start,
        cfg.optimizer.clone(),
        &tasks.target.train,
        cfg.run.batch_size,
    )?;
    let epochs = cfg.run.epochs;
    let test = &tasks.target.test;
    let mut summaries = Vec::with_capacity(epochs);

    let (net, rows, run, spread, final_lrs) = match policy {
        LrPolicy::AutoLr(acfg) => {
            let mut trainer = AutoLrTrainer::new(tuner, acfg.include_head, cfg.run.initial_lr);
            let initial = LrVector::uniform(cfg.run.initial_lr, trainer.ordered_blocks());
            let spread = if epochs > 0 && trainer.ordered_blocks() > 0 {
                let s = measure_acc_grad_spread(&mut trainer, &initial, &ACC_GRAD_FACTORS)?;
                if !s.within_threshold {
                    warn!(
                        "accumulated-gradient norm spread {:.3} exceeds {:.2} across LR rescalings",
                        s.max_spread, s.threshold
                    );
                }
                Some(s)
            } else {
                None
            };
            let mut ctl = AutoLr::new(acfg.clone(), initial)?;
            let mut report = RunReport::default();
            for epoch in 1..=epochs {
                let er = ctl.run_epoch(&mut trainer, epoch)?;
                let committed = er.committed_trial();
                // the committed trial's loss is only known when it was the last one run
                let loss = trainer.last_stats().map_or(f64::NAN, |s| s.mean_loss);
                summaries.push(EpochSummary {
                    epoch,
                    trials: er.trial_count(),
                    converged: er.converged,
                    quality: committed.quality,
                    train_loss: if er.converged { loss } else { f64::NAN },
                    test_accuracy: evaluate_accuracy(trainer.tuner.network(), test)?,
                });
                report.epochs.push(er);
            }
            let rows = autolr_rows(&report);
            let lrs = trainer.layer_lrs(ctl.lrs());
            (
                trainer.tuner.into_network(),
                rows,
                Some(report),
                spread,
                lrs,
            )
        }
        LrPolicy::Baseline(scfg) => {
            let scfg = BaselineScheduleConfig {
                epochs,
                ..scfg.clone()
            };
            let tau = AutoLrConfig::default().tau_s;
            let mut tuner = tuner;
            let mut rows = Vec::new();
            let mut lr = scfg.l_max;
            for e in 0..epochs {
                lr = lr_at(&scfg, e)?;
                let stats = tuner.train_epoch_uniform(lr)?;
                let v = stats.delta.variations();
                let backbone = &v[..depth];
                let q = sorting_quality(backbone)?;
                for (k, &vk) in backbone.iter().enumerate() {
                    rows.push(TraceRow {
                        epoch: e + 1,
                        trial: 0,
                        block: k + 1,
                        v: vk,
                        v_bar: None,
                        lr,
                        quality: q,
                        accepted: q > tau,
                    });
                }
                summaries.push(EpochSummary {
                    epoch: e + 1,
                    trials: 0,
                    converged: q > tau,
                    quality: q,
                    train_loss: stats.mean_loss,
                    test_accuracy: evaluate_accuracy(tuner.network(), test)?,
                });
            }
            let n = tuner.network().layers().len();
            (tuner.into_network(), rows, None, None, vec![lr; n])
        }
    };

    Ok(FinetuneOutcome {
        policy: policy.name().to_string(),
        blocks_removed,
        depth,
        start_hash,
        epochs: summaries,
        final_test_accuracy: evaluate_accuracy(&net, test)?,
        final_recall_at_1: evaluate_recall(&net, test, 1)?,
        final_lrs,
        rows,
        run,
        acc_grad_spread: spread,
        variation_identity_exact: cfg.optimizer.variation_identity_exact(),
    })
}

/// Per-block committed variation over epochs and per-block LR over trials.
pub fn write_charts(rows: &[TraceRow], out_dir: &Path, prefix: &str) -> Result<()> {
    if rows.is_empty() {
        return Ok(());
    }
    let blocks = rows.iter().map(|r| r.block).max().unwrap_or(0);
    // last trial of every epoch is the one left in the network unless the budget ran out
    let mut last_trial = std::collections::BTreeMap::new();
    for r in rows {
        let e = last_trial.entry(r.epoch).or_insert(r.trial);
        *e = (*e).max(r.trial);
    }
    let mut trial_seq = std::collections::BTreeMap::new();
    for r in rows {
        let n = trial_seq.len();
        trial_seq.entry((r.epoch, r.trial)).or_insert(n);
    }
    let mut var_series = Vec::new();
    let mut lr_series = Vec::new();
    for k in 1..=blocks {
        let name = format!("block {k}");
        let block_rows = rows.iter().filter(|r| r.block == k);
        var_series.push(Series::new(
            name.clone(),
            block_rows
                .clone()
                .filter(|r| r.trial == last_trial[&r.epoch])
                .map(|r| (r.epoch as f64, r.v))
                .collect(),
        ));
        lr_series.push(Series::new(
            name,
            block_rows
                .map(|r| (trial_seq[&(r.epoch, r.trial)] as f64 + 1.0, r.lr))
                .collect(),
        ));
    }
    emit_svg_lines(
        &var_series,
        out_dir.join(format!("{prefix}variation.svg")),
        &ChartOptions {
            title: "Per-block weight variation".into(),
            x_label: "epoch".into(),
            y_label: "v (log)".into(),
            log_y: true,
        },
    )?;
    emit_svg_lines(
        &lr_series,
        out_dir.join(format!("{prefix}lr.svg")),
        &ChartOptions {
            title: "Per-block learning rate".into(),
            x_label: "trial (cumulative)".into(),
            y_label: "lr (log)".into(),
            log_y: true,
        },
    )
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub seed: u64,
    pub deterministic: bool,
    pub pretrain: PretrainSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pruning: Option<PruneReport>,
    pub finetune: FinetuneOutcome,
    pub accepted_fraction: f64,
    pub median_trials_after_epoch_5: Option<f64>,
    pub warnings: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
}

/// Pretrains and writes `pretrained.alrs` plus `pretrain.json`.
pub fn run_pretrain(cfg: &ExperimentConfig, out_dir: &Path) -> Result<PretrainSummary> {
    ensure_dir(out_dir)?;
    let tasks = Tasks::load(cfg)?;
    let (snap, summary) = pretrain(cfg, &tasks)?;
    snap.write_to(out_dir.join("pretrained.alrs"))?;
    write_json(&summary, &out_dir.join("pretrain.json"))?;
    Ok(summary)
}

/// Pretrains, runs depth selection and writes `prune.csv` / `prune.json`.
pub fn run_prune(cfg: &ExperimentConfig, out_dir: &Path) -> Result<PruneReport> {
    ensure_dir(out_dir)?;
    let tasks = Tasks::load(cfg)?;
    let (snap, _) = pretrain(cfg, &tasks)?;
    let report = prune(cfg, &tasks, &snap)?;
    write_prune_files(&report, out_dir)?;
    Ok(report)
}

fn write_prune_files(report: &PruneReport, out_dir: &Path) -> Result<()> {
    let csv = out_dir.join("prune.csv");
    std::fs::write(&csv, report.to_csv()).map_err(|e| Error::io(&csv, e))?;
    write_json(report, &out_dir.join("prune.json"))
}

/// Full pipeline: pretrain, optional pruning, fine-tune under the configured policy.
///
/// Writes `trace.csv`, `summary.json`, `variation.svg` and `lr.svg` (plus the
/// pruning files when pruning is enabled).
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentSummary> {
    cfg.validate()?;
    let started = Instant::now();
    ensure_dir(out_dir)?;
    let policy = cfg.policy()?;
    let tasks = Tasks::load(cfg)?;
    let (snap, pre) = pretrain(cfg, &tasks)?;
    snap.write_to(out_dir.join("pretrained.alrs"))?;

    let pruning = match &cfg.pruning {
        Some(p) if p.enabled => {
            let report = prune(cfg, &tasks, &snap)?;
            write_prune_files(&report, out_dir)?;
            Some(report)
        }
        _ => None,
    };
    let removed = pruning.as_ref().map_or(0, |p| p.selected_blocks_removed);
    let start = finetune_start(cfg, &snap, removed)?;
    let outcome = finetune(cfg, &tasks, start, removed, &policy)?;

    write_trace_csv(&outcome.rows, out_dir.join("trace.csv"))?;
    write_charts(&outcome.rows, out_dir, "")?;

    let mut warnings = Vec::new();
    if let Some(s) = &outcome.acc_grad_spread {
        if !s.within_threshold {
            warnings.push(format!(
                "accumulated-gradient norm spread {:.4} exceeds {}",
                s.max_spread, s.threshold
            ));
        }
    }
    for e in outcome
        .epochs
        .iter()
        .filter(|e| !e.converged && matches!(policy, LrPolicy::AutoLr(_)))
    {
        warnings.push(format!(
            "epoch {} did not converge within the trial budget",
            e.epoch
        ));
    }
    if !outcome.variation_identity_exact {
        warnings.push("optimizer settings make the variation/LR relation approximate".into());
    }

    let summary = ExperimentSummary {
        seed: cfg.run.seed,
        deterministic: cfg.run.deterministic,
        pretrain: pre,
        pruning,
        accepted_fraction: outcome.accepted_fraction(),
        median_trials_after_epoch_5: outcome.median_trials_after(5),
        finetune: outcome,
        warnings,
        wall_time_s: (!cfg.run.deterministic).then(|| started.elapsed().as_secs_f64()),
    };
    write_json(&summary, &out_dir.join("summary.json"))?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub policy: String,
    pub final_test_accuracy: f64,
    pub final_recall_at_1: f64,
    pub best_test_accuracy: f64,
    pub start_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSummary {
    pub seed: u64,
    pub blocks_removed: usize,
    pub start_hash: String,
    pub rows: Vec<ComparisonRow>,
}

/// Runs every baseline schedule and AutoLR from the same pruned start.
///
/// Baseline hyper-parameters come from `schedule` (its `kind` is ignored)
/// and AutoLR settings from `autolr`; missing sections use defaults.
pub fn compare_schedulers(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ComparisonSummary> {
    ensure_dir(out_dir)?;
    let tasks = Tasks::load(cfg)?;
    let (snap, _) = pretrain(cfg, &tasks)?;
    let removed = match &cfg.pruning {
        Some(p) if p.enabled => {
            let report = prune(cfg, &tasks, &snap)?;
            write_prune_files(&report, out_dir)?;
            report.selected_blocks_removed
        }
        _ => 0,
    };
    let start = finetune_start(cfg, &snap, removed)?;
    let start_hash = start.snapshot().content_hash();

    let base = cfg
        .schedule
        .clone()
        .unwrap_or_else(|| BaselineScheduleConfig::new(ScheduleKind::Single, cfg.run.epochs));
    let mut policies: Vec<LrPolicy> = ScheduleKind::ALL
        .iter()
        .map(|&kind| {
            LrPolicy::Baseline(BaselineScheduleConfig {
                kind,
                ..base.clone()
            })
        })
        .collect();
    policies.push(LrPolicy::AutoLr(cfg.autolr.clone().unwrap_or_default()));

    let mut rows = Vec::new();
    let mut csv = String::from("policy,final_test_accuracy,final_recall_at_1,best_test_accuracy\n");
    for policy in &policies {
        let net = start.clone();
        let hash = net.snapshot().content_hash();
        if hash != start_hash {
            return Err(Error::InvalidInput(format!(
                "{} would start from a different snapshot",
                policy.name()
            )));
        }
        let outcome = finetune(cfg, &tasks, net, removed, policy)?;
        write_trace_csv(
            &outcome.rows,
            out_dir.join(format!("trace_{}.csv", policy.name())),
        )?;
        write_charts(&outcome.rows, out_dir, &format!("{}_", policy.name()))?;
        let best = outcome
            .epochs
            .iter()
            .map(|e| e.test_accuracy)
            .fold(f64::NEG_INFINITY, f64::max);
        csv.push_str(&format!(
            "{},{},{},{}\n",
            policy.name(),
            outcome.final_test_accuracy,
            outcome.final_recall_at_1,
            best
        ));
        rows.push(ComparisonRow {
            policy: policy.name().into(),
            final_test_accuracy: outcome.final_test_accuracy,
            final_recall_at_1: outcome.final_recall_at_1,
            best_test_accuracy: best,
            start_hash: hash,
        });
    }
    let path = out_dir.join("compare.csv");
    std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    let summary = ComparisonSummary {
        seed: cfg.run.seed,
        blocks_removed: removed,
        start_hash,
        rows,
    };
    write_json(&summary, &out_dir.join("compare.json"))?;
    Ok(summary)
}
