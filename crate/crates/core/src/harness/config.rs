use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::data::{gen_synthetic, load_csv, Dataset, Provenance, SyntheticSpec};
use crate::autolr::AutoLrConfig;
use crate::micronet::{Activation, BlockSpec, HeadSpec, NetworkSpec};
use crate::optim::OptimizerConfig;
use crate::schedules::BaselineScheduleConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Accuracy,
    RecallAt1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruningConfig {
    pub enabled: bool,
    pub epochs_per_attempt: usize,
    pub score: ScoreKind,
    /// Single learning rate for the pruning fine-tunes; defaults to `run.initial_lr`.
    pub lr: Option<f64>,
}

impl Default for PruningConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            epochs_per_attempt: 30,
            score: ScoreKind::Accuracy,
            lr: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Csv { train: PathBuf, test: PathBuf },
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Synthetic(spec) => gen_synthetic(spec),
            DataSource::Csv { train, test } => {
                let train_set = load_csv(train)?;
                let test_set = load_csv(test)?;
                if train_set.dim() != test_set.dim() {
                    return Err(Error::Config(format!(
                        "train has {} features, test has {}",
                        train_set.dim(),
                        test_set.dim()
                    )));
                }
                if test_set.num_classes > train_set.num_classes {
                    return Err(Error::Config(
                        "test split has classes missing from train".into(),
                    ));
                }
                let num_classes = train_set.num_classes;
                Ok(Dataset {
                    train: train_set,
                    test: super::data::Samples {
                        num_classes,
                        ..test_set
                    },
                    provenance: Provenance::Csv {
                        train: train.clone(),
                        test: test.clone(),
                    },
                })
            }
        }
    }

    fn paths(&self) -> Vec<&Path> {
        match self {
            DataSource::Synthetic(_) => Vec::new(),
            DataSource::Csv { train, test } => vec![train.as_path(), test.as_path()],
        }
    }
}

/// Source task for pretraining and target task for fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DataSource,
    pub target: DataSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Fine-tuning epochs `T`.
    pub epochs: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub initial_lr: f64,
    pub batch_size: usize,
    /// Seeds network initialisation and batch order.
    pub seed: u64,
    pub deterministic: bool,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            pretrain_epochs: 20,
            pretrain_lr: 0.05,
            initial_lr: 1e-3,
            batch_size: 40,
            seed: 1,
            deterministic: false,
            out_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// `seed` is replaced by `run.seed`; `head.num_classes` must match the target task.
    pub network: NetworkSpec,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub autolr: Option<AutoLrConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<BaselineScheduleConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pruning: Option<PruningConfig>,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub run: RunConfig,
}

/// Which LR policy drives fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub enum LrPolicy {
    AutoLr(AutoLrConfig),
    Baseline(BaselineScheduleConfig),
}

impl LrPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            LrPolicy::AutoLr(_) => "autolr",
            LrPolicy::Baseline(s) => s.kind.name(),
        }
    }
}

impl ExperimentConfig {
    /// Desk-scale source-to-target transfer task with AutoLR fine-tuning.
    ///
    /// The backbone tapers so that the first-epoch variations span more than
    /// `alpha / beta`; with equal-width blocks the initial target spacing
    /// collapses to `d_floor`.
    pub fn reference() -> Self {
        let block = |output_dim| BlockSpec {
            output_dim,
            activation: Activation::Tanh,
        };
        let task = |seed| {
            DataSource::Synthetic(SyntheticSpec {
                seed,
                classes: 8,
                dim: 16,
                per_class: 100,
                separation: 4.0,
            })
        };
        Self {
            network: NetworkSpec {
                input_dim: 16,
                blocks: vec![block(64), block(32), block(16), block(8)],
                head: HeadSpec { num_classes: 8 },
                seed: 0,
            },
            optimizer: OptimizerConfig::default(),
            autolr: Some(AutoLrConfig::default()),
            schedule: None,
            pruning: None,
            dataset: DatasetConfig {
                source: task(1001),
                target: task(2002),
            },
            run: RunConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.optimizer.validate()?;
        self.policy()?;
        if let Some(a) = &self.autolr {
            a.validate()?;
        }
        if let Some(s) = &self.schedule {
            s.validate()?;
        }
        if let Some(p) = &self.pruning {
            if p.epochs_per_attempt == 0 {
                return Err(Error::Config(
                    "pruning.epochs_per_attempt must be >= 1".into(),
                ));
            }
        }
        let r = &self.run;
        if r.batch_size == 0 {
            return Err(Error::Config("run.batch_size must be >= 1".into()));
        }
        for (name, lr) in [("pretrain_lr", r.pretrain_lr), ("initial_lr", r.initial_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("run.{name} must be positive")));
            }
        }
        for src in [&self.dataset.source, &self.dataset.target] {
            for p in src.paths() {
                if !p.exists() {
                    return Err(Error::Config(format!(
                        "dataset file {} does not exist",
                        p.display()
                    )));
                }
            }
        }
        Ok(())
    }

    /// The single selected LR policy.
    pub fn policy(&self) -> Result<LrPolicy> {
        match (&self.autolr, &self.schedule) {
            (Some(a), None) => Ok(LrPolicy::AutoLr(a.clone())),
            (None, Some(s)) => Ok(LrPolicy::Baseline(s.clone())),
            (Some(_), Some(_)) => Err(Error::Config(
                "select exactly one LR policy: both `autolr` and `schedule` are set".into(),
            )),
            (None, None) => Err(Error::Config(
                "select exactly one LR policy: set `autolr` or `schedule`".into(),
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_roundtrips_through_json() {
        let cfg = ExperimentConfig::reference();
        let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn both_policies_rejected() {
        let mut cfg = ExperimentConfig::reference();
        cfg.schedule = Some(BaselineScheduleConfig::new(
            crate::schedules::ScheduleKind::Cyclic,
            30,
        ));
        let err = ExperimentConfig::from_json(&cfg.to_json()).unwrap_err();
        assert!(err.to_string().contains("exactly one"));
        cfg.autolr = None;
        cfg.schedule = None;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn missing_csv_rejected() {
        let mut cfg = ExperimentConfig::reference();
        cfg.dataset.target = DataSource::Csv {
            train: "/nonexistent/train.csv".into(),
            test: "/nonexistent/test.csv".into(),
        };
        assert!(cfg
            .validate()
            .unwrap_err()
            .to_string()
            .contains("does not exist"));
    }

    #[test]
    fn minimal_json_uses_defaults() {
        let text = r#"{
            "network": {"input_dim": 4, "blocks": [{"output_dim": 3, "activation": "tanh"}], "head": {"num_classes": 2}},
            "autolr": {},
            "dataset": {
                "source": {"kind": "synthetic", "seed": 1, "classes": 2, "dim": 4, "per_class": 10, "separation": 2.0},
                "target": {"kind": "synthetic", "seed": 2, "classes": 2, "dim": 4, "per_class": 10, "separation": 2.0}
            }
        }"#;
        let cfg = ExperimentConfig::from_json(text).unwrap();
        assert_eq!(cfg.autolr.unwrap(), AutoLrConfig::default());
        assert_eq!(cfg.run.batch_size, 40);
        assert_eq!(cfg.run.initial_lr, 1e-3);
        assert_eq!(cfg.optimizer.momentum, 0.9);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v: serde_json::Value =
            serde_json::from_str(&ExperimentConfig::reference().to_json()).unwrap();
        v["bogus"] = serde_json::json!(1);
        assert!(ExperimentConfig::from_json(&v.to_string()).is_err());
    }
}
