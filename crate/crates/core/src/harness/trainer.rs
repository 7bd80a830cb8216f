use rand::seq::SliceRandom;

use super::data::Samples;
use super::metrics::{accuracy, recall_at_k};
use crate::autolr::TrialTrainer;
use crate::micronet::{NetSnapshot, Network};
use crate::optim::{EpochDelta, LrVector, MomentumSgd, OptimizerConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub delta: EpochDelta,
    pub mean_loss: f64,
}

/// Mini-batch training loop over one dataset split.
///
/// Batch order is reshuffled every epoch from the network's own RNG, so
/// restoring a snapshot also replays the same batch order.
#[derive(Debug, Clone)]
pub struct FineTuner<'a> {
    net: Network,
    opt: MomentumSgd,
    data: &'a Samples,
    batch_size: usize,
}

impl<'a> FineTuner<'a> {
    pub fn new(
        net: Network,
        opt: OptimizerConfig,
        data: &'a Samples,
        batch_size: usize,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if data.is_empty() {
            return Err(Error::InvalidInput("training split is empty".into()));
        }
        if data.dim() != net.spec().input_dim {
            return Err(Error::Shape(format!(
                "data has {} features, network expects {}",
                data.dim(),
                net.spec().input_dim
            )));
        }
        if data.num_classes > net.head().output_dim {
            return Err(Error::Shape(format!(
                "data has {} classes, head has {} outputs",
                data.num_classes,
                net.head().output_dim
            )));
        }
        Ok(Self {
            net,
            opt: MomentumSgd::new(opt)?,
            data,
            batch_size,
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    pub fn into_network(self) -> Network {
        self.net
    }

    pub fn optimizer_config(&self) -> &OptimizerConfig {
        self.opt.config()
    }

    /// One pass over the split with the given per-layer learning rates (head last).
    pub fn train_epoch_with(&mut self, layer_lrs: &[f64]) -> Result<EpochStats> {
        self.net.set_lrs(layer_lrs)?;
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(self.net.rng_mut());
        self.opt.begin_epoch(&mut self.net);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(self.batch_size) {
            let x = self.data.features.select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| self.data.labels[i]).collect();
            let (loss, grads) = self.net.loss_and_gradients(&x, &y)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss in batch {batches}"
                )));
            }
            self.opt.step(&mut self.net, &grads)?;
            loss_sum += loss;
            batches += 1;
        }
        let delta = self.opt.end_epoch(&self.net)?;
        Ok(EpochStats {
            delta,
            mean_loss: loss_sum / batches as f64,
        })
    }

    pub fn train_epoch_uniform(&mut self, lr: f64) -> Result<EpochStats> {
        let lrs = vec![lr; self.net.layers().len()];
        self.train_epoch_with(&lrs)
    }
}

pub fn evaluate_accuracy(net: &Network, data: &Samples) -> Result<f64> {
    accuracy(&net.predict(&data.features)?, &data.labels)
}

/// Recall@k on the output of the top backbone block.
pub fn evaluate_recall(net: &Network, data: &Samples, k: usize) -> Result<f64> {
    let cache = net.forward(&data.features)?;
    recall_at_k(cache.embeddings(), &data.labels, k)
}

/// Adapts a [`FineTuner`] to the AutoLR controller.
///
/// The controller tunes the first `ordered` layers; remaining layers (the
/// head, unless it is ordered too) train at `fixed_lr`.
#[derive(Debug)]
pub struct AutoLrTrainer<'a> {
    pub tuner: FineTuner<'a>,
    ordered: usize,
    fixed_lr: f64,
    last: Option<EpochStats>,
}

impl<'a> AutoLrTrainer<'a> {
    pub fn new(tuner: FineTuner<'a>, include_head: bool, fixed_lr: f64) -> Self {
        let layers = tuner.network().layers().len();
        let ordered = if include_head { layers } else { layers - 1 };
        Self {
            tuner,
            ordered,
            fixed_lr,
            last: None,
        }
    }

    pub fn ordered_blocks(&self) -> usize {
        self.ordered
    }

    /// Stats of the most recent trial epoch.
    pub fn last_stats(&self) -> Option<&EpochStats> {
        self.last.as_ref()
    }

    pub fn layer_lrs(&self, lrs: &LrVector) -> Vec<f64> {
        let total = self.tuner.network().layers().len();
        let mut out = lrs.0.clone();
        out.resize(total, self.fixed_lr);
        out
    }
}

impl TrialTrainer for AutoLrTrainer<'_> {
    type Checkpoint = NetSnapshot;

    fn checkpoint(&self) -> NetSnapshot {
        self.tuner.network().snapshot()
    }

    fn rollback(&mut self, checkpoint: &NetSnapshot) -> Result<()> {
        self.tuner.network_mut().restore(checkpoint)
    }

    fn train_epoch(&mut self, lrs: &LrVector) -> Result<Vec<f64>> {
        if lrs.len() != self.ordered {
            return Err(Error::Shape(format!(
                "{} learning rates for {} ordered blocks",
                lrs.len(),
                self.ordered
            )));
        }
        let layer_lrs = self.layer_lrs(lrs);
        let stats = self.tuner.train_epoch_with(&layer_lrs)?;
        let v = stats.delta.variations()[..self.ordered].to_vec();
        self.last = Some(stats);
        Ok(v)
    }
}
