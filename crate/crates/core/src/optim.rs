//! Per-block momentum SGD with epoch-level variation measurement.
//!
//! Update rule per block `k` at iteration `l` of epoch `t`:
//!
//! ```text
//! dw_l = rho * dw_{l-1} - lr_k * g_l
//! w   <- w + dw_l
//! ```
//!
//! The optimiser additionally tracks the momentum-weighted accumulated
//! gradient `acc = sum_l m_l` with `m_l = rho * m_{l-1} + g_l`. When the
//! momentum buffer starts the epoch at zero and no weight decay is applied,
//! the epoch's total change satisfies `||w_end - w_start|| = lr_k * ||acc||`.

use serde::{Deserialize, Serialize};

use crate::micronet::{Gradients, Network};
use crate::{Error, Result};

pub const LR_FLOOR: f64 = 1e-8;
pub const LR_CEILING: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
    pub reset_momentum_each_epoch: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 0.0,
            nesterov: false,
            reset_momentum_each_epoch: true,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be a nonnegative finite number, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }

    /// Whether `||dw|| = lr * ||acc||` holds exactly for this configuration.
    pub fn variation_identity_exact(&self) -> bool {
        !self.nesterov && self.weight_decay == 0.0 && self.reset_momentum_each_epoch
    }
}

/// Per-block learning rates, constant for the duration of an epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrVector(pub Vec<f64>);

impl LrVector {
    pub fn uniform(lr: f64, len: usize) -> Self {
        Self(vec![lr; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Clamps every entry into `[LR_FLOOR, LR_CEILING]`.
    pub fn clamped(mut self) -> Self {
        for lr in &mut self.0 {
            *lr = clamp_lr(*lr);
        }
        self
    }
}

pub fn clamp_lr(lr: f64) -> f64 {
    if lr.is_nan() {
        LR_FLOOR
    } else {
        lr.clamp(LR_FLOOR, LR_CEILING)
    }
}

/// One momentum-SGD update of a flat parameter vector.
///
/// `velocity` holds the previously applied update `dw_{l-1}` and is
/// overwritten with `dw_l`. With `nesterov` set, the applied step is the
/// lookahead `rho * dw_l - lr * g` while the buffer still stores `dw_l`.
pub fn sgd_momentum_step(
    params: &mut [f64],
    velocity: &mut [f64],
    gradient: &[f64],
    lr: f64,
    config: &OptimizerConfig,
) -> Result<()> {
    if params.len() != gradient.len() || velocity.len() != gradient.len() {
        return Err(Error::Shape(format!(
            "gradient has {} entries, block has {}",
            gradient.len(),
            params.len()
        )));
    }
    if gradient.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    let rho = config.momentum;
    let wd = config.weight_decay;
    for ((w, dw), &g) in params.iter_mut().zip(velocity.iter_mut()).zip(gradient) {
        let g = if wd != 0.0 { g + wd * *w } else { g };
        *dw = rho * *dw - lr * g;
        if config.nesterov {
            *w += rho * *dw - lr * g;
        } else {
            *w += *dw;
        }
    }
    Ok(())
}

/// Change of one block over an epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockDelta {
    pub delta: Vec<f64>,
    /// `||delta||_2 / n_k`.
    pub variation: f64,
    pub acc_grad_norm: f64,
}

impl BlockDelta {
    pub fn delta_norm(&self) -> f64 {
        l2_norm(&self.delta)
    }
}

/// Per-layer deltas for one epoch, head last.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochDelta {
    pub blocks: Vec<BlockDelta>,
    pub iterations: usize,
}

impl EpochDelta {
    pub fn variations(&self) -> Vec<f64> {
        self.blocks.iter().map(|b| b.variation).collect()
    }

    pub fn acc_grad_norms(&self) -> Vec<f64> {
        self.blocks.iter().map(|b| b.acc_grad_norm).collect()
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Default)]
struct Accumulator {
    momentum: Vec<f64>,
    sum: Vec<f64>,
}

/// Momentum SGD over every layer of a [`Network`], instrumented per epoch.
#[derive(Debug, Clone)]
pub struct MomentumSgd {
    config: OptimizerConfig,
    epoch_start: Option<Vec<Vec<f64>>>,
    acc: Vec<Accumulator>,
    iterations: usize,
}

impl MomentumSgd {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            epoch_start: None,
            acc: Vec::new(),
            iterations: 0,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Anchors the epoch at the current weights and clears the accumulator.
    pub fn begin_epoch(&mut self, net: &mut Network) {
        let reset = self.config.reset_momentum_each_epoch;
        if reset {
            for layer in net.layers_mut() {
                layer.velocity.fill(0.0);
            }
        }
        self.epoch_start = Some(net.layers().iter().map(|l| l.params.clone()).collect());
        self.acc = net
            .layers()
            .iter()
            .map(|l| Accumulator {
                momentum: vec![0.0; l.param_count()],
                sum: vec![0.0; l.param_count()],
            })
            .collect();
        self.iterations = 0;
    }

    /// `m_l = rho * m_{l-1} + g_l`, `acc += m_l` for every layer.
    pub fn accumulate_grad_norm(&mut self, grads: &Gradients) -> Result<()> {
        if grads.len() != self.acc.len() {
            return Err(Error::Shape(format!(
                "{} gradient blocks, accumulator tracks {}",
                grads.len(),
                self.acc.len()
            )));
        }
        let rho = self.config.momentum;
        for (acc, g) in self.acc.iter_mut().zip(grads) {
            if g.len() != acc.sum.len() {
                return Err(Error::Shape("gradient block length changed".into()));
            }
            for ((m, s), &gi) in acc.momentum.iter_mut().zip(acc.sum.iter_mut()).zip(g) {
                *m = rho * *m + gi;
                *s += *m;
            }
        }
        self.iterations += 1;
        Ok(())
    }

    /// Applies one update to every layer with that layer's learning rate.
    pub fn apply(&self, net: &mut Network, grads: &Gradients) -> Result<()> {
        if grads.len() != net.layers().len() {
            return Err(Error::Shape(format!(
                "{} gradient blocks for {} layers",
                grads.len(),
                net.layers().len()
            )));
        }
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient".into()));
        }
        for (layer, g) in net.layers_mut().iter_mut().zip(grads) {
            let lr = layer.lr;
            sgd_momentum_step(&mut layer.params, &mut layer.velocity, g, lr, &self.config)?;
        }
        Ok(())
    }

    /// Accumulates and applies in one go: the usual per-iteration call.
    pub fn step(&mut self, net: &mut Network, grads: &Gradients) -> Result<()> {
        if self.epoch_start.is_none() {
            return Err(Error::MissingEpochStart);
        }
        self.apply(net, grads)?;
        self.accumulate_grad_norm(grads)
    }

    /// Measures `w_end - w_start` per layer and closes the epoch.
    pub fn end_epoch(&mut self, net: &Network) -> Result<EpochDelta> {
        let start = self.epoch_start.take().ok_or(Error::MissingEpochStart)?;
        if start.len() != net.layers().len() {
            return Err(Error::SnapshotMismatch(
                "network changed shape during the epoch".into(),
            ));
        }
        let blocks = net
            .layers()
            .iter()
            .zip(&start)
            .zip(&self.acc)
            .map(|((layer, w0), acc)| {
                let delta: Vec<f64> = layer.params.iter().zip(w0).map(|(w, s)| w - s).collect();
                let variation = l2_norm(&delta) / layer.param_count() as f64;
                BlockDelta {
                    delta,
                    variation,
                    acc_grad_norm: l2_norm(&acc.sum),
                }
            })
            .collect();
        Ok(EpochDelta {
            blocks,
            iterations: self.iterations,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::micronet::{build_network, Activation, BlockSpec, HeadSpec, Matrix, NetworkSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plain(momentum: f64) -> OptimizerConfig {
        OptimizerConfig {
            momentum,
            ..OptimizerConfig::default()
        }
    }

    fn small_net(seed: u64) -> Network {
        build_network(&NetworkSpec {
            input_dim: 3,
            blocks: vec![
                BlockSpec {
                    output_dim: 4,
                    activation: Activation::Tanh,
                },
                BlockSpec {
                    output_dim: 3,
                    activation: Activation::Relu,
                },
            ],
            head: HeadSpec { num_classes: 2 },
            seed,
        })
        .unwrap()
    }

    fn batches(seed: u64, count: usize) -> Vec<(Matrix, Vec<usize>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let x = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
                let y = (0..4).map(|_| rng.random_range(0..2)).collect();
                (Matrix::from_vec(4, 3, x).unwrap(), y)
            })
            .collect()
    }

    #[test]
    fn momentum_free_step_is_plain_sgd() {
        let mut w = vec![1.0, -2.0];
        let mut v = vec![0.0; 2];
        sgd_momentum_step(&mut w, &mut v, &[0.5, 0.25], 0.1, &plain(0.0)).unwrap();
        assert_eq!(w, vec![1.0 - 0.1 * 0.5, -2.0 - 0.1 * 0.25]);
    }

    #[test]
    fn hand_recursion_with_momentum() {
        let cfg = plain(0.9);
        let mut w = vec![1.0];
        let mut v = vec![0.0];
        sgd_momentum_step(&mut w, &mut v, &[1.0], 0.1, &cfg).unwrap();
        assert!((v[0] + 0.1).abs() < 1e-15 && (w[0] - 0.9).abs() < 1e-15);
        sgd_momentum_step(&mut w, &mut v, &[1.0], 0.1, &cfg).unwrap();
        assert!((v[0] + 0.19).abs() < 1e-15);
        assert!((w[0] - 0.71).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_only_decays_buffer() {
        let cfg = plain(0.9);
        let mut w = vec![3.0];
        let mut v = vec![0.5];
        sgd_momentum_step(&mut w, &mut v, &[7.0], 0.0, &cfg).unwrap();
        assert_eq!(v[0], 0.9 * 0.5);
        assert_eq!(w[0], 3.0 + 0.45);
        let mut w = vec![3.0];
        let mut v = vec![0.0];
        sgd_momentum_step(&mut w, &mut v, &[7.0], 0.0, &cfg).unwrap();
        assert_eq!((w[0], v[0]), (3.0, 0.0));
    }

    #[test]
    fn nesterov_applies_lookahead() {
        let cfg = OptimizerConfig {
            nesterov: true,
            ..plain(0.9)
        };
        let mut w = vec![1.0];
        let mut v = vec![0.0];
        sgd_momentum_step(&mut w, &mut v, &[1.0], 0.1, &cfg).unwrap();
        // dw = -0.1, applied 0.9 * -0.1 - 0.1
        assert!((v[0] + 0.1).abs() < 1e-15);
        assert!((w[0] - 0.81).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_adds_to_gradient() {
        let cfg = OptimizerConfig {
            weight_decay: 0.5,
            ..plain(0.0)
        };
        let mut w = vec![2.0];
        let mut v = vec![0.0];
        sgd_momentum_step(&mut w, &mut v, &[1.0], 0.1, &cfg).unwrap();
        assert!((w[0] - (2.0 - 0.1 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_mutation() {
        let mut w = vec![1.0, 1.0];
        let mut v = vec![0.0, 0.0];
        let err = sgd_momentum_step(&mut w, &mut v, &[0.1, f64::NAN], 0.1, &plain(0.9));
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert_eq!(w, vec![1.0, 1.0]);
    }

    #[test]
    fn invalid_momentum_rejected() {
        assert!(MomentumSgd::new(plain(1.0)).is_err());
        assert!(MomentumSgd::new(plain(-0.1)).is_err());
    }

    #[test]
    fn empty_epoch_has_zero_variation() {
        let mut net = small_net(1);
        let mut opt = MomentumSgd::new(plain(0.9)).unwrap();
        opt.begin_epoch(&mut net);
        let d = opt.end_epoch(&net).unwrap();
        assert!(d.variations().iter().all(|&v| v == 0.0));
        assert!(matches!(opt.end_epoch(&net), Err(Error::MissingEpochStart)));
    }

    #[test]
    fn begin_epoch_resets_momentum_when_flagged() {
        let mut net = small_net(1);
        net.layers_mut()[0].velocity.fill(0.3);
        let mut keep = MomentumSgd::new(OptimizerConfig {
            reset_momentum_each_epoch: false,
            ..plain(0.9)
        })
        .unwrap();
        keep.begin_epoch(&mut net);
        assert!(net.layers()[0].velocity.iter().all(|&v| v == 0.3));
        let mut reset = MomentumSgd::new(plain(0.9)).unwrap();
        reset.begin_epoch(&mut net);
        assert!(net.layers()[0].velocity.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn second_begin_epoch_reanchors() {
        let mut net = small_net(2);
        let mut opt = MomentumSgd::new(plain(0.9)).unwrap();
        let (x, y) = &batches(0, 1)[0];
        opt.begin_epoch(&mut net);
        let (_, g) = net.loss_and_gradients(x, y).unwrap();
        opt.step(&mut net, &g).unwrap();
        opt.begin_epoch(&mut net);
        let d = opt.end_epoch(&net).unwrap();
        assert!(d.variations().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn accumulator_hand_expansions() {
        let mut net = small_net(3);
        let sizes: Vec<usize> = net.layers().iter().map(|l| l.param_count()).collect();
        let g1: Gradients = sizes.iter().map(|&n| vec![1.0; n]).collect();
        let g2: Gradients = sizes.iter().map(|&n| vec![2.0; n]).collect();

        // rho = 0.5: acc = g1 + (0.5 g1 + g2) = 1.5 g1 + g2 = 3.5 per entry
        let mut opt = MomentumSgd::new(plain(0.5)).unwrap();
        opt.begin_epoch(&mut net);
        opt.accumulate_grad_norm(&g1).unwrap();
        opt.accumulate_grad_norm(&g2).unwrap();
        let d = opt.end_epoch(&net).unwrap();
        for (b, &n) in d.blocks.iter().zip(&sizes) {
            assert!((b.acc_grad_norm - 3.5 * (n as f64).sqrt()).abs() < 1e-12);
        }

        // rho = 0: plain sum
        let mut opt = MomentumSgd::new(plain(0.0)).unwrap();
        opt.begin_epoch(&mut net);
        opt.accumulate_grad_norm(&g1).unwrap();
        opt.accumulate_grad_norm(&g2).unwrap();
        let d = opt.end_epoch(&net).unwrap();
        assert!((d.blocks[0].acc_grad_norm - 3.0 * (sizes[0] as f64).sqrt()).abs() < 1e-12);

        // one iteration: acc = g1 for any rho
        let mut opt = MomentumSgd::new(plain(0.9)).unwrap();
        opt.begin_epoch(&mut net);
        opt.accumulate_grad_norm(&g1).unwrap();
        let d = opt.end_epoch(&net).unwrap();
        assert_eq!(d.blocks[1].acc_grad_norm, (sizes[1] as f64).sqrt());
    }

    #[test]
    fn variation_is_norm_over_count() {
        let mut net = build_network(&NetworkSpec {
            input_dim: 1,
            blocks: vec![BlockSpec {
                output_dim: 2,
                activation: Activation::Identity,
            }],
            head: HeadSpec { num_classes: 1 },
            seed: 0,
        })
        .unwrap();
        let mut opt = MomentumSgd::new(plain(0.0)).unwrap();
        opt.begin_epoch(&mut net);
        let deltas = [3.0, 0.0, 4.0, 0.0];
        for (p, d) in net.layers_mut()[0].params.iter_mut().zip(deltas) {
            *p += d;
        }
        let d = opt.end_epoch(&net).unwrap();
        assert_eq!(net.layers()[0].param_count(), 4);
        assert!((d.blocks[0].delta_norm() - 5.0).abs() < 1e-12);
        assert!((d.blocks[0].variation - 1.25).abs() < 1e-12);
    }

    #[test]
    fn epoch_identity_holds_for_plain_momentum() {
        for rho in [0.0, 0.5, 0.9] {
            let mut net = small_net(4);
            net.set_lrs(&[0.05, 0.02, 0.1]).unwrap();
            let mut opt = MomentumSgd::new(plain(rho)).unwrap();
            opt.begin_epoch(&mut net);
            for (x, y) in batches(9, 10) {
                let (_, g) = net.loss_and_gradients(&x, &y).unwrap();
                opt.step(&mut net, &g).unwrap();
            }
            let d = opt.end_epoch(&net).unwrap();
            assert_eq!(d.iterations, 10);
            for (b, layer) in d.blocks.iter().zip(net.layers()) {
                let lhs = b.delta_norm();
                let rhs = layer.lr * b.acc_grad_norm;
                assert!((lhs - rhs).abs() <= 1e-9 * rhs, "rho {rho}: {lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn single_step_variation_scales_with_lr() {
        let (x, y) = &batches(5, 1)[0];
        let base = small_net(6);
        let measure = |lr: f64| {
            let mut net = base.clone();
            net.set_lrs(&[lr; 3]).unwrap();
            let mut opt = MomentumSgd::new(plain(0.0)).unwrap();
            opt.begin_epoch(&mut net);
            let (_, g) = net.loss_and_gradients(x, y).unwrap();
            opt.step(&mut net, &g).unwrap();
            opt.end_epoch(&net).unwrap().variations()
        };
        let v1 = measure(0.01);
        let v2 = measure(0.02);
        for (a, b) in v1.iter().zip(&v2) {
            assert!((b / a - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn step_requires_begin_epoch() {
        let mut net = small_net(1);
        let mut opt = MomentumSgd::new(plain(0.9)).unwrap();
        let (x, y) = &batches(0, 1)[0];
        let (_, g) = net.loss_and_gradients(x, y).unwrap();
        assert!(matches!(
            opt.step(&mut net, &g),
            Err(Error::MissingEpochStart)
        ));
    }

    #[test]
    fn lr_vector_clamps() {
        let v = LrVector(vec![0.0, 5.0, 1e-3, f64::NAN]).clamped();
        assert_eq!(v.0, vec![LR_FLOOR, LR_CEILING, 1e-3, LR_FLOOR]);
    }
}
