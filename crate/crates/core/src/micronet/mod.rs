//! Minimal layered feed-forward engine.
//!
//! A network is an ordered stack of dense blocks followed by a linear
//! classifier head. Block 1 is the lowest (input side) block; the head is
//! layer `K + 1`. Every layer stores its weights and biases in one flat
//! parameter vector (`weights` row-major `out x in`, then `biases`) so that
//! the optimiser and the variation bookkeeping can treat a block as a single
//! vector.

mod matrix;
mod snapshot;

pub use matrix::Matrix;
pub use snapshot::{BlockState, NetSnapshot, RngState};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Learning rate a freshly built block starts with.
pub const DEFAULT_LR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub output_dim: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub blocks: Vec<BlockSpec>,
    pub head: HeadSpec,
    #[serde(default)]
    pub seed: u64,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be at least 1".into()));
        }
        if self.blocks.is_empty() {
            return Err(Error::Config("network needs at least one block".into()));
        }
        if let Some(i) = self.blocks.iter().position(|b| b.output_dim == 0) {
            return Err(Error::Config(format!("block {} has output_dim 0", i + 1)));
        }
        if self.head.num_classes == 0 {
            return Err(Error::Config("head needs at least one class".into()));
        }
        Ok(())
    }

    /// Number of blocks `K` (head excluded).
    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// `(input_dim, output_dim, activation)` for every layer, head last.
    fn layer_shapes(&self) -> Vec<(usize, usize, Activation)> {
        let mut shapes = Vec::with_capacity(self.blocks.len() + 1);
        let mut fan_in = self.input_dim;
        for b in &self.blocks {
            shapes.push((fan_in, b.output_dim, b.activation));
            fan_in = b.output_dim;
        }
        shapes.push((fan_in, self.head.num_classes, Activation::Identity));
        shapes
    }

    /// Total trainable scalars derived from the shapes alone.
    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|&(i, o, _)| i * o + o).sum()
    }

    /// Same architecture with the top `count` blocks removed.
    pub fn without_top_blocks(&self, count: usize) -> Result<NetworkSpec> {
        if count >= self.blocks.len() {
            return Err(Error::Config(format!(
                "cannot remove {count} of {} blocks; at least one must remain",
                self.blocks.len()
            )));
        }
        let mut spec = self.clone();
        spec.blocks.truncate(self.blocks.len() - count);
        Ok(spec)
    }
}

/// One group of trainable parameters: a dense block or the head.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    /// 1-based position; the head is `K + 1`.
    pub index: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
    /// `weights` (row-major, `output_dim x input_dim`) followed by `biases`.
    pub params: Vec<f64>,
    /// Momentum buffer holding the last applied update, same layout as `params`.
    pub velocity: Vec<f64>,
    pub lr: f64,
}

impl ParamBlock {
    fn initialized(
        index: usize,
        input_dim: usize,
        output_dim: usize,
        activation: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let limit = match activation {
            Activation::Relu => (6.0 / input_dim as f64).sqrt(),
            _ => (6.0 / (input_dim + output_dim) as f64).sqrt(),
        };
        let n_weights = input_dim * output_dim;
        let mut params = Vec::with_capacity(n_weights + output_dim);
        params.extend((0..n_weights).map(|_| rng.random_range(-limit..limit)));
        params.extend(std::iter::repeat_n(0.0, output_dim));
        Self {
            index,
            input_dim,
            output_dim,
            activation,
            velocity: vec![0.0; params.len()],
            params,
            lr: DEFAULT_LR,
        }
    }

    /// `n_k`: number of scalars in weights plus biases.
    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.params[..self.input_dim * self.output_dim]
    }

    pub fn biases(&self) -> &[f64] {
        &self.params[self.input_dim * self.output_dim..]
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        let n = self.input_dim * self.output_dim;
        &mut self.params[..n]
    }

    pub fn biases_mut(&mut self) -> &mut [f64] {
        let n = self.input_dim * self.output_dim;
        &mut self.params[n..]
    }

    fn forward(&self, x: &Matrix) -> (Matrix, Matrix) {
        let (n_in, n_out) = (self.input_dim, self.output_dim);
        let w = self.weights();
        let b = self.biases();
        let mut pre = Matrix::zeros(x.rows(), n_out);
        let mut post = Matrix::zeros(x.rows(), n_out);
        for r in 0..x.rows() {
            let xr = x.row(r);
            let zr = pre.row_mut(r);
            for o in 0..n_out {
                let wo = &w[o * n_in..(o + 1) * n_in];
                zr[o] = b[o] + wo.iter().zip(xr).map(|(a, c)| a * c).sum::<f64>();
            }
            let zr = pre.row(r).to_vec();
            for (a, z) in post.row_mut(r).iter_mut().zip(zr) {
                *a = self.activation.apply(z);
            }
        }
        (pre, post)
    }
}

/// Everything `backward` needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    /// `acts[0]` is the input batch, `acts[l + 1]` the output of layer `l`.
    acts: Vec<Matrix>,
    pre: Vec<Matrix>,
}

impl ForwardCache {
    pub fn logits(&self) -> &Matrix {
        self.acts.last().expect("cache always holds the input")
    }

    /// Output of the top backbone block (input to the head).
    pub fn embeddings(&self) -> &Matrix {
        &self.acts[self.acts.len() - 2]
    }

    pub fn batch_size(&self) -> usize {
        self.acts[0].rows()
    }
}

/// Per-layer loss gradients, head last, same layout as [`ParamBlock::params`].
pub type Gradients = Vec<Vec<f64>>;

#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<ParamBlock>,
    rng: ChaCha8Rng,
    version: u64,
}

fn shuffle_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Seed for a head attached on top of `depth` blocks.
pub fn head_seed(base: u64, depth: usize) -> u64 {
    base ^ depth as u64
}

/// Builds a network with deterministic He/Xavier-uniform weights and zero biases.
pub fn build_network(spec: &NetworkSpec) -> Result<Network> {
    spec.validate()?;
    let mut init = ChaCha8Rng::seed_from_u64(spec.seed);
    let layers = spec
        .layer_shapes()
        .into_iter()
        .enumerate()
        .map(|(i, (n_in, n_out, act))| ParamBlock::initialized(i + 1, n_in, n_out, act, &mut init))
        .collect();
    Ok(Network {
        spec: spec.clone(),
        layers,
        rng: shuffle_rng(spec.seed),
        version: 0,
    })
}

/// Builds `spec` from the lowest `spec.depth()` blocks of `pretrained`
/// and attaches a fresh head seeded by [`head_seed`].
///
/// Momentum buffers start at zero; block learning rates are copied.
pub fn transplant(spec: &NetworkSpec, pretrained: &NetSnapshot) -> Result<Network> {
    spec.validate()?;
    let shapes = spec.layer_shapes();
    let depth = spec.depth();
    let available = pretrained.layers.len().saturating_sub(1);
    if depth > available {
        return Err(Error::SnapshotMismatch(format!(
            "spec wants {depth} blocks, snapshot has {available}"
        )));
    }
    let mut layers = Vec::with_capacity(depth + 1);
    for (k, (&(n_in, n_out, act), state)) in shapes
        .iter()
        .zip(&pretrained.layers)
        .take(depth)
        .enumerate()
    {
        if state.input_dim != n_in || state.output_dim != n_out {
            return Err(Error::SnapshotMismatch(format!(
                "block {}: snapshot is {}x{}, spec is {}x{}",
                k + 1,
                state.input_dim,
                state.output_dim,
                n_in,
                n_out
            )));
        }
        layers.push(ParamBlock {
            index: k + 1,
            input_dim: n_in,
            output_dim: n_out,
            activation: act,
            velocity: vec![0.0; state.params.len()],
            params: state.params.clone(),
            lr: state.lr,
        });
    }
    let (n_in, n_out, act) = shapes[depth];
    let mut head_rng = ChaCha8Rng::seed_from_u64(head_seed(spec.seed, depth));
    let mut head = ParamBlock::initialized(depth + 1, n_in, n_out, act, &mut head_rng);
    head.lr = pretrained.layers.last().map_or(DEFAULT_LR, |h| h.lr);
    layers.push(head);
    Ok(Network {
        spec: spec.clone(),
        layers,
        rng: shuffle_rng(spec.seed),
        version: 0,
    })
}

/// Drops block `K` and reattaches a fresh head on block `K - 1`.
pub fn prune_top_block(
    spec: &NetworkSpec,
    pretrained: &NetSnapshot,
) -> Result<(NetworkSpec, Network)> {
    if spec.depth() < 2 {
        return Err(Error::Config(
            "cannot prune a network with a single block".into(),
        ));
    }
    let pruned = spec.without_top_blocks(1)?;
    let net = transplant(&pruned, pretrained)?;
    Ok((pruned, net))
}

/// Mean cross-entropy of `softmax(logits)` against integer labels.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    check_labels(logits, labels)?;
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    Ok(total / labels.len() as f64)
}

fn check_labels(logits: &Matrix, labels: &[usize]) -> Result<()> {
    if labels.len() != logits.rows() {
        return Err(Error::Shape(format!(
            "{} labels for {} rows",
            labels.len(),
            logits.rows()
        )));
    }
    if labels.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= logits.cols()) {
        return Err(Error::InvalidInput(format!(
            "label {bad} out of range for {} classes",
            logits.cols()
        )));
    }
    Ok(())
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

impl Network {
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    /// Number of backbone blocks `K`.
    pub fn depth(&self) -> usize {
        self.layers.len() - 1
    }

    /// Backbone blocks followed by the head.
    pub fn layers(&self) -> &[ParamBlock] {
        &self.layers
    }

    /// Mutable access to all layers. Invalidates outstanding forward caches.
    pub fn layers_mut(&mut self) -> &mut [ParamBlock] {
        self.version += 1;
        &mut self.layers
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.layers[..self.depth()]
    }

    pub fn head(&self) -> &ParamBlock {
        self.layers.last().expect("network always has a head")
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(ParamBlock::param_count).sum()
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn set_lrs(&mut self, lrs: &[f64]) -> Result<()> {
        if lrs.len() != self.layers.len() {
            return Err(Error::Shape(format!(
                "{} learning rates for {} layers",
                lrs.len(),
                self.layers.len()
            )));
        }
        for (layer, &lr) in self.layers.iter_mut().zip(lrs) {
            layer.lr = lr;
        }
        Ok(())
    }

    pub fn forward(&self, batch: &Matrix) -> Result<ForwardCache> {
        if batch.cols() != self.spec.input_dim {
            return Err(Error::Shape(format!(
                "batch has {} features, network expects {}",
                batch.cols(),
                self.spec.input_dim
            )));
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        acts.push(batch.clone());
        for layer in &self.layers {
            let (z, a) = layer.forward(acts.last().unwrap());
            pre.push(z);
            acts.push(a);
        }
        Ok(ForwardCache {
            version: self.version,
            acts,
            pre,
        })
    }

    pub fn predict(&self, batch: &Matrix) -> Result<Vec<usize>> {
        let cache = self.forward(batch)?;
        let logits = cache.logits();
        Ok((0..logits.rows())
            .map(|r| {
                let row = logits.row(r);
                // first maximum wins
                let mut best = 0;
                for (c, &z) in row.iter().enumerate() {
                    if z > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect())
    }

    /// Gradients of the mean cross-entropy for the batch cached in `cache`.
    pub fn backward(&self, cache: &ForwardCache, labels: &[usize]) -> Result<Gradients> {
        if cache.version != self.version || cache.pre.len() != self.layers.len() {
            return Err(Error::StaleCache);
        }
        let logits = cache.logits();
        check_labels(logits, labels)?;
        let n = labels.len();
        let scale = 1.0 / n as f64;

        let mut delta = Matrix::zeros(n, logits.cols());
        for (r, &y) in labels.iter().enumerate() {
            let p = softmax_row(logits.row(r));
            let dr = delta.row_mut(r);
            for (c, pc) in p.into_iter().enumerate() {
                dr[c] = (pc - if c == y { 1.0 } else { 0.0 }) * scale;
            }
        }

        let mut grads: Gradients = vec![Vec::new(); self.layers.len()];
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            if l + 1 != self.layers.len() {
                // dL/dz = dL/da * act'(z)
                let z = &cache.pre[l];
                let a = &cache.acts[l + 1];
                for r in 0..n {
                    let (zr, ar) = (z.row(r), a.row(r));
                    for (o, d) in delta.row_mut(r).iter_mut().enumerate() {
                        *d *= layer.activation.derivative(zr[o], ar[o]);
                    }
                }
            }
            let x = &cache.acts[l];
            let (n_in, n_out) = (layer.input_dim, layer.output_dim);
            let mut g = vec![0.0; layer.param_count()];
            let (gw, gb) = g.split_at_mut(n_in * n_out);
            for r in 0..n {
                let (dr, xr) = (delta.row(r), x.row(r));
                for o in 0..n_out {
                    let d = dr[o];
                    gb[o] += d;
                    for (gwi, xi) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(xr) {
                        *gwi += d * xi;
                    }
                }
            }
            grads[l] = g;
            if l > 0 {
                let w = layer.weights();
                let mut upstream = Matrix::zeros(n, n_in);
                for r in 0..n {
                    let dr = delta.row(r);
                    let ur = upstream.row_mut(r);
                    for o in 0..n_out {
                        let d = dr[o];
                        for (u, wi) in ur.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                            *u += d * wi;
                        }
                    }
                }
                delta = upstream;
            }
        }
        Ok(grads)
    }

    /// Forward, loss and backward in one call.
    pub fn loss_and_gradients(&self, batch: &Matrix, labels: &[usize]) -> Result<(f64, Gradients)> {
        let cache = self.forward(batch)?;
        let loss = cross_entropy(cache.logits(), labels)?;
        let grads = self.backward(&cache, labels)?;
        Ok((loss, grads))
    }

    pub fn snapshot(&self) -> NetSnapshot {
        NetSnapshot {
            layers: self
                .layers
                .iter()
                .map(|l| BlockState {
                    input_dim: l.input_dim,
                    output_dim: l.output_dim,
                    params: l.params.clone(),
                    velocity: l.velocity.clone(),
                    lr: l.lr,
                })
                .collect(),
            rng: RngState::capture(&self.rng),
        }
    }

    pub fn restore(&mut self, snap: &NetSnapshot) -> Result<()> {
        if snap.layers.len() != self.layers.len() {
            return Err(Error::SnapshotMismatch(format!(
                "snapshot has {} layers, network has {}",
                snap.layers.len(),
                self.layers.len()
            )));
        }
        for (layer, state) in self.layers.iter().zip(&snap.layers) {
            if layer.input_dim != state.input_dim
                || layer.output_dim != state.output_dim
                || state.params.len() != layer.params.len()
                || state.velocity.len() != layer.params.len()
            {
                return Err(Error::SnapshotMismatch(format!(
                    "layer {}: snapshot is {}x{}, network is {}x{}",
                    layer.index,
                    state.input_dim,
                    state.output_dim,
                    layer.input_dim,
                    layer.output_dim
                )));
            }
        }
        for (layer, state) in self.layers.iter_mut().zip(&snap.layers) {
            layer.params.copy_from_slice(&state.params);
            layer.velocity.copy_from_slice(&state.velocity);
            layer.lr = state.lr;
        }
        self.rng = snap.rng.rebuild();
        self.version += 1;
        Ok(())
    }
}
