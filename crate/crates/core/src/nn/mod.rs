//! A small GIN / GCN classifier with hand-written backpropagation.
//!
//! Hidden states are `d × N` matrices, one column per node of a
//! [`GraphBatch`]. Every layer aggregates each graph with its own `Q`, passes
//! the result through one or more linear maps (each optionally followed by a
//! normalization) and a ReLU. A SUM or MEAN readout feeds a linear head.

mod gradcheck;
mod train;

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::graph::GraphBatch;
use crate::linalg::{matmul, DenseMatrix};
use crate::norm::{normalize_backward, normalize_forward, BatchNormState, Mode, NormCache, NormKind, NormSpec};
use crate::rng;

pub use gradcheck::{gradient_check, GradCheckReport};
pub use train::{evaluate, predict, train, AdamSettings, EpochRecord, IterationRecord, TrainSettings, TrainTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Arch {
    Gin,
    Gcn,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Gin => "gin",
            Arch::Gcn => "gcn",
        })
    }
}

impl FromStr for Arch {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "gin" => Ok(Arch::Gin),
            "gcn" => Ok(Arch::Gcn),
            _ => Err(format!("unknown architecture '{s}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Readout {
    Sum,
    Mean,
}

impl fmt::Display for Readout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Readout::Sum => "sum",
            Readout::Mean => "mean",
        })
    }
}

impl FromStr for Readout {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sum" => Ok(Readout::Sum),
            "mean" => Ok(Readout::Mean),
            _ => Err(format!("unknown readout '{s}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub arch: Arch,
    pub layers: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// Linear maps per GIN layer; GCN layers always have one.
    pub mlp_depth: usize,
    pub norm: NormKind,
    pub readout: Readout,
    pub xi_learnable: bool,
    pub classes: usize,
    /// Add the layer input to its output when the shapes agree.
    pub residual: bool,
    /// Normalize only after the first linear map of each GIN layer.
    pub norm_once: bool,
    pub epsilon: f64,
}

impl ModelConfig {
    pub fn new(arch: Arch, input_dim: usize, classes: usize) -> Self {
        Self {
            arch,
            layers: 5,
            input_dim,
            hidden_dim: 64,
            mlp_depth: 2,
            norm: NormKind::None,
            readout: Readout::Sum,
            xi_learnable: true,
            classes,
            residual: false,
            norm_once: false,
            epsilon: crate::norm::DEFAULT_EPSILON,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let problem = if self.layers == 0 {
            Some("layers must be at least 1")
        } else if self.hidden_dim == 0 {
            Some("hidden_dim must be at least 1")
        } else if self.input_dim == 0 {
            Some("input_dim must be at least 1")
        } else if self.classes < 2 {
            Some("classes must be at least 2")
        } else if self.arch == Arch::Gin && self.mlp_depth == 0 {
            Some("mlp_depth must be at least 1")
        } else if !(self.epsilon > 0.0) {
            Some("epsilon must be positive")
        } else {
            None
        };
        match problem {
            Some(p) => Err(Error::InvalidModel(p.into())),
            None => Ok(()),
        }
    }

    fn sublayers(&self) -> usize {
        match self.arch {
            Arch::Gin => self.mlp_depth,
            Arch::Gcn => 1,
        }
    }

    fn norms_per_layer(&self) -> usize {
        if self.norm_once { 1 } else { self.sublayers() }
    }

    /// Number of normalization layers, which is also the length of the flat
    /// index space used by [`ForwardCache::norm_input`].
    pub fn norm_layer_count(&self) -> usize {
        self.layers * self.norms_per_layer()
    }
}

/// A dense affine map `W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

impl Linear {
    fn init(out_dim: usize, in_dim: usize, r: &mut rng::Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = DenseMatrix::from_fn(out_dim, in_dim, |_, _| r.random_range(-bound..bound));
        let bias = (0..out_dim).map(|_| r.random_range(-bound..bound)).collect();
        Self { weight, bias }
    }

    fn zeros_like(&self) -> Self {
        Self {
            weight: DenseMatrix::zeros(self.weight.rows(), self.weight.cols()),
            bias: vec![0.0; self.bias.len()],
        }
    }

    fn apply(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let mut out = matmul(&self.weight, x)?;
        for (r, b) in self.bias.iter().enumerate() {
            out.row_mut(r).iter_mut().for_each(|v| *v += b);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub linears: Vec<Linear>,
    pub norms: Vec<NormSpec>,
    pub xi: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<LayerParams>,
    pub head: Linear,
}

fn norm_spec(kind: NormKind, dim: usize, epsilon: f64) -> NormSpec {
    if kind == NormKind::None {
        NormSpec {
            kind,
            gamma: Vec::new(),
            beta: Vec::new(),
            alpha: Vec::new(),
            epsilon,
        }
    } else {
        NormSpec::new(kind, dim).with_epsilon(epsilon)
    }
}

impl ModelParams {
    /// Uniform `±1/√fan_in` weights and biases, drawn in a fixed order that
    /// does not depend on the normalization kind, so models differing only
    /// in `norm` start from identical linear weights.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::seeded(seed);
        let mut layers = Vec::with_capacity(config.layers);
        for k in 0..config.layers {
            let mut linears = Vec::with_capacity(config.sublayers());
            for s in 0..config.sublayers() {
                let in_dim = if k == 0 && s == 0 { config.input_dim } else { config.hidden_dim };
                linears.push(Linear::init(config.hidden_dim, in_dim, &mut r));
            }
            let norms = (0..config.norms_per_layer())
                .map(|_| norm_spec(config.norm, config.hidden_dim, config.epsilon))
                .collect();
            layers.push(LayerParams { linears, norms, xi: 0.0 });
        }
        let head = Linear::init(config.classes, config.hidden_dim, &mut r);
        Ok(Self { layers, head })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    linears: l.linears.iter().map(Linear::zeros_like).collect(),
                    norms: l
                        .norms
                        .iter()
                        .map(|n| NormSpec {
                            kind: n.kind,
                            gamma: vec![0.0; n.gamma.len()],
                            beta: vec![0.0; n.beta.len()],
                            alpha: vec![0.0; n.alpha.len()],
                            epsilon: n.epsilon,
                        })
                        .collect(),
                    xi: 0.0,
                })
                .collect(),
            head: self.head.zeros_like(),
        }
    }

    /// Every trainable tensor with a stable name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        for (k, layer) in self.layers.iter().enumerate() {
            for (s, lin) in layer.linears.iter().enumerate() {
                out.push((format!("layer{k}.linear{s}.weight"), lin.weight.data()));
                out.push((format!("layer{k}.linear{s}.bias"), &lin.bias));
            }
            for (s, norm) in layer.norms.iter().enumerate() {
                out.push((format!("layer{k}.norm{s}.gamma"), &norm.gamma));
                out.push((format!("layer{k}.norm{s}.beta"), &norm.beta));
                out.push((format!("layer{k}.norm{s}.alpha"), &norm.alpha));
            }
            out.push((format!("layer{k}.xi"), std::slice::from_ref(&layer.xi)));
        }
        out.push(("head.weight".into(), self.head.weight.data()));
        out.push(("head.bias".into(), &self.head.bias));
        out.retain(|(_, t)| !t.is_empty());
        out
    }

    /// Mutable counterpart of [`ModelParams::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for layer in &mut self.layers {
            for lin in &mut layer.linears {
                out.push(lin.weight.data_mut());
                out.push(&mut lin.bias);
            }
            for norm in &mut layer.norms {
                out.push(&mut norm.gamma);
                out.push(&mut norm.beta);
                out.push(&mut norm.alpha);
            }
            out.push(std::slice::from_mut(&mut layer.xi));
        }
        out.push(self.head.weight.data_mut());
        out.push(&mut self.head.bias);
        out.retain(|t| !t.is_empty());
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().into_iter().flat_map(|(_, t)| t.iter().copied()).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (_, t) in self.tensors() {
            for v in t {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let expected = Self::init(config, 0)?;
        let same = self.layers.len() == expected.layers.len()
            && self.head.weight.shape() == expected.head.weight.shape()
            && self.layers.iter().zip(&expected.layers).all(|(a, b)| {
                a.linears.len() == b.linears.len()
                    && a.norms.len() == b.norms.len()
                    && a.linears.iter().zip(&b.linears).all(|(x, y)| x.weight.shape() == y.weight.shape())
                    && a.norms.iter().all(|n| n.kind == config.norm)
            });
        if same {
            Ok(())
        } else {
            Err(Error::InvalidModel("parameter shapes do not match the model configuration".into()))
        }
    }
}

/// Batch-norm running statistics, one entry per normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats(pub Vec<BatchNormState>);

impl RunningStats {
    pub fn new(config: &ModelConfig) -> Self {
        Self(
            (0..config.norm_layer_count())
                .map(|_| BatchNormState::new(config.hidden_dim))
                .collect(),
        )
    }
}

/// Per-batch neighbor structure used to apply every graph's `Q` at once.
struct Aggregation {
    neighbors: Vec<Vec<usize>>,
    inv_sqrt_deg: Vec<f64>,
}

impl Aggregation {
    fn new(batch: &GraphBatch) -> Self {
        let mut neighbors = Vec::with_capacity(batch.total_nodes());
        for (g, &offset) in batch.graphs().iter().zip(batch.offsets()) {
            for list in g.neighbors() {
                neighbors.push(list.into_iter().map(|j| j + offset).collect::<Vec<_>>());
            }
        }
        let inv_sqrt_deg = neighbors.iter().map(|l| 1.0 / ((l.len() + 1) as f64).sqrt()).collect();
        Self { neighbors, inv_sqrt_deg }
    }

    /// `H · Q` with `Q` block diagonal over the batch. `Q` is symmetric, so
    /// the same map also propagates gradients backwards.
    fn apply(&self, h: &DenseMatrix, arch: Arch, xi: f64) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(h.rows(), h.cols());
        for r in 0..h.rows() {
            let src = h.row(r);
            let dst = out.row_mut(r);
            for (i, list) in self.neighbors.iter().enumerate() {
                dst[i] = match arch {
                    Arch::Gin => (1.0 + xi) * src[i] + list.iter().map(|&j| src[j]).sum::<f64>(),
                    Arch::Gcn => {
                        let di = self.inv_sqrt_deg[i];
                        di * di * src[i] + di * list.iter().map(|&j| src[j] * self.inv_sqrt_deg[j]).sum::<f64>()
                    }
                };
            }
        }
        out
    }
}

struct SublayerCache {
    input: DenseMatrix,
    pre_norm: DenseMatrix,
    norm: Option<NormCache>,
    activated_mask: Vec<bool>,
}

struct LayerCache {
    input: DenseMatrix,
    sublayers: Vec<SublayerCache>,
}

/// Activations saved by [`forward`] for [`backward`].
pub struct ForwardCache {
    fingerprint: u64,
    offsets: Vec<usize>,
    layers: Vec<LayerCache>,
    readout: DenseMatrix,
    logits: DenseMatrix,
    norms_per_layer: usize,
}

impl ForwardCache {
    /// Input of normalization layer `id` (flat index, layer-major).
    pub fn norm_input(&self, id: usize) -> Option<&DenseMatrix> {
        let layer = self.layers.get(id / self.norms_per_layer)?;
        let sub = layer.sublayers.get(id % self.norms_per_layer)?;
        sub.norm.as_ref().map(|_| &sub.pre_norm)
    }

    /// Which pre-activation entries were positive, over all ReLUs in order.
    pub(crate) fn relu_pattern(&self) -> impl Iterator<Item = bool> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.sublayers.iter().flat_map(|s| s.activated_mask.iter().copied()))
    }

    pub fn logits(&self) -> &DenseMatrix {
        &self.logits
    }

    /// Graph representations after readout (`hidden × graphs`).
    pub fn readout(&self) -> &DenseMatrix {
        &self.readout
    }
}

/// Runs the model on a batch and returns the logits (`classes × graphs`)
/// together with the activations needed for backpropagation.
///
/// In train mode batch norms use batch statistics and, if `running` is
/// given, update it; in eval mode they read `running`, which is then required.
pub fn forward(
    params: &ModelParams,
    config: &ModelConfig,
    batch: &GraphBatch,
    mode: Mode,
    mut running: Option<&mut RunningStats>,
) -> Result<(DenseMatrix, ForwardCache)> {
    config.validate()?;
    params.check_shapes(config)?;
    if batch.feature_dim() != config.input_dim {
        return Err(Error::DimensionMismatch {
            op: "forward",
            left: (config.input_dim, 0),
            right: (batch.feature_dim(), batch.total_nodes()),
        });
    }
    if let Some(r) = running.as_ref() {
        if r.0.len() != config.norm_layer_count() {
            return Err(Error::InvalidModel("running statistics do not match the model".into()));
        }
    }
    let agg = Aggregation::new(batch);
    let offsets = batch.offsets().to_vec();
    let mut h = batch.features();
    let mut layer_caches = Vec::with_capacity(config.layers);

    for (k, layer) in params.layers.iter().enumerate() {
        let mut z = agg.apply(&h, config.arch, layer.xi);
        let mut subs = Vec::with_capacity(layer.linears.len());
        for (s, lin) in layer.linears.iter().enumerate() {
            let pre = lin.apply(&z)?;
            let (y, norm_cache) = match layer.norms.get(s) {
                Some(spec) if spec.kind != NormKind::None => {
                    let id = k * config.norms_per_layer() + s;
                    let state = running.as_deref_mut().map(|r| &mut r.0[id]);
                    let (y, c) = normalize_forward(&pre, &offsets, spec, state, mode)?;
                    (y, Some(c))
                }
                _ => (pre.clone(), None),
            };
            if !y.all_finite() {
                return Err(Error::NanActivation { layer: k });
            }
            let mask: Vec<bool> = y.data().iter().map(|v| *v > 0.0).collect();
            let mut act = y;
            act.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            subs.push(SublayerCache {
                input: z,
                pre_norm: pre,
                norm: norm_cache,
                activated_mask: mask,
            });
            z = act;
        }
        if config.residual && z.shape() == h.shape() {
            z = z.add(&h)?;
        }
        if !z.all_finite() {
            return Err(Error::NanActivation { layer: k });
        }
        layer_caches.push(LayerCache {
            input: std::mem::replace(&mut h, z),
            sublayers: subs,
        });
    }

    let readout = pool(&h, &offsets, config.readout);
    let logits = params.head.apply(&readout)?;
    if !logits.all_finite() {
        return Err(Error::NanActivation { layer: config.layers });
    }
    let cache = ForwardCache {
        fingerprint: params.fingerprint(),
        offsets,
        layers: layer_caches,
        readout,
        logits: logits.clone(),
        norms_per_layer: config.norms_per_layer(),
    };
    Ok((logits, cache))
}

fn pool(h: &DenseMatrix, offsets: &[usize], readout: Readout) -> DenseMatrix {
    let graphs = offsets.len() - 1;
    DenseMatrix::from_fn(h.rows(), graphs, |r, g| {
        let cols = offsets[g]..offsets[g + 1];
        let sum: f64 = h.row(r)[cols.clone()].iter().sum();
        match readout {
            Readout::Sum => sum,
            Readout::Mean => sum / cols.len() as f64,
        }
    })
}

fn log_softmax(column: &[f64]) -> Vec<f64> {
    let max = column.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + column.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    column.iter().map(|v| v - lse).collect()
}

/// Mean cross-entropy of `logits` (`classes × graphs`) against `labels`.
pub fn cross_entropy(logits: &DenseMatrix, labels: &[usize]) -> Result<f64> {
    check_labels(logits, labels)?;
    let total: f64 = (0..logits.cols())
        .map(|g| -log_softmax(&logits.column(g))[labels[g]])
        .sum();
    Ok(total / labels.len() as f64)
}

fn check_labels(logits: &DenseMatrix, labels: &[usize]) -> Result<()> {
    if labels.len() != logits.cols() {
        return Err(Error::DimensionMismatch {
            op: "cross_entropy",
            left: logits.shape(),
            right: (labels.len(), 1),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= logits.rows()) {
        return Err(Error::InvalidModel(format!("label {bad} out of range for {} classes", logits.rows())));
    }
    Ok(())
}

/// Loss and gradients of the mean cross-entropy with respect to every
/// parameter, using the activations from [`forward`] on the same inputs.
///
/// The `ξ` gradient is always reported; the optimizer ignores it when
/// `xi_learnable` is off.
pub fn backward(
    params: &ModelParams,
    config: &ModelConfig,
    batch: &GraphBatch,
    labels: &[usize],
    cache: &ForwardCache,
) -> Result<(f64, ModelParams)> {
    if cache.fingerprint != params.fingerprint() || cache.offsets != batch.offsets() || cache.layers.len() != config.layers {
        return Err(Error::StaleCache("forward cache was produced for different parameters or inputs".into()));
    }
    check_labels(&cache.logits, labels)?;
    let graphs = labels.len();
    let mut grads = params.zeros_like();

    let mut loss = 0.0;
    let mut dlogits = DenseMatrix::zeros(cache.logits.rows(), graphs);
    for (g, &label) in labels.iter().enumerate() {
        let logp = log_softmax(&cache.logits.column(g));
        loss -= logp[label];
        for (c, lp) in logp.iter().enumerate() {
            let target = if c == label { 1.0 } else { 0.0 };
            dlogits[(c, g)] = (lp.exp() - target) / graphs as f64;
        }
    }
    loss /= graphs as f64;

    grads.head.weight = matmul(&dlogits, &cache.readout.transpose())?;
    grads.head.bias = (0..dlogits.rows()).map(|c| dlogits.row(c).iter().sum()).collect();
    let dreadout = matmul(&params.head.weight.transpose(), &dlogits)?;

    let offsets = &cache.offsets;
    let mut dh = DenseMatrix::zeros(config.hidden_dim, batch.total_nodes());
    for g in 0..graphs {
        let cols = offsets[g]..offsets[g + 1];
        let scale = match config.readout {
            Readout::Sum => 1.0,
            Readout::Mean => 1.0 / cols.len() as f64,
        };
        for r in 0..dh.rows() {
            let v = dreadout[(r, g)] * scale;
            dh.row_mut(r)[cols.clone()].iter_mut().for_each(|x| *x = v);
        }
    }

    let agg = Aggregation::new(batch);
    for (k, (layer, lc)) in params.layers.iter().zip(&cache.layers).enumerate().rev() {
        let residual = config.residual && lc.input.shape() == dh.shape();
        let mut dz = dh.clone();
        for (s, sc) in lc.sublayers.iter().enumerate().rev() {
            let mut dy = dz;
            for (v, &on) in dy.data_mut().iter_mut().zip(&sc.activated_mask) {
                if !on {
                    *v = 0.0;
                }
            }
            let dpre = match (&sc.norm, layer.norms.get(s)) {
                (Some(nc), Some(spec)) => {
                    let (dpre, ng) = normalize_backward(&dy, nc, spec)?;
                    let target = &mut grads.layers[k].norms[s];
                    target.gamma = ng.gamma;
                    target.beta = ng.beta;
                    target.alpha = ng.alpha;
                    dpre
                }
                _ => dy,
            };
            let lin = &layer.linears[s];
            grads.layers[k].linears[s].weight = matmul(&dpre, &sc.input.transpose())?;
            grads.layers[k].linears[s].bias = (0..dpre.rows()).map(|r| dpre.row(r).iter().sum()).collect();
            dz = matmul(&lin.weight.transpose(), &dpre)?;
        }
        // dz is now the gradient with respect to H·Q
        if config.arch == Arch::Gin {
            grads.layers[k].xi = dz.data().iter().zip(lc.input.data()).map(|(a, b)| a * b).sum();
        }
        let mut dinput = agg.apply(&dz, config.arch, layer.xi);
        if residual {
            dinput = dinput.add(&dh)?;
        }
        dh = dinput;
    }
    Ok((loss, grads))
}

#[cfg(test)]
mod tests;
