//! Aggregation matrices, the mean-shift projector and the normalization
//! layers (batch, layer, instance and graph scopes).
//!
//! Feature matrices are `d × N` with one column per node; a batch of graphs
//! occupies consecutive column ranges given by its offsets.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::graph::GraphBatch;
use crate::linalg::{matmul, DenseMatrix};

/// `D̂^{-1/2} (A + I) D̂^{-1/2}` with `D̂` the degree matrix of `A + I`.
pub fn q_gcn(a: &DenseMatrix) -> DenseMatrix {
    let n = a.rows();
    let scale: Vec<f64> = (0..n)
        .map(|i| 1.0 / (a.row(i).iter().sum::<f64>() + 1.0).sqrt())
        .collect();
    DenseMatrix::from_fn(n, n, |i, j| {
        let a_hat = a[(i, j)] + if i == j { 1.0 } else { 0.0 };
        scale[i] * a_hat * scale[j]
    })
}

/// `A + (1 + ξ) I`.
pub fn q_gin(a: &DenseMatrix, xi: f64) -> DenseMatrix {
    let n = a.rows();
    DenseMatrix::from_fn(n, n, |i, j| a[(i, j)] + if i == j { 1.0 + xi } else { 0.0 })
}

/// `I − (1/n) 𝟙𝟙ᵀ`; right-multiplying subtracts each row's mean.
pub fn shift_matrix(n: usize) -> DenseMatrix {
    let inv = 1.0 / n as f64;
    DenseMatrix::from_fn(n, n, |i, j| if i == j { 1.0 - inv } else { -inv })
}

/// `S · (M N)` for a single graph, with `S = diag(1/σ_i)` and `σ_i` the
/// ε-stabilized standard deviation of row `i` of `M N`. Rows that are
/// exactly zero after the shift are left unscaled.
pub fn apply_shift_scale(m: &DenseMatrix, epsilon: f64) -> Result<DenseMatrix> {
    let n = m.cols();
    let mut shifted = matmul(m, &shift_matrix(n))?;
    for i in 0..shifted.rows() {
        let row = shifted.row_mut(i);
        if row.iter().all(|v| *v == 0.0) {
            continue;
        }
        let var = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + epsilon).sqrt();
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    Ok(shifted)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NormKind {
    None,
    Batch,
    Layer,
    Instance,
    Graph,
}

impl NormKind {
    pub const ALL: [NormKind; 5] = [
        NormKind::None,
        NormKind::Batch,
        NormKind::Layer,
        NormKind::Instance,
        NormKind::Graph,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NormKind::None => "none",
            NormKind::Batch => "batch",
            NormKind::Layer => "layer",
            NormKind::Instance => "instance",
            NormKind::Graph => "graph",
        }
    }
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NormKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        NormKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown norm kind '{s}'"))
    }
}

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// Normalization kind plus its per-feature affine parameters.
///
/// `alpha` is the learnable shift coefficient and is only populated for
/// [`NormKind::Graph`].
#[derive(Debug, Clone, PartialEq)]
pub struct NormSpec {
    pub kind: NormKind,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub epsilon: f64,
}

impl NormSpec {
    /// `γ = 1`, `β = 0`, `α = 1`, `ε = 1e-5`.
    pub fn new(kind: NormKind, dim: usize) -> Self {
        Self {
            kind,
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            alpha: if kind == NormKind::Graph { vec![1.0; dim] } else { Vec::new() },
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha.iter_mut().for_each(|a| *a = alpha);
        self
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidNorm(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        let alpha_len = if self.kind == NormKind::Graph { dim } else { 0 };
        if self.gamma.len() != dim || self.beta.len() != dim || self.alpha.len() != alpha_len {
            return Err(Error::InvalidNorm(format!(
                "parameter lengths (gamma {}, beta {}, alpha {}) do not match feature dimension {dim}",
                self.gamma.len(),
                self.beta.len(),
                self.alpha.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
}

impl BatchNormState {
    pub fn new(dim: usize) -> Self {
        Self {
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            momentum: DEFAULT_MOMENTUM,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One set of entries sharing a mean and a standard deviation.
#[derive(Debug, Clone)]
struct Group {
    rows: Range<usize>,
    cols: Range<usize>,
    mean: f64,
    inv_std: f64,
    alpha: f64,
}

impl Group {
    fn size(&self) -> f64 {
        (self.rows.len() * self.cols.len()) as f64
    }
}

/// Everything the backward pass needs from a forward normalization.
#[derive(Debug, Clone)]
pub struct NormCache {
    kind: NormKind,
    shape: (usize, usize),
    xhat: DenseMatrix,
    groups: Vec<Group>,
    frozen_stats: bool,
}

impl NormCache {
    /// Normalized values before the affine step.
    pub fn xhat(&self) -> &DenseMatrix {
        &self.xhat
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormGrads {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
}

fn scopes(kind: NormKind, dim: usize, offsets: &[usize]) -> Vec<(Range<usize>, Range<usize>)> {
    let total = *offsets.last().unwrap_or(&0);
    match kind {
        NormKind::None => Vec::new(),
        NormKind::Batch => (0..dim).map(|j| (j..j + 1, 0..total)).collect(),
        NormKind::Layer => (0..total).map(|i| (0..dim, i..i + 1)).collect(),
        NormKind::Instance | NormKind::Graph => offsets
            .windows(2)
            .flat_map(|w| (0..dim).map(move |j| (j..j + 1, w[0]..w[1])))
            .collect(),
    }
}

fn check_offsets(h: &DenseMatrix, offsets: &[usize]) -> Result<()> {
    let valid = offsets.first() == Some(&0)
        && offsets.windows(2).all(|w| w[0] < w[1])
        && offsets.last() == Some(&h.cols());
    if valid {
        Ok(())
    } else {
        Err(Error::InvalidNorm(format!(
            "batch offsets {:?} do not partition {} columns",
            offsets,
            h.cols()
        )))
    }
}

/// Forward normalization over explicit column offsets.
///
/// In train mode a batch norm uses batch statistics and, when `state` is
/// given, folds them into the running statistics. In eval mode it reads the
/// running statistics and `state` is required.
pub fn normalize_forward(
    h: &DenseMatrix,
    offsets: &[usize],
    spec: &NormSpec,
    state: Option<&mut BatchNormState>,
    mode: Mode,
) -> Result<(DenseMatrix, NormCache)> {
    check_offsets(h, offsets)?;
    let dim = h.rows();
    if spec.kind == NormKind::None {
        let cache = NormCache {
            kind: NormKind::None,
            shape: h.shape(),
            xhat: h.clone(),
            groups: Vec::new(),
            frozen_stats: false,
        };
        return Ok((h.clone(), cache));
    }
    spec.validate(dim)?;

    let frozen = spec.kind == NormKind::Batch && mode == Mode::Eval;
    let mut xhat = DenseMatrix::zeros(dim, h.cols());
    let mut groups = Vec::new();

    if frozen {
        let state = state.ok_or_else(|| Error::InvalidNorm("eval-mode batch norm needs running statistics".into()))?;
        if state.running_mean.len() != dim || state.running_var.len() != dim {
            return Err(Error::InvalidNorm("running statistics have wrong length".into()));
        }
        for j in 0..dim {
            let mean = state.running_mean[j];
            let inv_std = 1.0 / (state.running_var[j] + spec.epsilon).sqrt();
            for (x, out) in h.row(j).iter().zip(xhat.row_mut(j)) {
                *out = (x - mean) * inv_std;
            }
            groups.push(Group {
                rows: j..j + 1,
                cols: 0..h.cols(),
                mean,
                inv_std,
                alpha: 1.0,
            });
        }
    } else {
        let mut batch_stats = Vec::new();
        for (rows, cols) in scopes(spec.kind, dim, offsets) {
            let alpha = if spec.kind == NormKind::Graph { spec.alpha[rows.start] } else { 1.0 };
            let count = (rows.len() * cols.len()) as f64;
            let mut sum = 0.0;
            for r in rows.clone() {
                sum += h.row(r)[cols.clone()].iter().sum::<f64>();
            }
            let mean = sum / count;
            let shift = alpha * mean;
            let mut sq = 0.0;
            for r in rows.clone() {
                sq += h.row(r)[cols.clone()].iter().map(|x| (x - shift) * (x - shift)).sum::<f64>();
            }
            let var = sq / count;
            let inv_std = 1.0 / (var + spec.epsilon).sqrt();
            for r in rows.clone() {
                let src = &h.row(r)[cols.clone()];
                let dst = &mut xhat.row_mut(r)[cols.clone()];
                for (o, x) in dst.iter_mut().zip(src) {
                    *o = (x - shift) * inv_std;
                }
            }
            if spec.kind == NormKind::Batch {
                batch_stats.push((mean, var));
            }
            groups.push(Group {
                rows,
                cols,
                mean,
                inv_std,
                alpha,
            });
        }
        if let Some(state) = state.filter(|_| spec.kind == NormKind::Batch) {
            let m = state.momentum;
            for (j, (mean, var)) in batch_stats.into_iter().enumerate() {
                state.running_mean[j] = (1.0 - m) * state.running_mean[j] + m * mean;
                state.running_var[j] = (1.0 - m) * state.running_var[j] + m * var;
            }
        }
    }

    let mut out = xhat.clone();
    for j in 0..dim {
        let (g, b) = (spec.gamma[j], spec.beta[j]);
        for v in out.row_mut(j) {
            *v = g * *v + b;
        }
    }
    let cache = NormCache {
        kind: spec.kind,
        shape: h.shape(),
        xhat,
        groups,
        frozen_stats: frozen,
    };
    Ok((out, cache))
}

/// Normalizes `h` (one column per node of `batch`).
pub fn normalize(
    h: &DenseMatrix,
    batch: &GraphBatch,
    spec: &NormSpec,
    state: Option<&mut BatchNormState>,
    mode: Mode,
) -> Result<DenseMatrix> {
    if h.cols() != batch.total_nodes() {
        return Err(Error::DimensionMismatch {
            op: "normalize",
            left: h.shape(),
            right: (batch.feature_dim(), batch.total_nodes()),
        });
    }
    normalize_forward(h, batch.offsets(), spec, state, mode).map(|(out, _)| out)
}

/// Gradient of the loss with respect to the normalization input and its
/// parameters, given the gradient with respect to the output.
pub fn normalize_backward(grad_out: &DenseMatrix, cache: &NormCache, spec: &NormSpec) -> Result<(DenseMatrix, NormGrads)> {
    if grad_out.shape() != cache.shape || spec.kind != cache.kind {
        return Err(Error::StaleCache(format!(
            "gradient {:?} / kind {} does not match cached {:?} / {}",
            grad_out.shape(),
            spec.kind,
            cache.shape,
            cache.kind
        )));
    }
    let dim = cache.shape.0;
    if cache.kind == NormKind::None {
        let empty = NormGrads {
            gamma: Vec::new(),
            beta: Vec::new(),
            alpha: Vec::new(),
        };
        return Ok((grad_out.clone(), empty));
    }
    let mut grads = NormGrads {
        gamma: vec![0.0; dim],
        beta: vec![0.0; dim],
        alpha: if cache.kind == NormKind::Graph { vec![0.0; dim] } else { Vec::new() },
    };
    for j in 0..dim {
        for (dy, xh) in grad_out.row(j).iter().zip(cache.xhat.row(j)) {
            grads.gamma[j] += dy * xh;
            grads.beta[j] += dy;
        }
    }

    let mut grad_in = DenseMatrix::zeros(dim, cache.shape.1);
    for group in &cache.groups {
        let r = group.inv_std;
        if cache.frozen_stats {
            for row in group.rows.clone() {
                let g = spec.gamma[row];
                for c in group.cols.clone() {
                    grad_in[(row, c)] = grad_out[(row, c)] * g * r;
                }
            }
            continue;
        }
        let m = group.size();
        let mut sum_gx = 0.0;
        for row in group.rows.clone() {
            let g = spec.gamma[row];
            for c in group.cols.clone() {
                sum_gx += grad_out[(row, c)] * g * cache.xhat[(row, c)];
            }
        }
        // gradient with respect to the shifted values, stored in place
        let mut sum_ds = 0.0;
        for row in group.rows.clone() {
            let g = spec.gamma[row];
            for c in group.cols.clone() {
                let ds = r * grad_out[(row, c)] * g - (r / m) * cache.xhat[(row, c)] * sum_gx;
                grad_in[(row, c)] = ds;
                sum_ds += ds;
            }
        }
        let correction = group.alpha * sum_ds / m;
        for row in group.rows.clone() {
            for c in group.cols.clone() {
                grad_in[(row, c)] -= correction;
            }
        }
        if cache.kind == NormKind::Graph {
            grads.alpha[group.rows.start] -= group.mean * sum_ds;
        }
    }
    Ok((grad_in, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{adjacency, make_complete_graph, make_er_graph, one_hot_degree_features, Graph};
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut r = rng::seeded(seed);
        DenseMatrix::from_fn(rows, cols, |_, _| r.random_range(-2.0..2.0))
    }

    fn random_spec(kind: NormKind, dim: usize, seed: u64) -> NormSpec {
        let mut r = rng::seeded(seed);
        let mut spec = NormSpec::new(kind, dim);
        spec.gamma.iter_mut().for_each(|g| *g = r.random_range(0.5..1.5));
        spec.beta.iter_mut().for_each(|b| *b = r.random_range(-0.5..0.5));
        spec.alpha.iter_mut().for_each(|a| *a = r.random_range(0.0..1.5));
        spec
    }

    fn offsets_for(sizes: &[usize]) -> Vec<usize> {
        let mut o = vec![0];
        for s in sizes {
            o.push(o.last().unwrap() + s);
        }
        o
    }

    #[test]
    fn q_gcn_examples() {
        let k3 = adjacency(&make_complete_graph(3).unwrap());
        let q = q_gcn(&k3);
        assert!(q.sub(&DenseMatrix::filled(3, 3, 1.0 / 3.0)).unwrap().max_abs() < 1e-15);
        assert_eq!(q_gcn(&DenseMatrix::zeros(1, 1)), DenseMatrix::identity(1));
        let p2 = DenseMatrix::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]);
        assert!(q_gcn(&p2).sub(&DenseMatrix::filled(2, 2, 0.5)).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn q_gin_examples() {
        let k3 = adjacency(&make_complete_graph(3).unwrap());
        assert_eq!(q_gin(&k3, 0.0), DenseMatrix::filled(3, 3, 1.0));
        assert_eq!(
            q_gin(&k3, 1.0),
            DenseMatrix::from_fn(3, 3, |i, j| if i == j { 2.0 } else { 1.0 })
        );
        assert_eq!(q_gin(&DenseMatrix::zeros(2, 2), 0.5), DenseMatrix::diag(&[1.5, 1.5]));
    }

    #[test]
    fn shift_matrix_examples() {
        assert_eq!(shift_matrix(1), DenseMatrix::zeros(1, 1));
        assert_eq!(shift_matrix(2), DenseMatrix::from_rows(&[&[0.5, -0.5], &[-0.5, 0.5]]));
    }

    #[test]
    fn shift_matrix_is_projector() {
        for n in 1..=12 {
            let nm = shift_matrix(n);
            assert_eq!(nm, nm.transpose());
            let sq = matmul(&nm, &nm).unwrap();
            assert!(sq.sub(&nm).unwrap().max_abs() <= 1e-12);
            let ones = vec![1.0; n];
            assert!(nm.matvec(&ones).unwrap().iter().all(|v| v.abs() <= 1e-12));
            let s = crate::linalg::singular_values(&nm).unwrap();
            let unit = s.values().iter().filter(|v| (*v - 1.0).abs() < 1e-10).count();
            let zero = s.values().iter().filter(|v| v.abs() < 1e-10).count();
            assert_eq!((unit, zero), (n - 1, 1));
        }
    }

    #[test]
    fn complete_graph_loses_structure_after_shift() {
        for n in 2..=12 {
            let a = adjacency(&make_complete_graph(n).unwrap());
            for xi in [0.0, 0.3, 1.0] {
                let lhs = matmul(&q_gin(&a, xi), &shift_matrix(n)).unwrap();
                let rhs = shift_matrix(n).scale(xi);
                assert!(lhs.sub(&rhs).unwrap().frobenius_norm() <= 1e-12, "n={n} xi={xi}");
            }
        }
    }

    #[test]
    fn instance_norm_hand_example() {
        let h = DenseMatrix::from_rows(&[&[1.0, 2.0, 3.0]]);
        // epsilon far below the resolution of sigma^2 = 2/3
        let spec = NormSpec::new(NormKind::Instance, 1).with_epsilon(1e-300);
        let (out, _) = normalize_forward(&h, &[0, 3], &spec, None, Mode::Train).unwrap();
        let expected = [-1.224744871391589, 0.0, 1.224744871391589];
        for (o, e) in out.row(0).iter().zip(expected) {
            assert!((o - e).abs() < 1e-12, "{o} vs {e}");
        }
    }

    #[test]
    fn graph_norm_zeroes_regular_first_layer() {
        let k3 = make_complete_graph(3).unwrap();
        let x = one_hot_degree_features(&k3, 3).unwrap();
        let q = q_gin(&adjacency(&k3), 0.0);
        let w = random(5, 4, 3);
        let pre = matmul(&matmul(&w, &x).unwrap(), &q).unwrap();
        let spec = NormSpec::new(NormKind::Graph, 5);
        let (out, _) = normalize_forward(&pre, &[0, 3], &spec, None, Mode::Train).unwrap();
        assert!(out.max_abs() < 1e-12, "{out:?}");
    }

    #[test]
    fn graph_norm_without_shift_has_unit_second_moment() {
        let h = random(4, 7, 8);
        let spec = NormSpec::new(NormKind::Graph, 4).with_alpha(0.0);
        let (out, _) = normalize_forward(&h, &[0, 3, 7], &spec, None, Mode::Train).unwrap();
        for j in 0..4 {
            for (lo, hi) in [(0, 3), (3, 7)] {
                let raw = h.row(j)[lo..hi].iter().map(|v| v * v).sum::<f64>() / (hi - lo) as f64;
                let m2 = out.row(j)[lo..hi].iter().map(|v| v * v).sum::<f64>() / (hi - lo) as f64;
                // exactly raw / (raw + eps)
                assert!((m2 - raw / (raw + DEFAULT_EPSILON)).abs() < 1e-12);
                assert!((m2 - 1.0).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn graph_norm_variance_is_taken_around_shifted_mean() {
        let h = DenseMatrix::from_rows(&[&[1.0, 2.0, 6.0]]);
        let spec = NormSpec::new(NormKind::Graph, 1).with_alpha(0.5).with_epsilon(1e-300);
        let (out, _) = normalize_forward(&h, &[0, 3], &spec, None, Mode::Train).unwrap();
        // mean 3, shift 1.5: shifted values -0.5, 0.5, 4.5, second moment 83/12
        let sigma = (83.0_f64 / 12.0).sqrt();
        for (o, s) in out.row(0).iter().zip([-0.5, 0.5, 4.5]) {
            assert!((o - s / sigma).abs() < 1e-12);
        }
    }

    #[test]
    fn single_node_graph_outputs_beta() {
        let h = DenseMatrix::from_rows(&[&[3.0], &[-1.0]]);
        for kind in [NormKind::Instance, NormKind::Graph] {
            let mut spec = NormSpec::new(kind, 2);
            spec.beta = vec![0.25, -0.75];
            let (out, _) = normalize_forward(&h, &[0, 1], &spec, None, Mode::Train).unwrap();
            assert_eq!(out.column(0), vec![0.25, -0.75]);
        }
    }

    #[test]
    fn batch_norm_single_graph_equals_instance() {
        let h = random(3, 6, 12);
        let batch = crate::graph::GraphBatch::new(vec![make_er_graph(6, 0.5, 1).unwrap().with_features(random(3, 6, 1)).unwrap()]).unwrap();
        let b = normalize(&h, &batch, &NormSpec::new(NormKind::Batch, 3), None, Mode::Train).unwrap();
        let i = normalize(&h, &batch, &NormSpec::new(NormKind::Instance, 3), None, Mode::Train).unwrap();
        assert!(b.sub(&i).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn batch_norm_running_stats_and_eval() {
        let h = random(2, 5, 4);
        let spec = NormSpec::new(NormKind::Batch, 2);
        let mut state = BatchNormState::new(2);
        normalize_forward(&h, &[0, 2, 5], &spec, Some(&mut state), Mode::Train).unwrap();
        let mean0 = h.row(0).iter().sum::<f64>() / 5.0;
        assert!((state.running_mean[0] - 0.1 * mean0).abs() < 1e-15);
        assert!(state.running_var.iter().all(|v| *v >= 0.0));
        let (out, _) = normalize_forward(&h, &[0, 2, 5], &spec, Some(&mut state.clone()), Mode::Eval).unwrap();
        let expect = (h[(0, 0)] - state.running_mean[0]) / (state.running_var[0] + DEFAULT_EPSILON).sqrt();
        assert!((out[(0, 0)] - expect).abs() < 1e-15);
        assert!(normalize_forward(&h, &[0, 2, 5], &spec, None, Mode::Eval).is_err());
    }

    #[test]
    fn layer_norm_normalizes_each_column() {
        let h = random(6, 4, 77);
        let spec = NormSpec::new(NormKind::Layer, 6).with_epsilon(1e-300);
        let (out, _) = normalize_forward(&h, &[0, 4], &spec, None, Mode::Train).unwrap();
        for c in 0..4 {
            let col = out.column(c);
            let mean = col.iter().sum::<f64>() / 6.0;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 6.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_offsets_and_params() {
        let h = random(2, 4, 1);
        let spec = NormSpec::new(NormKind::Instance, 2);
        assert!(normalize_forward(&h, &[0, 3], &spec, None, Mode::Train).is_err());
        assert!(normalize_forward(&h, &[0, 2, 2, 4], &spec, None, Mode::Train).is_err());
        let bad = NormSpec::new(NormKind::Instance, 3);
        assert!(normalize_forward(&h, &[0, 4], &bad, None, Mode::Train).is_err());
        let zero_eps = NormSpec::new(NormKind::Instance, 2).with_epsilon(0.0);
        assert!(normalize_forward(&h, &[0, 4], &zero_eps, None, Mode::Train).is_err());
    }

    #[test]
    fn shift_scale_matches_instance_norm() {
        for seed in 0..20 {
            let g: Graph = make_er_graph(9, 0.4, seed).unwrap();
            let x = random(4, 9, seed + 100);
            let w = random(5, 4, seed + 200);
            let pre = matmul(&matmul(&w, &x).unwrap(), &q_gin(&adjacency(&g), 0.2)).unwrap();
            let spec = NormSpec::new(NormKind::Instance, 5);
            let (inst, _) = normalize_forward(&pre, &[0, 9], &spec, None, Mode::Train).unwrap();
            let matrix_form = apply_shift_scale(&pre, spec.epsilon).unwrap();
            assert!(inst.sub(&matrix_form).unwrap().max_abs() <= 1e-9);
        }
    }

    /// Central differences of `L = Σ R ∘ normalize(h)` against the analytic backward.
    fn check_backward(kind: NormKind, mode: Mode, seed: u64) {
        let sizes = [3, 1, 5];
        let offsets = offsets_for(&sizes);
        let h = random(4, 9, seed);
        let weights = random(4, 9, seed + 1);
        let spec = random_spec(kind, 4, seed + 2);
        let state = BatchNormState {
            running_mean: vec![0.3, -0.2, 0.1, 0.0],
            running_var: vec![1.5, 0.7, 2.0, 1.0],
            momentum: 0.1,
        };
        let loss = |h: &DenseMatrix, spec: &NormSpec| {
            let (out, _) = normalize_forward(h, &offsets, spec, Some(&mut state.clone()), mode).unwrap();
            out.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, cache) = normalize_forward(&h, &offsets, &spec, Some(&mut state.clone()), mode).unwrap();
        let (grad_in, grads) = normalize_backward(&weights, &cache, &spec).unwrap();
        let step = 1e-6;
        let close = |a: f64, n: f64| (a - n).abs() <= 1e-6 * (1.0 + a.abs().max(n.abs()));
        for idx in 0..h.data().len() {
            let mut plus = h.clone();
            plus.data_mut()[idx] += step;
            let mut minus = h.clone();
            minus.data_mut()[idx] -= step;
            let numeric = (loss(&plus, &spec) - loss(&minus, &spec)) / (2.0 * step);
            assert!(close(grad_in.data()[idx], numeric), "{kind} input {idx}: {} vs {numeric}", grad_in.data()[idx]);
        }
        let params: [(&str, &Vec<f64>, fn(&mut NormSpec) -> &mut Vec<f64>); 3] = [
            ("gamma", &grads.gamma, |s| &mut s.gamma),
            ("beta", &grads.beta, |s| &mut s.beta),
            ("alpha", &grads.alpha, |s| &mut s.alpha),
        ];
        for (name, analytic, field) in params {
            for j in 0..analytic.len() {
                let mut plus = spec.clone();
                field(&mut plus)[j] += step;
                let mut minus = spec.clone();
                field(&mut minus)[j] -= step;
                let numeric = (loss(&h, &plus) - loss(&h, &minus)) / (2.0 * step);
                assert!(close(analytic[j], numeric), "{kind} {name}[{j}]: {} vs {numeric}", analytic[j]);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in [1, 2, 3] {
            for kind in NormKind::ALL {
                check_backward(kind, Mode::Train, seed * 10);
            }
            check_backward(NormKind::Batch, Mode::Eval, seed * 10);
        }
    }

    #[test]
    fn backward_rejects_mismatched_cache() {
        let h = random(2, 4, 1);
        let spec = NormSpec::new(NormKind::Instance, 2);
        let (_, cache) = normalize_forward(&h, &[0, 4], &spec, None, Mode::Train).unwrap();
        assert!(normalize_backward(&random(2, 5, 2), &cache, &spec).is_err());
        assert!(normalize_backward(&h, &cache, &NormSpec::new(NormKind::Graph, 2)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn graph_norm_at_unit_alpha_equals_instance(seed in 0u64..10_000, sizes in proptest::collection::vec(1usize..8, 1..6), dim in 1usize..6) {
            let offsets = offsets_for(&sizes);
            let h = random(dim, *offsets.last().unwrap(), seed);
            let inst = random_spec(NormKind::Instance, dim, seed + 1);
            let mut graph = NormSpec::new(NormKind::Graph, dim);
            graph.gamma = inst.gamma.clone();
            graph.beta = inst.beta.clone();
            let (a, _) = normalize_forward(&h, &offsets, &inst, None, Mode::Train).unwrap();
            let (b, _) = normalize_forward(&h, &offsets, &graph, None, Mode::Train).unwrap();
            prop_assert!(a.sub(&b).unwrap().max_abs() <= 1e-12);
        }
    }
}
