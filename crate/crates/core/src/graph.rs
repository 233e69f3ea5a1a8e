//! Undirected simple graphs, batches, structural matrices and generators.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::rng;

/// A simple undirected graph with node features stored as columns (`d × n`).
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    n: usize,
    edges: Vec<(usize, usize)>,
    node_features: DenseMatrix,
    label: usize,
}

impl Graph {
    /// Edges are normalized to `(lo, hi)` and sorted. Self-loops, duplicates
    /// and out-of-range endpoints are rejected.
    pub fn new(n: usize, edges: Vec<(usize, usize)>, node_features: DenseMatrix, label: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidGraph("graph must have at least one node".into()));
        }
        if node_features.cols() != n {
            return Err(Error::InvalidGraph(format!(
                "feature matrix has {} columns for {} nodes",
                node_features.cols(),
                n
            )));
        }
        let mut seen = BTreeSet::new();
        for &(a, b) in &edges {
            if a >= n || b >= n {
                return Err(Error::InvalidGraph(format!("edge ({a}, {b}) out of range for n={n}")));
            }
            if a == b {
                return Err(Error::InvalidGraph(format!("self-loop at node {a}")));
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(Error::InvalidGraph(format!("duplicate edge ({a}, {b})")));
            }
        }
        Ok(Self {
            n,
            edges: seen.into_iter().collect(),
            node_features,
            label,
        })
    }

    /// Graph whose features are the one-hot degree encoding at its own max degree.
    pub fn from_edges(n: usize, edges: Vec<(usize, usize)>, label: usize) -> Result<Self> {
        let placeholder = DenseMatrix::zeros(1, n);
        let g = Self::new(n, edges, placeholder, label)?;
        let max_degree = g.degrees().into_iter().max().unwrap_or(0);
        let features = one_hot_degree_features(&g, max_degree)?;
        Ok(Self {
            node_features: features,
            ..g
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn node_features(&self) -> &DenseMatrix {
        &self.node_features
    }

    pub fn feature_dim(&self) -> usize {
        self.node_features.rows()
    }

    pub fn label(&self) -> usize {
        self.label
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = label;
        self
    }

    pub fn with_features(self, features: DenseMatrix) -> Result<Self> {
        Self::new(self.n, self.edges, features, self.label)
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n];
        for &(a, b) in &self.edges {
            deg[a] += 1;
            deg[b] += 1;
        }
        deg
    }

    /// Sorted neighbor lists.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    /// Relabels nodes: node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n {
            return Err(Error::InvalidGraph("permutation length mismatch".into()));
        }
        let edges = self.edges.iter().map(|&(a, b)| (perm[a], perm[b])).collect();
        let mut features = DenseMatrix::zeros(self.feature_dim(), self.n);
        for i in 0..self.n {
            for r in 0..self.feature_dim() {
                features[(r, perm[i])] = self.node_features[(r, i)];
            }
        }
        Self::new(self.n, edges, features, self.label)
    }
}

/// Several graphs laid out side by side: node columns of graph `g` occupy
/// `offsets[g]..offsets[g + 1]`.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    graphs: Vec<Graph>,
    offsets: Vec<usize>,
}

impl GraphBatch {
    pub fn new(graphs: Vec<Graph>) -> Result<Self> {
        let first = graphs
            .first()
            .ok_or_else(|| Error::InvalidGraph("empty batch".into()))?;
        let dim = first.feature_dim();
        if let Some(g) = graphs.iter().find(|g| g.feature_dim() != dim) {
            return Err(Error::InvalidGraph(format!(
                "feature dimension {} differs from batch dimension {}",
                g.feature_dim(),
                dim
            )));
        }
        let mut offsets = Vec::with_capacity(graphs.len() + 1);
        offsets.push(0);
        for g in &graphs {
            offsets.push(offsets.last().unwrap() + g.n());
        }
        Ok(Self { graphs, offsets })
    }

    pub fn from_refs(graphs: &[&Graph]) -> Result<Self> {
        Self::new(graphs.iter().map(|g| (*g).clone()).collect())
    }

    pub fn graphs(&self) -> &[Graph] {
        &self.graphs
    }

    /// Prefix sums starting at 0; `offsets()[len()] == total_nodes()`.
    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn total_nodes(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn feature_dim(&self) -> usize {
        self.graphs[0].feature_dim()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.graphs.iter().map(Graph::label).collect()
    }

    /// Node features of all graphs concatenated column-wise.
    pub fn features(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.feature_dim(), self.total_nodes());
        for (g, graph) in self.graphs.iter().enumerate() {
            let off = self.offsets[g];
            let x = graph.node_features();
            for r in 0..x.rows() {
                for c in 0..x.cols() {
                    out[(r, off + c)] = x[(r, c)];
                }
            }
        }
        out
    }
}

pub fn adjacency(g: &Graph) -> DenseMatrix {
    let mut a = DenseMatrix::zeros(g.n(), g.n());
    for &(i, j) in g.edges() {
        a[(i, j)] = 1.0;
        a[(j, i)] = 1.0;
    }
    a
}

pub fn degree_matrix(a: &DenseMatrix) -> DenseMatrix {
    let d: Vec<f64> = (0..a.rows()).map(|i| a.row(i).iter().sum()).collect();
    DenseMatrix::diag(&d)
}

/// `(max_degree + 1) × n` matrix whose column `i` is `e_{deg(i)}`.
pub fn one_hot_degree_features(g: &Graph, max_degree: usize) -> Result<DenseMatrix> {
    let mut x = DenseMatrix::zeros(max_degree + 1, g.n());
    for (node, degree) in g.degrees().into_iter().enumerate() {
        if degree > max_degree {
            return Err(Error::DegreeOverflow {
                node,
                degree,
                max_degree,
            });
        }
        x[(degree, node)] = 1.0;
    }
    Ok(x)
}

/// Replaces every graph's features with the one-hot degree encoding at the
/// set-wide maximum degree.
pub fn assign_degree_features(graphs: Vec<Graph>) -> Result<Vec<Graph>> {
    let max_degree = graphs
        .iter()
        .flat_map(|g| g.degrees())
        .max()
        .unwrap_or(0);
    graphs
        .into_iter()
        .map(|g| {
            let x = one_hot_degree_features(&g, max_degree)?;
            g.with_features(x)
        })
        .collect()
}

pub fn make_complete_graph(n: usize) -> Result<Graph> {
    let edges = (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).collect();
    Graph::from_edges(n, edges, 0)
}

pub fn make_er_graph(n: usize, p: f64, seed: u64) -> Result<Graph> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Infeasible(format!("edge probability {p} outside [0, 1]")));
    }
    let mut r = rng::seeded(seed);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if r.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    Graph::from_edges(n, edges, 0)
}

const PAIRING_RETRIES: usize = 1000;

/// Random `r`-regular graph from the pairing model, falling back to a
/// circulant construction when rejection sampling keeps failing.
pub fn make_regular_graph(n: usize, r: usize, seed: u64) -> Result<Graph> {
    if r >= n {
        return Err(Error::Infeasible(format!("degree {r} must be below node count {n}")));
    }
    if !(n * r).is_multiple_of(2) {
        return Err(Error::Infeasible(format!("n*r = {} is odd", n * r)));
    }
    let mut rand = rng::seeded(seed);
    let mut stubs: Vec<usize> = (0..n).flat_map(|v| std::iter::repeat_n(v, r)).collect();
    'attempt: for _ in 0..PAIRING_RETRIES {
        stubs.shuffle(&mut rand);
        let mut seen = BTreeSet::new();
        for pair in stubs.chunks_exact(2) {
            let (a, b) = (pair[0].min(pair[1]), pair[0].max(pair[1]));
            if a == b || !seen.insert((a, b)) {
                continue 'attempt;
            }
        }
        return Graph::from_edges(n, seen.into_iter().collect(), 0);
    }
    log::debug!("pairing model exhausted for n={n}, r={r}; using circulant graph");
    circulant_regular(n, r)
}

fn circulant_regular(n: usize, r: usize) -> Result<Graph> {
    let mut edges = BTreeSet::new();
    for i in 0..n {
        for k in 1..=(r / 2) {
            let j = (i + k) % n;
            edges.insert((i.min(j), i.max(j)));
        }
        if r % 2 == 1 {
            // n is even here, so the antipodal matching is well defined
            let j = (i + n / 2) % n;
            edges.insert((i.min(j), i.max(j)));
        }
    }
    Graph::from_edges(n, edges.into_iter().collect(), 0)
}

/// Structural statistic separating the two classes of a synthetic set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClassRule {
    /// Class 0 is `degree`-regular, class 1 is `(degree + 1)`-regular; node
    /// counts are even and drawn from `min_nodes..=max_nodes`.
    Regular {
        degree: usize,
        min_nodes: usize,
        max_nodes: usize,
    },
    /// Erdős–Rényi graphs with edge density `p0` (class 0) or `p1` (class 1).
    ErDensity {
        p0: f64,
        p1: f64,
        min_nodes: usize,
        max_nodes: usize,
    },
}

/// Balanced two-class set with one-hot degree features at the set-wide max degree.
pub fn make_synthetic_classification_set(count: usize, rule: ClassRule, seed: u64) -> Result<Vec<Graph>> {
    let mut r = rng::seeded(seed);
    let mut graphs = Vec::with_capacity(count);
    for i in 0..count {
        let label = i % 2;
        let graph_seed = r.random::<u64>();
        let g = match rule {
            ClassRule::Regular {
                degree,
                min_nodes,
                max_nodes,
            } => {
                let lo = min_nodes.max(degree + 2);
                let sizes: Vec<usize> = (lo..=max_nodes).filter(|n| n % 2 == 0).collect();
                let n = *sizes
                    .get(r.random_range(0..sizes.len().max(1)))
                    .ok_or_else(|| Error::Infeasible("no even node count in range".into()))?;
                make_regular_graph(n, degree + label, graph_seed)?
            }
            ClassRule::ErDensity {
                p0,
                p1,
                min_nodes,
                max_nodes,
            } => {
                let n = r.random_range(min_nodes..=max_nodes);
                make_er_graph(n, if label == 0 { p0 } else { p1 }, graph_seed)?
            }
        };
        graphs.push(g.with_label(label));
    }
    assign_degree_features(graphs)
}
