//! Singular-value analysis of aggregation matrices before and after the
//! mean shift, plus the residual checks for regular and complete graphs.

use std::fmt;
use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{adjacency, make_complete_graph, make_regular_graph, one_hot_degree_features, Graph};
use crate::linalg::{matmul, singular_values, sym_eigen, DenseMatrix, Spectrum};
use crate::norm::{apply_shift_scale, q_gcn, q_gin, shift_matrix, DEFAULT_EPSILON};
use crate::rng;
use crate::svg::Chart;

/// Relative tolerance for interlacing, zero detection and positivity.
pub const RELATIVE_TOL: f64 = 1e-8;

/// Which aggregation matrix to build for a graph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Aggregator {
    Gcn,
    Gin { xi: f64 },
}

impl Aggregator {
    pub fn matrix(&self, g: &Graph) -> DenseMatrix {
        let a = adjacency(g);
        match *self {
            Aggregator::Gcn => q_gcn(&a),
            Aggregator::Gin { xi } => q_gin(&a, xi),
        }
    }
}

impl fmt::Display for Aggregator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Aggregator::Gcn => f.write_str("gcn"),
            Aggregator::Gin { xi } => write!(f, "gin(xi={xi})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumReport {
    pub graph_id: usize,
    pub arch: String,
    /// Singular values of `Q`.
    pub lambda: Spectrum,
    /// Singular values of `Q N`.
    pub mu: Spectrum,
    pub interlacing_ok: bool,
    pub zero_singular_present: bool,
    pub cond_q: f64,
    pub cond_qn: f64,
    /// Interlacing inequalities that hold with equality (within tolerance).
    pub equality_cases: usize,
    /// Equalities not explained by a right singular vector orthogonal to 𝟙.
    pub unexplained_equalities: usize,
}

impl SpectrumReport {
    pub fn n(&self) -> usize {
        self.lambda.len()
    }

    /// Whether `Q` itself has full rank (smallest singular value above the
    /// relative tolerance).
    pub fn q_nonsingular(&self) -> bool {
        self.lambda.min() > RELATIVE_TOL * self.lambda.max()
    }

    /// Whether shifting did not worsen the condition number (over positive
    /// singular values), allowing for round-off. Guaranteed when `Q` is
    /// nonsingular; a singular `Q` can lose, because the smallest positive
    /// singular value of `Q N` only has to exceed `λ_1 = 0`.
    pub fn condition_improved(&self) -> bool {
        self.cond_qn <= self.cond_q * (1.0 + 1e-9)
    }
}

fn condition(s: &Spectrum, threshold: f64) -> f64 {
    match s.min_positive(threshold) {
        Some(min) => s.max() / min,
        None => f64::INFINITY,
    }
}

/// Compares the singular values of `q` and `q·N`.
pub fn spectrum_report(q: &DenseMatrix) -> Result<SpectrumReport> {
    if !q.is_square() {
        return Err(Error::NotSquare {
            op: "spectrum_report",
            rows: q.rows(),
            cols: q.cols(),
        });
    }
    let n = q.rows();
    if n < 2 {
        return Err(Error::InvalidGraph(format!("spectrum needs at least 2 nodes, got {n}")));
    }
    let lambda = singular_values(q)?;
    let qn = matmul(q, &shift_matrix(n))?;
    let mu = singular_values(&qn)?;
    let tol = RELATIVE_TOL * lambda.max();

    let l = lambda.ascending();
    // the smallest singular value of QN is the one the shift forces to zero
    let m = &mu.ascending()[1..];
    let interlacing_ok = interlaces(&l, m, tol);
    let mut equalities = Vec::new();
    for i in 0..n - 1 {
        if (m[i] - l[i]).abs() <= tol {
            equalities.push(l[i]);
        }
        if (l[i + 1] - m[i]).abs() <= tol {
            equalities.push(l[i + 1]);
        }
    }
    let unexplained = if equalities.is_empty() {
        0
    } else {
        count_unexplained(q, &equalities, tol)?
    };
    if !equalities.is_empty() {
        log::debug!(
            "{} interlacing equalities, {} not attributable to a singular vector orthogonal to the ones vector",
            equalities.len(),
            unexplained
        );
    }
    Ok(SpectrumReport {
        graph_id: 0,
        arch: String::new(),
        zero_singular_present: mu.min() <= tol,
        cond_q: condition(&lambda, tol),
        cond_qn: condition(&mu, tol),
        lambda,
        mu,
        interlacing_ok,
        equality_cases: equalities.len(),
        unexplained_equalities: unexplained,
    })
}

/// `l[0] ≤ m[0] ≤ l[1] ≤ … ≤ m[n−2] ≤ l[n−1]` within `tol`, both ascending.
pub fn interlaces(l: &[f64], m: &[f64], tol: f64) -> bool {
    m.len() + 1 == l.len() && (0..m.len()).all(|i| l[i] <= m[i] + tol && m[i] <= l[i + 1] + tol)
}

/// An equality `λ = μ` is expected when some right singular vector for `λ`
/// is orthogonal to 𝟙: always possible if the singular space has dimension
/// at least two, otherwise checked directly.
fn count_unexplained(q: &DenseMatrix, values: &[f64], tol: f64) -> Result<usize> {
    let gram = matmul(&q.transpose(), q)?;
    let eig = sym_eigen(&gram)?;
    let n = q.rows();
    let mut unexplained = 0;
    for &value in values {
        let members: Vec<usize> = (0..n)
            .filter(|&j| (eig.values[j].max(0.0).sqrt() - value).abs() <= tol)
            .collect();
        let explained = match members.as_slice() {
            [] => false,
            [j] => eig.vectors.column(*j).iter().sum::<f64>().abs() <= 1e-6,
            _ => true,
        };
        if !explained {
            unexplained += 1;
        }
    }
    Ok(unexplained)
}

/// `‖S(W X Q) N‖_F` for an `r`-regular graph with one-hot degree features
/// (`r + 1` rows, so `w` needs `r + 1` columns). Rows that vanish after the
/// shift are not rescaled.
pub fn verify_regular_zero(n: usize, r: usize, xi: f64, w: &DenseMatrix, aggregator: RegularAggregation, seed: u64) -> Result<f64> {
    let g = make_regular_graph(n, r, seed)?;
    let x = one_hot_degree_features(&g, r)?;
    let q = match aggregator {
        RegularAggregation::Gin => q_gin(&adjacency(&g), xi),
        RegularAggregation::Gcn => q_gcn(&adjacency(&g)),
    };
    let m = matmul(&matmul(w, &x)?, &q)?;
    Ok(apply_shift_scale(&m, DEFAULT_EPSILON)?.frobenius_norm())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegularAggregation {
    Gin,
    Gcn,
}

/// `‖Q_GIN(K_n, ξ)·N − ξ·N‖_F`.
pub fn verify_complete_identity(n: usize, xi: f64) -> Result<f64> {
    let k = make_complete_graph(n)?;
    let nm = shift_matrix(n);
    let lhs = matmul(&q_gin(&adjacency(&k), xi), &nm)?;
    Ok(lhs.sub(&nm.scale(xi))?.frobenius_norm())
}

/// Reports for up to `sample_count` graphs drawn (seeded) from `graphs`,
/// skipping graphs with fewer than two nodes. Reports are ordered by the
/// graph's index in `graphs`.
pub fn dataset_spectrum_survey(graphs: &[Graph], aggregator: Aggregator, sample_count: usize, seed: u64) -> Result<Vec<SpectrumReport>> {
    let mut ids: Vec<usize> = (0..graphs.len()).filter(|&i| graphs[i].n() >= 2).collect();
    if ids.len() < graphs.len() {
        log::debug!("skipping {} graphs with fewer than two nodes", graphs.len() - ids.len());
    }
    if sample_count < ids.len() {
        ids.shuffle(&mut rng::seeded(seed));
        ids.truncate(sample_count);
        ids.sort_unstable();
    }
    ids.par_iter()
        .map(|&id| {
            let mut report = spectrum_report(&aggregator.matrix(&graphs[id]))?;
            report.graph_id = id;
            report.arch = aggregator.to_string();
            Ok(report)
        })
        .collect()
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:.10e}")).collect::<Vec<_>>().join(";")
}

/// CSV with columns `graph_id, n, arch, lambda, mu, cond_q, cond_qn,
/// interlacing_ok`; spectra are ';'-separated in descending order.
pub fn write_spectra_csv<W: Write>(reports: &[SpectrumReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["graph_id", "n", "arch", "lambda", "mu", "cond_q", "cond_qn", "interlacing_ok"])?;
    for r in reports {
        w.write_record([
            r.graph_id.to_string(),
            r.n().to_string(),
            r.arch.clone(),
            join(r.lambda.values()),
            join(r.mu.values()),
            format!("{:.10e}", r.cond_q),
            format!("{:.10e}", r.cond_qn),
            r.interlacing_ok.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Sorted singular values of `Q` (lines) and `Q N` (markers) for the first
/// `max_graphs` reports, against their rank.
pub fn spectra_chart(reports: &[SpectrumReport], max_graphs: usize) -> Chart {
    let mut chart = Chart::new("Singular values of Q and QN", "rank (ascending)", "singular value");
    for r in reports.iter().take(max_graphs) {
        let pts = |s: &Spectrum| s.ascending().into_iter().enumerate().map(|(i, v)| (i as f64, v)).collect();
        chart = chart
            .line(&format!("graph {} {} Q", r.graph_id, r.arch), pts(&r.lambda))
            .markers(&format!("graph {} {} QN", r.graph_id, r.arch), pts(&r.mu));
    }
    chart
}
