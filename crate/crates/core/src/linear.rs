//! Linear two-model testbed: least squares on "combined features" with and
//! without the mean shift, solved by gradient descent and compared against
//! the rates predicted by the effective condition number of each Gram
//! matrix.
//!
//! Each sample is `(X, Q, p, y)` with `Q = I`, `X = Y + E`, where `Y` is a
//! shared well-conditioned template and `E` is Gaussian noise with the
//! direction `v = Y^{-T}𝟙` projected out. The vanilla feature is `XQp`, the
//! shifted one `XQNp`, and labels come from the shifted model with a hidden
//! `w_true ⟂ v`.

use std::io::Write;

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{matmul, pseudoinverse, singular_values, sym_eigen, DenseMatrix};
use crate::norm::shift_matrix;
use crate::rng::{self, derive_seed, Rng};
use crate::svg::Chart;

const MAX_RESAMPLES: usize = 1000;
const MIN_TEMPLATE_SINGULAR: f64 = 0.1;
const MIN_ONES_OVERLAP: f64 = 1e-3;
/// Eigenvalues of a Gram matrix at most this fraction of the largest are
/// treated as zero.
const POSITIVE_CUTOFF: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct TestbedConfig {
    pub m: usize,
    /// Node count and feature dimension (`n = d`).
    pub n: usize,
    pub delta1: f64,
    /// Bound on `‖X‖₂‖Q‖₂‖p‖` squared.
    pub b: f64,
    pub seed: u64,
    /// Gradient-descent steps recorded per model.
    pub steps: usize,
}

impl TestbedConfig {
    /// `b = 25·n²`, 200 steps.
    pub fn new(n: usize, m: usize, delta1: f64, seed: u64) -> Self {
        Self {
            m,
            n,
            delta1,
            b: 25.0 * (n * n) as f64,
            seed,
            steps: 200,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n < 2 || !(self.delta1 >= 0.0) || !(self.b > 0.0) {
            return Err(Error::InvalidModel(format!(
                "testbed needs m ≥ 1, n ≥ 2, delta1 ≥ 0 and b > 0 (got m={}, n={}, delta1={}, b={})",
                self.m, self.n, self.delta1, self.b
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSample {
    pub x: DenseMatrix,
    pub q: DenseMatrix,
    pub p: Vec<f64>,
    pub y: f64,
}

/// Quantities shared by every sample of a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// The template `Y` with `E[XQ] = Y`.
    pub template: DenseMatrix,
    pub w_true: Vec<f64>,
    /// `Y^{-T}𝟙`, the direction removed from every noise draw.
    pub v: Vec<f64>,
    /// How many `p` vectors were shrunk to respect the bound `b`.
    pub rescaled: usize,
}

fn gaussian_matrix(rows: usize, cols: usize, r: &mut Rng) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| r.sample(StandardNormal))
}

fn gaussian_vector(n: usize, r: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| r.sample(StandardNormal)).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Removes the `v` component of every column: `(I − vvᵀ/‖v‖²)·M`.
fn project_out(v: &[f64], m: &DenseMatrix) -> DenseMatrix {
    let vv = dot(v, v);
    let mut out = m.clone();
    for c in 0..m.cols() {
        let col = m.column(c);
        let coef = dot(v, &col) / vv;
        for (r, vr) in v.iter().enumerate() {
            out[(r, c)] -= coef * vr;
        }
    }
    out
}

fn template_is_acceptable(y: &DenseMatrix) -> Result<bool> {
    if singular_values(y)?.min() < MIN_TEMPLATE_SINGULAR {
        return Ok(false);
    }
    let eig = sym_eigen(&matmul(y, &y.transpose())?)?;
    Ok((0..y.rows()).all(|i| {
        let col = eig.vectors.column(i);
        col.iter().sum::<f64>().abs() >= MIN_ONES_OVERLAP * norm(&col)
    }))
}

/// Draws the template, the hidden weights and `m` samples.
pub fn generate_dataset(config: &TestbedConfig) -> Result<(Vec<LinearSample>, GroundTruth)> {
    config.validate()?;
    let n = config.n;
    let mut r = rng::seeded(config.seed);

    let mut template = None;
    for _ in 0..MAX_RESAMPLES {
        let candidate = gaussian_matrix(n, n, &mut r);
        if template_is_acceptable(&candidate)? {
            template = Some(candidate);
            break;
        }
    }
    let template = template.ok_or(Error::ResampleLimit(MAX_RESAMPLES))?;
    let v = pseudoinverse(&template.transpose())?.matvec(&vec![1.0; n])?;
    let w_true = {
        let w = gaussian_vector(n, &mut r);
        project_out(&v, &DenseMatrix::column_vector(&w)).column(0)
    };

    let q = DenseMatrix::identity(n);
    let q_norm = 1.0;
    let shift = shift_matrix(n);
    let noise_scale = (config.delta1 / n as f64).sqrt();
    let bound = config.b.sqrt();
    let mut rescaled = 0;
    let mut samples = Vec::with_capacity(config.m);
    for _ in 0..config.m {
        let noise = project_out(&v, &gaussian_matrix(n, n, &mut r)).scale(noise_scale);
        let x = if config.delta1 == 0.0 { template.clone() } else { template.add(&noise)? };
        let mut p = gaussian_vector(n, &mut r);
        let size = x.spectral_norm()? * q_norm * norm(&p);
        if size > bound {
            p.iter_mut().for_each(|e| *e *= bound / size);
            rescaled += 1;
        }
        let shifted = matmul(&matmul(&x, &q)?, &shift)?.matvec(&p)?;
        let y = dot(&w_true, &shifted);
        samples.push(LinearSample { x, q: q.clone(), p, y });
    }
    if rescaled > 0 {
        log::info!("rescaled {rescaled} of {} importance vectors to respect the bound", config.m);
    }
    Ok((
        samples,
        GroundTruth {
            template,
            w_true,
            v,
            rescaled,
        },
    ))
}

/// `d × m` matrix whose column `i` is `X_i Q_i p_i`, or `X_i Q_i N p_i`
/// when `shifted`.
pub fn combined_features(samples: &[LinearSample], shifted: bool) -> Result<DenseMatrix> {
    let first = samples.first().ok_or_else(|| Error::InvalidModel("no samples".into()))?;
    let (d, n) = (first.x.rows(), first.q.cols());
    let shift = shift_matrix(n);
    let mut z = DenseMatrix::zeros(d, samples.len());
    for (i, s) in samples.iter().enumerate() {
        let mut xq = matmul(&s.x, &s.q)?;
        if shifted {
            xq = matmul(&xq, &shift)?;
        }
        for (r, v) in xq.matvec(&s.p)?.into_iter().enumerate() {
            z[(r, i)] = v;
        }
    }
    Ok(z)
}

fn gram(z: &DenseMatrix) -> Result<DenseMatrix> {
    matmul(z, &z.transpose())
}

/// Minimum-norm least-squares solution `(ZZᵀ)† Z y`.
pub fn closed_form_optimum(z: &DenseMatrix, y: &[f64]) -> Result<Vec<f64>> {
    pseudoinverse(&gram(z)?)?.matvec(&z.matvec(y)?)
}

/// Largest and smallest positive eigenvalue of `ZZᵀ`.
fn gram_extremes(g: &DenseMatrix) -> Result<(f64, f64)> {
    let eig = sym_eigen(g)?;
    let max = eig.values.first().copied().unwrap_or(0.0);
    if !(max > 0.0) {
        return Err(Error::InvalidModel("feature Gram matrix is zero".into()));
    }
    let min = eig
        .values
        .iter()
        .copied()
        .filter(|&v| v > POSITIVE_CUTOFF * max)
        .fold(f64::INFINITY, f64::min);
    Ok((max, min))
}

/// `1 − σ_min⁺/σ_max` of `ZZᵀ`.
pub fn effective_rate(z: &DenseMatrix) -> Result<f64> {
    let (max, min) = gram_extremes(&gram(z)?)?;
    Ok(1.0 - min / max)
}

/// `(ρ_1, ρ_2)` for the vanilla and shifted features.
pub fn effective_condition_and_rates(z_vanilla: &DenseMatrix, z_shift: &DenseMatrix) -> Result<(f64, f64)> {
    Ok((effective_rate(z_vanilla)?, effective_rate(z_shift)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescentTrace {
    /// `‖w_t − w*‖₂` for `t = 0..=steps`.
    pub errors: Vec<f64>,
    pub lr: f64,
    pub w_star: Vec<f64>,
    pub w_final: Vec<f64>,
}

/// Gradient descent `w ← w − η(ZZᵀw − Zy)` from `w = 0`, with `η = 1/σ_max`
/// unless given.
pub fn gradient_descent(z: &DenseMatrix, y: &[f64], steps: usize, lr: Option<f64>) -> Result<DescentTrace> {
    let g = gram(z)?;
    let zy = z.matvec(y)?;
    let (max, _) = gram_extremes(&g)?;
    let lr = lr.unwrap_or(1.0 / max);
    if lr > 2.0 / max {
        log::warn!("learning rate {lr} exceeds 2/σ_max = {}; gradient descent will diverge", 2.0 / max);
    }
    let w_star = pseudoinverse(&g)?.matvec(&zy)?;
    let distance = |w: &[f64]| norm(&w.iter().zip(&w_star).map(|(a, b)| a - b).collect::<Vec<_>>());
    let mut w = vec![0.0; g.rows()];
    let mut errors = Vec::with_capacity(steps + 1);
    errors.push(distance(&w));
    for _ in 0..steps {
        let gw = g.matvec(&w)?;
        for i in 0..w.len() {
            w[i] -= lr * (gw[i] - zy[i]);
        }
        errors.push(distance(&w));
    }
    Ok(DescentTrace {
        errors,
        lr,
        w_star,
        w_final: w,
    })
}

/// Both models on one generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceTrace {
    pub trial: usize,
    pub rho1: f64,
    pub rho2: f64,
    pub vanilla: DescentTrace,
    pub shifted: DescentTrace,
}

impl ConvergenceTrace {
    /// Whether `‖w_t − w*‖ ≤ slack·ρ^t·‖w*‖` at every step, for both models.
    pub fn within_bound(&self, slack: f64) -> bool {
        let check = |t: &DescentTrace, rho: f64| {
            let scale = norm(&t.w_star);
            t.errors
                .iter()
                .enumerate()
                .all(|(step, e)| *e <= slack * rho.powi(step as i32) * scale + 1e-12)
        };
        check(&self.vanilla, self.rho1) && check(&self.shifted, self.rho2)
    }
}

/// One trial on a dataset seeded by `derive_seed(config.seed, trial)`.
pub fn run_trial(config: &TestbedConfig, trial: usize) -> Result<ConvergenceTrace> {
    let cfg = TestbedConfig {
        seed: derive_seed(config.seed, trial as u64),
        ..config.clone()
    };
    let (samples, _) = generate_dataset(&cfg)?;
    let labels: Vec<f64> = samples.iter().map(|s| s.y).collect();
    let z_vanilla = combined_features(&samples, false)?;
    let z_shift = combined_features(&samples, true)?;
    let (rho1, rho2) = effective_condition_and_rates(&z_vanilla, &z_shift)?;
    Ok(ConvergenceTrace {
        trial,
        rho1,
        rho2,
        vanilla: gradient_descent(&z_vanilla, &labels, cfg.steps, None)?,
        shifted: gradient_descent(&z_shift, &labels, cfg.steps, None)?,
    })
}

/// Runs `trials` independent trials (in parallel), ordered by trial index.
pub fn run_testbed(config: &TestbedConfig, trials: usize) -> Result<Vec<ConvergenceTrace>> {
    (0..trials).into_par_iter().map(|t| run_trial(config, t)).collect()
}

/// CSV with columns `trial, step, err_vanilla, err_shift, rho1, rho2`.
pub fn write_convergence_csv<W: Write>(traces: &[ConvergenceTrace], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["trial", "step", "err_vanilla", "err_shift", "rho1", "rho2"])?;
    for t in traces {
        for (step, (ev, es)) in t.vanilla.errors.iter().zip(&t.shifted.errors).enumerate() {
            w.write_record([
                t.trial.to_string(),
                step.to_string(),
                format!("{ev:.10e}"),
                format!("{es:.10e}"),
                format!("{:.12}", t.rho1),
                format!("{:.12}", t.rho2),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Error curves of one trial on a log scale with the predicted-rate guides.
pub fn convergence_chart(trace: &ConvergenceTrace) -> Chart {
    let curve = |errors: &[f64]| errors.iter().enumerate().map(|(i, e)| (i as f64, *e)).collect();
    let guide = |rho: f64, t: &DescentTrace| {
        let scale = norm(&t.w_star);
        (0..t.errors.len()).map(|i| (i as f64, scale * rho.powi(i as i32))).collect()
    };
    Chart::new(&format!("Gradient descent, trial {}", trace.trial), "step", "‖w_t − w*‖")
        .log_y()
        .line("vanilla", curve(&trace.vanilla.errors))
        .line("shifted", curve(&trace.shifted.errors))
        .line(&format!("ρ1 = {:.4}", trace.rho1), guide(trace.rho1, &trace.vanilla))
        .line(&format!("ρ2 = {:.4}", trace.rho2), guide(trace.rho2, &trace.shifted))
}
