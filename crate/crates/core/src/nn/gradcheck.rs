use crate::error::Result;
use crate::graph::GraphBatch;
use crate::norm::Mode;

use super::{backward, cross_entropy, forward, ModelConfig, ModelParams};

/// Relative errors are measured against `max(|analytic|, |numeric|, FLOOR)`
/// so coordinates whose true gradient is zero are compared absolutely: the
/// round-off in a central difference at step 1e-5 is around 1e-10, so this
/// floor keeps the 1e-4 relative tolerance above that noise.
const FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest relative error per named tensor.
    pub tensors: Vec<(String, f64)>,
    pub coordinates: usize,
    /// Coordinates left out because `θ ± h` switched some ReLU on or off;
    /// a central difference across a kink does not estimate the derivative.
    pub kink_skipped: usize,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.tensors.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&(String, f64)> {
        self.tensors.iter().max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

fn loss_at(params: &ModelParams, config: &ModelConfig, batch: &GraphBatch, labels: &[usize], pattern: &[bool]) -> Result<(f64, bool)> {
    let (logits, cache) = forward(params, config, batch, Mode::Train, None)?;
    let same_side = cache.relu_pattern().eq(pattern.iter().copied());
    Ok((cross_entropy(&logits, labels)?, same_side))
}

/// Compares the analytic gradient of every parameter with central
/// differences, step `1e-5·max(1, |θ|)`. Batch norms use batch statistics
/// and do not touch running statistics. Coordinates whose perturbation
/// changes the ReLU activation pattern are counted in `kink_skipped` and
/// excluded from the error.
pub fn gradient_check(
    params: &ModelParams,
    config: &ModelConfig,
    batch: &GraphBatch,
    labels: &[usize],
) -> Result<GradCheckReport> {
    let (_, cache) = forward(params, config, batch, Mode::Train, None)?;
    let (_, grads) = backward(params, config, batch, labels, &cache)?;
    let pattern: Vec<bool> = cache.relu_pattern().collect();
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    let analytic: Vec<Vec<f64>> = grads.tensors().into_iter().map(|(_, t)| t.to_vec()).collect();

    let mut probe = params.clone();
    let mut tensors = Vec::with_capacity(names.len());
    let mut coordinates = 0;
    let mut kink_skipped = 0;
    for (t, name) in names.into_iter().enumerate() {
        let len = analytic[t].len();
        let mut worst: f64 = 0.0;
        for i in 0..len {
            let original = probe.tensors_mut()[t][i];
            let h = 1e-5 * original.abs().max(1.0);
            probe.tensors_mut()[t][i] = original + h;
            let (plus, plus_ok) = loss_at(&probe, config, batch, labels, &pattern)?;
            probe.tensors_mut()[t][i] = original - h;
            let (minus, minus_ok) = loss_at(&probe, config, batch, labels, &pattern)?;
            probe.tensors_mut()[t][i] = original;
            coordinates += 1;
            if !(plus_ok && minus_ok) {
                kink_skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[t][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max(rel);
        }
        tensors.push((name, worst));
    }
    Ok(GradCheckReport {
        tensors,
        coordinates,
        kink_skipped,
    })
}
