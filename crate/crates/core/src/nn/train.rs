use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::graph::{Graph, GraphBatch};
use crate::norm::Mode;
use crate::rng;

use super::{backward, forward, ModelConfig, ModelParams, RunningStats};

const EVAL_CHUNK: usize = 256;
const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamSettings {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamSettings,
    pub seed: u64,
    /// Evaluate train (and test, if given) accuracy after every epoch.
    pub track_accuracy: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: 400,
            batch_size: 128,
            adam: AdamSettings::default(),
            seed: 0,
            track_accuracy: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrace {
    pub seed: u64,
    pub iterations: Vec<IterationRecord>,
    pub epochs: Vec<EpochRecord>,
    pub wall_clock_secs: f64,
}

impl TrainTrace {
    pub fn losses(&self) -> Vec<f64> {
        self.iterations.iter().map(|r| r.loss).collect()
    }

    /// CSV with columns `iteration, loss, epoch, train_acc, test_acc`; the
    /// accuracy columns are filled on the last iteration of each epoch.
    /// Wall-clock time is deliberately left out so output is reproducible.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iteration", "loss", "epoch", "train_acc", "test_acc"])?;
        for (i, rec) in self.iterations.iter().enumerate() {
            let last_of_epoch = self.iterations.get(i + 1).is_none_or(|next| next.epoch != rec.epoch);
            let acc = self.epochs.iter().find(|e| e.epoch == rec.epoch).filter(|_| last_of_epoch);
            w.write_record([
                rec.iteration.to_string(),
                format!("{:.12e}", rec.loss),
                rec.epoch.to_string(),
                acc.map(|a| format!("{:.6}", a.train_acc)).unwrap_or_default(),
                acc.and_then(|a| a.test_acc).map(|t| format!("{t:.6}")).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

struct Adam {
    settings: AdamSettings,
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    fn new(settings: AdamSettings, size: usize) -> Self {
        Self {
            settings,
            m: vec![0.0; size],
            v: vec![0.0; size],
            step: 0,
        }
    }

    fn update(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64) {
        self.step += 1;
        let AdamSettings { beta1, beta2, eps, .. } = self.settings;
        let c1 = 1.0 - beta1.powi(self.step);
        let c2 = 1.0 - beta2.powi(self.step);
        let grads: Vec<f64> = grads.flatten();
        let mut idx = 0;
        for tensor in params.tensors_mut() {
            for p in tensor.iter_mut() {
                let g = grads[idx];
                self.m[idx] = beta1 * self.m[idx] + (1.0 - beta1) * g;
                self.v[idx] = beta2 * self.v[idx] + (1.0 - beta2) * g * g;
                let m_hat = self.m[idx] / c1;
                let v_hat = self.v[idx] / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
                idx += 1;
            }
        }
    }
}

/// Trains with seeded shuffled mini-batches, mean cross-entropy and Adam
/// with a learning rate decaying linearly to zero over all iterations.
///
/// `on_epoch` is called after every epoch with the epoch index and the
/// current parameters, which makes it a checkpoint hook.
pub fn train(
    params: &mut ModelParams,
    running: &mut RunningStats,
    config: &ModelConfig,
    train_set: &[Graph],
    test_set: Option<&[Graph]>,
    settings: &TrainSettings,
    mut on_epoch: impl FnMut(usize, &ModelParams, &RunningStats) -> Result<()>,
) -> Result<TrainTrace> {
    if train_set.is_empty() {
        return Err(Error::InvalidModel("training set is empty".into()));
    }
    if settings.batch_size == 0 || settings.epochs == 0 {
        return Err(Error::InvalidModel("batch_size and epochs must be positive".into()));
    }
    let start = Instant::now();
    let per_epoch = train_set.len().div_ceil(settings.batch_size);
    let total = (per_epoch * settings.epochs) as f64;
    let mut adam = Adam::new(settings.adam, params.parameter_count());
    let mut r = rng::seeded(settings.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut trace = TrainTrace {
        seed: settings.seed,
        iterations: Vec::with_capacity(total as usize),
        epochs: Vec::new(),
        wall_clock_secs: 0.0,
    };

    for epoch in 0..settings.epochs {
        order.shuffle(&mut r);
        for chunk in order.chunks(settings.batch_size) {
            let iteration = trace.iterations.len();
            let graphs: Vec<&Graph> = chunk.iter().map(|&i| &train_set[i]).collect();
            let batch = GraphBatch::from_refs(&graphs)?;
            let labels = batch.labels();
            let (_, cache) = forward(params, config, &batch, Mode::Train, Some(running))?;
            let (loss, mut grads) = backward(params, config, &batch, &labels, &cache)?;
            if !loss.is_finite() || loss > DIVERGENCE_LOSS {
                return Err(Error::Diverged { iteration, loss });
            }
            if !config.xi_learnable {
                grads.layers.iter_mut().for_each(|l| l.xi = 0.0);
            }
            let lr = settings.adam.lr * (1.0 - iteration as f64 / total);
            adam.update(params, &grads, lr);
            if !params.all_finite() {
                return Err(Error::Diverged { iteration, loss: f64::NAN });
            }
            trace.iterations.push(IterationRecord { iteration, epoch, loss });
        }
        if settings.track_accuracy {
            let train_acc = evaluate(params, config, running, train_set)?;
            let test_acc = test_set.map(|t| evaluate(params, config, running, t)).transpose()?;
            trace.epochs.push(EpochRecord {
                epoch,
                train_acc,
                test_acc,
            });
        }
        on_epoch(epoch, params, running)?;
    }
    trace.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(trace)
}

/// Predicted class per graph (eval mode); ties go to the lowest class index.
pub fn predict(params: &ModelParams, config: &ModelConfig, running: &RunningStats, graphs: &[Graph]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(graphs.len());
    for chunk in graphs.chunks(EVAL_CHUNK) {
        let refs: Vec<&Graph> = chunk.iter().collect();
        let batch = GraphBatch::from_refs(&refs)?;
        let mut stats = running.clone();
        let (logits, _) = forward(params, config, &batch, Mode::Eval, Some(&mut stats))?;
        for g in 0..logits.cols() {
            let col = logits.column(g);
            let mut best = 0;
            for (c, v) in col.iter().enumerate() {
                if *v > col[best] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

/// Fraction of graphs whose predicted class equals their label.
pub fn evaluate(params: &ModelParams, config: &ModelConfig, running: &RunningStats, graphs: &[Graph]) -> Result<f64> {
    if graphs.is_empty() {
        return Err(Error::InvalidModel("cannot evaluate on an empty set".into()));
    }
    let predictions = predict(params, config, running, graphs)?;
    let correct = predictions.iter().zip(graphs).filter(|(p, g)| **p == g.label()).count();
    Ok(correct as f64 / graphs.len() as f64)
}
