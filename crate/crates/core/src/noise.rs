//! Batch-statistics noise: how far per-batch mean / standard deviation at a
//! normalization input stray from the statistics of the whole dataset.

use std::io::Write;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::graph::{Graph, GraphBatch};
use crate::nn::{forward, ModelConfig, ModelParams, RunningStats};
use crate::norm::{Mode, NormKind};
use crate::rng;
use crate::svg::{Band, Chart};

/// Added to the dataset statistic when normalizing a spread.
pub const SPREAD_EPSILON: f64 = 1e-8;

/// Model state saved at the end of an epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub params: ModelParams,
    pub running: RunningStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseRecord {
    pub epoch: usize,
    pub layer_id: usize,
    pub feature_dim: usize,
    pub batch_mean_max: f64,
    pub batch_mean_min: f64,
    pub batch_std_max: f64,
    pub batch_std_min: f64,
    pub dataset_mean: f64,
    pub dataset_std: f64,
}

impl NoiseRecord {
    pub fn mean_spread(&self) -> f64 {
        (self.batch_mean_max - self.batch_mean_min) / (self.dataset_mean.abs() + SPREAD_EPSILON)
    }

    pub fn std_spread(&self) -> f64 {
        (self.batch_std_max - self.batch_std_min) / (self.dataset_std.abs() + SPREAD_EPSILON)
    }
}

/// Seeded partition of `0..count` into consecutive chunks of `batch_size`
/// after one shuffle.
pub fn fixed_partition(count: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut ids: Vec<usize> = (0..count).collect();
    ids.shuffle(&mut rng::seeded(seed));
    ids.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-batch values at the input of normalization layer `layer_id`, row
/// `feature_dim`, for every batch of the partition.
fn batch_values(
    checkpoint: &Checkpoint,
    config: &ModelConfig,
    graphs: &[Graph],
    partition: &[Vec<usize>],
    layer_id: usize,
    feature_dim: usize,
) -> Result<Vec<Vec<f64>>> {
    partition
        .iter()
        .map(|ids| {
            let refs: Vec<&Graph> = ids.iter().map(|&i| &graphs[i]).collect();
            let batch = GraphBatch::from_refs(&refs)?;
            // train mode so batch norms use batch statistics, no running update
            let (_, cache) = forward(&checkpoint.params, config, &batch, Mode::Train, None)?;
            let input = cache.norm_input(layer_id).ok_or(Error::NoNormLayer(layer_id))?;
            Ok(input.row(feature_dim).to_vec())
        })
        .collect()
}

/// One record per checkpoint: extreme per-batch statistics over a fixed
/// seeded partition, and the statistics of all nodes together.
pub fn probe(
    checkpoints: &[Checkpoint],
    config: &ModelConfig,
    graphs: &[Graph],
    batch_size: usize,
    layer_id: usize,
    feature_dim: usize,
    seed: u64,
) -> Result<Vec<NoiseRecord>> {
    if config.norm == NormKind::None || layer_id >= config.norm_layer_count() {
        return Err(Error::NoNormLayer(layer_id));
    }
    if feature_dim >= config.hidden_dim {
        return Err(Error::InvalidModel(format!(
            "feature dimension {feature_dim} out of range for hidden size {}",
            config.hidden_dim
        )));
    }
    if graphs.is_empty() || batch_size == 0 {
        return Err(Error::InvalidModel("probe needs graphs and a positive batch size".into()));
    }
    let partition = fixed_partition(graphs.len(), batch_size, seed);
    let mut records = Vec::with_capacity(checkpoints.len());
    for cp in checkpoints {
        let per_batch = batch_values(cp, config, graphs, &partition, layer_id, feature_dim)?;
        let stats: Vec<(f64, f64)> = per_batch.iter().map(|v| mean_std(v)).collect();
        let all: Vec<f64> = per_batch.concat();
        let (dataset_mean, dataset_std) = mean_std(&all);
        let fold = |f: fn(f64, f64) -> f64, init: f64, pick: fn(&(f64, f64)) -> f64| {
            stats.iter().map(pick).fold(init, f)
        };
        records.push(NoiseRecord {
            epoch: cp.epoch,
            layer_id,
            feature_dim,
            batch_mean_max: fold(f64::max, f64::NEG_INFINITY, |s| s.0),
            batch_mean_min: fold(f64::min, f64::INFINITY, |s| s.0),
            batch_std_max: fold(f64::max, f64::NEG_INFINITY, |s| s.1),
            batch_std_min: fold(f64::min, f64::INFINITY, |s| s.1),
            dataset_mean,
            dataset_std,
        });
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSummary {
    /// `(epoch, mean spread, std spread)` per record.
    pub per_epoch: Vec<(usize, f64, f64)>,
    pub average_mean_spread: f64,
    pub average_std_spread: f64,
}

pub fn noise_summary(records: &[NoiseRecord]) -> NoiseSummary {
    let per_epoch: Vec<(usize, f64, f64)> = records.iter().map(|r| (r.epoch, r.mean_spread(), r.std_spread())).collect();
    let n = per_epoch.len().max(1) as f64;
    NoiseSummary {
        average_mean_spread: per_epoch.iter().map(|p| p.1).sum::<f64>() / n,
        average_std_spread: per_epoch.iter().map(|p| p.2).sum::<f64>() / n,
        per_epoch,
    }
}

/// CSV with columns `epoch, layer, dim, mean_max, mean_min, std_max,
/// std_min, ds_mean, ds_std`.
pub fn write_noise_csv<W: Write>(records: &[NoiseRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "layer", "dim", "mean_max", "mean_min", "std_max", "std_min", "ds_mean", "ds_std"])?;
    for r in records {
        w.write_record([
            r.epoch.to_string(),
            r.layer_id.to_string(),
            r.feature_dim.to_string(),
            format!("{:.10e}", r.batch_mean_max),
            format!("{:.10e}", r.batch_mean_min),
            format!("{:.10e}", r.batch_std_max),
            format!("{:.10e}", r.batch_std_min),
            format!("{:.10e}", r.dataset_mean),
            format!("{:.10e}", r.dataset_std),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Dataset-level mean and std as lines with the per-batch range as bands.
pub fn noise_chart(records: &[NoiseRecord]) -> Chart {
    let x: Vec<f64> = records.iter().map(|r| r.epoch as f64).collect();
    let line = |f: fn(&NoiseRecord) -> f64| records.iter().map(|r| (r.epoch as f64, f(r))).collect();
    Chart::new("Batch vs dataset statistics", "epoch", "value")
        .band(Band {
            name: "batch mean range".into(),
            x: x.clone(),
            lower: records.iter().map(|r| r.batch_mean_min).collect(),
            upper: records.iter().map(|r| r.batch_mean_max).collect(),
        })
        .band(Band {
            name: "batch std range".into(),
            x,
            lower: records.iter().map(|r| r.batch_std_min).collect(),
            upper: records.iter().map(|r| r.batch_std_max).collect(),
        })
        .line("dataset mean", line(|r| r.dataset_mean))
        .line("dataset std", line(|r| r.dataset_std))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{assign_degree_features, make_er_graph};
    use crate::nn::Arch;

    fn setup(graphs: usize, hetero: bool) -> (ModelConfig, Vec<Graph>, Checkpoint) {
        let raw: Vec<Graph> = (0..graphs)
            .map(|i| {
                let (n, seed) = if hetero { (5 + (i * 7) % 30, i as u64) } else { (9, 1) };
                make_er_graph(n, 0.3, seed).unwrap().with_label(i % 2)
            })
            .collect();
        let data = assign_degree_features(raw).unwrap();
        let cfg = ModelConfig {
            layers: 2,
            hidden_dim: 6,
            norm: NormKind::Batch,
            ..ModelConfig::new(Arch::Gin, data[0].feature_dim(), 2)
        };
        let checkpoint = Checkpoint {
            epoch: 0,
            params: ModelParams::init(&cfg, 3).unwrap(),
            running: RunningStats::new(&cfg),
        };
        (cfg, data, checkpoint)
    }

    #[test]
    fn homogeneous_dataset_has_zero_spread() {
        let (cfg, data, cp) = setup(32, false);
        for layer in 0..cfg.norm_layer_count() {
            let recs = probe(std::slice::from_ref(&cp), &cfg, &data, 8, layer, 2, 5).unwrap();
            let r = &recs[0];
            assert_eq!(r.batch_mean_max, r.batch_mean_min);
            assert_eq!(r.batch_std_max, r.batch_std_min);
            assert!((r.batch_mean_max - r.dataset_mean).abs() <= 1e-12);
            assert_eq!(r.mean_spread(), 0.0);
        }
    }

    #[test]
    fn single_batch_has_zero_spread() {
        let (cfg, data, cp) = setup(20, true);
        let r = &probe(&[cp], &cfg, &data, 20, 1, 0, 5).unwrap()[0];
        assert_eq!(r.mean_spread(), 0.0);
        assert_eq!(r.std_spread(), 0.0);
    }

    #[test]
    fn weighted_batch_means_recover_dataset_mean() {
        let (cfg, data, cp) = setup(30, true);
        let partition = fixed_partition(data.len(), 7, 11);
        let values = batch_values(&cp, &cfg, &data, &partition, 2, 3).unwrap();
        let total: usize = values.iter().map(Vec::len).sum();
        let weighted: f64 = values.iter().map(|v| mean_std(v).0 * v.len() as f64).sum::<f64>() / total as f64;
        let r = &probe(&[cp], &cfg, &data, 7, 2, 3, 11).unwrap()[0];
        assert!((weighted - r.dataset_mean).abs() <= 1e-9);
        assert!(r.batch_mean_max >= r.batch_mean_min && r.batch_std_max >= r.batch_std_min);
        assert!(r.mean_spread() >= 0.0);
    }

    #[test]
    fn partition_covers_everything_once() {
        let p = fixed_partition(23, 5, 2);
        assert_eq!(p.len(), 5);
        let mut all: Vec<usize> = p.concat();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
        assert_eq!(p, fixed_partition(23, 5, 2));
    }

    #[test]
    fn errors_for_missing_norm_layer() {
        let (cfg, data, cp) = setup(8, true);
        assert!(matches!(probe(&[cp.clone()], &cfg, &data, 4, 99, 0, 1), Err(Error::NoNormLayer(99))));
        let plain = ModelConfig {
            norm: NormKind::None,
            ..cfg.clone()
        };
        let cp_plain = Checkpoint {
            params: ModelParams::init(&plain, 3).unwrap(),
            ..cp.clone()
        };
        assert!(matches!(probe(&[cp_plain], &plain, &data, 4, 0, 0, 1), Err(Error::NoNormLayer(0))));
        assert!(probe(&[cp], &cfg, &data, 4, 0, 6, 1).is_err());
    }

    #[test]
    fn outputs_are_deterministic() {
        let (cfg, data, cp) = setup(24, true);
        let a = probe(&[cp.clone()], &cfg, &data, 6, 1, 1, 3).unwrap();
        let b = probe(&[cp], &cfg, &data, 6, 1, 1, 3).unwrap();
        let (mut x, mut y) = (Vec::new(), Vec::new());
        write_noise_csv(&a, &mut x).unwrap();
        write_noise_csv(&b, &mut y).unwrap();
        assert_eq!(x, y);
        let summary = noise_summary(&a);
        assert_eq!(summary.per_epoch.len(), 1);
        assert!(noise_chart(&a).render().contains("<polygon"));
    }
}
