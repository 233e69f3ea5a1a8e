//! Experiment subcommands. Each writes its CSV/SVG artifacts into the
//! configured output directory and reports whether its checks passed.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::config::{RunConfig, Synthetic};
use crate::dataset::{parse_tudataset, stratified_folds};
use crate::error::{Error, Result};
use crate::graph::{make_er_graph, make_synthetic_classification_set, ClassRule, Graph};
use crate::linalg::DenseMatrix;
use crate::linear::{convergence_chart, run_testbed, write_convergence_csv, TestbedConfig};
use crate::nn::{evaluate, train, AdamSettings, ModelConfig, ModelParams, RunningStats, TrainSettings, TrainTrace};
use crate::noise::{noise_chart, noise_summary, probe, write_noise_csv, Checkpoint, NoiseRecord};
use crate::norm::NormKind;
use crate::rng::{self, derive_seed};
use crate::spectral::{
    dataset_spectrum_survey, spectra_chart, verify_complete_identity, verify_regular_zero, write_spectra_csv, Aggregator,
    RegularAggregation,
};
use crate::svg::Chart;

pub const REGULAR_TOLERANCE: f64 = 1e-10;
pub const COMPLETE_TOLERANCE: f64 = 1e-12;
/// Required fraction of testbed trials in which the shifted model has the
/// better rate.
pub const TESTBED_SUCCESS_FRACTION: f64 = 0.95;

/// Result of a subcommand that ran to completion.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub passed: bool,
    pub summary: String,
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    fs::create_dir_all(dir)?;
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn write_svg(dir: &Path, name: &str, chart: &Chart) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), chart.render())?;
    Ok(())
}

/// Labelled synthetic set with one-hot degree features.
pub fn synthetic_set(kind: Synthetic, count: usize, seed: u64) -> Result<Vec<Graph>> {
    let rule = match kind {
        Synthetic::Er => ClassRule::ErDensity {
            p0: 0.2,
            p1: 0.25,
            min_nodes: 10,
            max_nodes: 30,
        },
        Synthetic::Regular => ClassRule::Regular {
            degree: 3,
            min_nodes: 8,
            max_nodes: 20,
        },
        Synthetic::Mixed => ClassRule::ErDensity {
            p0: 0.15,
            p1: 0.3,
            min_nodes: 5,
            max_nodes: 50,
        },
    };
    make_synthetic_classification_set(count, rule, seed)
}

/// The configured dataset if `data_dir` is set, otherwise the configured
/// synthetic set.
pub fn load_graphs(cfg: &RunConfig) -> Result<Vec<Graph>> {
    match &cfg.data_dir {
        Some(dir) => {
            let (graphs, meta) = parse_tudataset(dir, &cfg.dataset)?;
            log::info!(
                "loaded {}: {} graphs, {} classes, {:.1} nodes on average",
                meta.name,
                meta.num_graphs,
                meta.num_classes,
                meta.avg_nodes
            );
            Ok(graphs)
        }
        None => synthetic_set(cfg.synthetic, cfg.synthetic_graphs, cfg.seed),
    }
}

/// Fifty seeded Erdős–Rényi graphs with 5–20 nodes and edge density 0.3.
pub fn survey_er_graphs(seed: u64) -> Result<Vec<Graph>> {
    let mut r = rng::seeded(seed);
    (0..50)
        .map(|i| make_er_graph(r.random_range(5..=20), 0.3, derive_seed(seed, i)))
        .collect()
}

/// Interlacing survey over the ER graphs (plus the dataset, if configured)
/// for GCN and GIN with ξ ∈ {0, 1}. Passes iff every report interlaces and
/// shows a zero singular value.
pub fn cmd_spectrum(cfg: &RunConfig) -> Result<Outcome> {
    let mut sets = vec![survey_er_graphs(cfg.seed)?];
    if cfg.data_dir.is_some() {
        sets.push(load_graphs(cfg)?);
    }
    let mut reports = Vec::new();
    for graphs in &sets {
        let samples = if cfg.spectrum_samples == 0 { graphs.len() } else { cfg.spectrum_samples };
        for agg in [Aggregator::Gcn, Aggregator::Gin { xi: 0.0 }, Aggregator::Gin { xi: 1.0 }] {
            reports.extend(dataset_spectrum_survey(graphs, agg, samples, cfg.seed)?);
        }
    }
    write_spectra_csv(&reports, create(&cfg.output_dir, "spectra.csv")?)?;
    write_svg(&cfg.output_dir, "spectra.svg", &spectra_chart(&reports, 12))?;
    let failures = reports.iter().filter(|r| !(r.interlacing_ok && r.zero_singular_present)).count();
    Ok(Outcome {
        passed: failures == 0,
        summary: format!("{} spectra, {failures} failing interlacing or zero-singular checks", reports.len()),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropRow {
    pub property: &'static str,
    pub n: usize,
    pub r: usize,
    pub xi: f64,
    pub aggregation: &'static str,
    pub residual: f64,
    pub tolerance: f64,
}

impl PropRow {
    pub fn ok(&self) -> bool {
        self.residual <= self.tolerance
    }
}

/// Every feasible `(n, r, ξ)` regular case for both aggregations, then the
/// complete-graph identity for `n ∈ 2..=12`.
pub fn property_sweep(seed: u64) -> Result<Vec<PropRow>> {
    const WIDTH: usize = 5;
    let mut cases = Vec::new();
    for n in 4..=12usize {
        for r in [2usize, 3, 4] {
            if r >= n || !(n * r).is_multiple_of(2) {
                continue;
            }
            for xi in [0.0, 0.3, 1.0] {
                for agg in [RegularAggregation::Gin, RegularAggregation::Gcn] {
                    cases.push((n, r, xi, agg));
                }
            }
        }
    }
    let mut rows: Vec<PropRow> = cases
        .par_iter()
        .enumerate()
        .map(|(i, &(n, r, xi, agg))| {
            let case_seed = derive_seed(seed, i as u64);
            let mut rr = rng::seeded(case_seed);
            let w = DenseMatrix::from_fn(WIDTH, r + 1, |_, _| rr.sample(StandardNormal));
            Ok(PropRow {
                property: "regular_zero",
                n,
                r,
                xi,
                aggregation: match agg {
                    RegularAggregation::Gin => "gin",
                    RegularAggregation::Gcn => "gcn",
                },
                residual: verify_regular_zero(n, r, xi, &w, agg, case_seed)?,
                tolerance: REGULAR_TOLERANCE,
            })
        })
        .collect::<Result<_>>()?;
    for n in 2..=12usize {
        for xi in [0.0, 0.7, 1.0] {
            rows.push(PropRow {
                property: "complete_identity",
                n,
                r: n - 1,
                xi,
                aggregation: "gin",
                residual: verify_complete_identity(n, xi)?,
                tolerance: COMPLETE_TOLERANCE,
            });
        }
    }
    Ok(rows)
}

pub fn cmd_verify_props(cfg: &RunConfig) -> Result<Outcome> {
    let rows = property_sweep(cfg.seed)?;
    let mut w = csv::Writer::from_writer(create(&cfg.output_dir, "props.csv")?);
    w.write_record(["property", "n", "r", "xi", "aggregation", "residual", "tolerance", "ok"])?;
    for row in &rows {
        w.write_record([
            row.property.to_string(),
            row.n.to_string(),
            row.r.to_string(),
            row.xi.to_string(),
            row.aggregation.to_string(),
            format!("{:.10e}", row.residual),
            format!("{:e}", row.tolerance),
            row.ok().to_string(),
        ])?;
    }
    w.flush()?;
    let failures = rows.iter().filter(|r| !r.ok()).count();
    Ok(Outcome {
        passed: failures == 0,
        summary: format!("{} cases, {failures} above tolerance", rows.len()),
    })
}

pub fn testbed_config(cfg: &RunConfig) -> TestbedConfig {
    TestbedConfig {
        steps: cfg.steps,
        ..TestbedConfig::new(cfg.testbed_n, cfg.testbed_m, cfg.delta1, cfg.seed)
    }
}

pub fn cmd_linear_testbed(cfg: &RunConfig) -> Result<Outcome> {
    let traces = run_testbed(&testbed_config(cfg), cfg.trials)?;
    write_convergence_csv(&traces, create(&cfg.output_dir, "convergence.csv")?)?;
    if let Some(first) = traces.first() {
        write_svg(&cfg.output_dir, "convergence.svg", &convergence_chart(first))?;
    }
    let wins = traces.iter().filter(|t| t.rho2 < t.rho1).count();
    let fraction = wins as f64 / traces.len() as f64;
    Ok(Outcome {
        passed: fraction >= TESTBED_SUCCESS_FRACTION,
        summary: format!("shifted rate better in {wins}/{} trials", traces.len()),
    })
}

/// Model configuration implied by the run config for a given norm kind.
pub fn model_config(cfg: &RunConfig, graphs: &[Graph], norm: NormKind) -> Result<ModelConfig> {
    let first = graphs.first().ok_or_else(|| Error::InvalidModel("no graphs to train on".into()))?;
    let classes = graphs.iter().map(Graph::label).max().unwrap_or(0) + 1;
    let model = ModelConfig {
        layers: cfg.layers,
        hidden_dim: cfg.hidden_dim,
        mlp_depth: cfg.mlp_depth,
        norm,
        readout: cfg.readout,
        xi_learnable: cfg.xi_learnable,
        ..ModelConfig::new(cfg.arch, first.feature_dim(), classes.max(2))
    };
    model.validate()?;
    Ok(model)
}

fn train_settings(cfg: &RunConfig, seed: u64) -> TrainSettings {
    TrainSettings {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        adam: AdamSettings {
            lr: cfg.lr,
            ..AdamSettings::default()
        },
        seed,
        track_accuracy: true,
    }
}

#[derive(Debug, Clone)]
pub struct FoldRun {
    pub norm: NormKind,
    pub fold: usize,
    pub trace: TrainTrace,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
}

/// Trains every (fold, norm kind) pair. Within a fold all norm kinds share
/// the weight initialization and the batch order.
pub fn train_runs(cfg: &RunConfig, graphs: &[Graph]) -> Result<Vec<FoldRun>> {
    let labels: Vec<usize> = graphs.iter().map(Graph::label).collect();
    let splits: Vec<(Vec<usize>, Option<Vec<usize>>)> = if cfg.folds >= 2 {
        stratified_folds(&labels, cfg.folds, cfg.seed)?
            .into_iter()
            .map(|f| (f.train_ids, Some(f.test_ids)))
            .collect()
    } else {
        vec![((0..graphs.len()).collect(), None)]
    };
    let jobs: Vec<(usize, NormKind)> = (0..splits.len())
        .flat_map(|f| cfg.norm_kinds().into_iter().map(move |k| (f, k)))
        .collect();
    jobs.par_iter()
        .map(|&(fold, norm)| {
            let (train_ids, test_ids) = &splits[fold];
            let pick = |ids: &[usize]| ids.iter().map(|&i| graphs[i].clone()).collect::<Vec<_>>();
            let train_set = pick(train_ids);
            let test_set = test_ids.as_deref().map(pick);
            let model = model_config(cfg, graphs, norm)?;
            let mut params = ModelParams::init(&model, derive_seed(cfg.seed, 2 * fold as u64))?;
            let mut running = RunningStats::new(&model);
            let settings = train_settings(cfg, derive_seed(cfg.seed, 2 * fold as u64 + 1));
            let trace = train(
                &mut params,
                &mut running,
                &model,
                &train_set,
                test_set.as_deref(),
                &settings,
                |_, _, _| Ok(()),
            )?;
            let train_acc = evaluate(&params, &model, &running, &train_set)?;
            let test_acc = test_set
                .as_deref()
                .map(|t| evaluate(&params, &model, &running, t))
                .transpose()?;
            log::info!("fold {fold} {norm}: train acc {train_acc:.3}, test acc {test_acc:?}");
            Ok(FoldRun {
                norm,
                fold,
                trace,
                train_acc,
                test_acc,
            })
        })
        .collect()
}

pub fn cmd_train(cfg: &RunConfig) -> Result<Outcome> {
    let graphs = load_graphs(cfg)?;
    let runs = train_runs(cfg, &graphs)?;

    let mut curves = csv::Writer::from_writer(create(&cfg.output_dir, "curves.csv")?);
    curves.write_record(["norm", "fold", "iteration", "epoch", "loss", "train_acc", "test_acc"])?;
    for run in &runs {
        let iters = &run.trace.iterations;
        for (i, rec) in iters.iter().enumerate() {
            let last_of_epoch = iters.get(i + 1).is_none_or(|next| next.epoch != rec.epoch);
            let acc = run.trace.epochs.iter().find(|e| e.epoch == rec.epoch).filter(|_| last_of_epoch);
            curves.write_record([
                run.norm.to_string(),
                run.fold.to_string(),
                rec.iteration.to_string(),
                rec.epoch.to_string(),
                format!("{:.12e}", rec.loss),
                acc.map(|a| format!("{:.6}", a.train_acc)).unwrap_or_default(),
                acc.and_then(|a| a.test_acc).map(|t| format!("{t:.6}")).unwrap_or_default(),
            ])?;
        }
    }
    curves.flush()?;

    let mut summary = csv::Writer::from_writer(create(&cfg.output_dir, "summary.csv")?);
    summary.write_record(["norm", "fold", "train_acc", "test_acc", "final_loss"])?;
    for run in &runs {
        summary.write_record([
            run.norm.to_string(),
            run.fold.to_string(),
            format!("{:.6}", run.train_acc),
            run.test_acc.map(|t| format!("{t:.6}")).unwrap_or_default(),
            format!("{:.12e}", run.trace.losses().last().copied().unwrap_or(f64::NAN)),
        ])?;
    }
    summary.flush()?;

    let mut chart = Chart::new("Training loss (fold 0)", "iteration", "loss").log_y();
    for run in runs.iter().filter(|r| r.fold == 0) {
        let pts = run.trace.iterations.iter().map(|r| (r.iteration as f64, r.loss)).collect();
        chart = chart.line(&run.norm.to_string(), pts);
    }
    write_svg(&cfg.output_dir, "curves.svg", &chart)?;

    let mut lines = Vec::new();
    for kind in cfg.norm_kinds() {
        let accs: Vec<f64> = runs.iter().filter(|r| r.norm == kind).filter_map(|r| r.test_acc).collect();
        if !accs.is_empty() {
            lines.push(format!("{kind}: mean test acc {:.3}", accs.iter().sum::<f64>() / accs.len() as f64));
        }
    }
    Ok(Outcome {
        passed: true,
        summary: format!("{} training runs; {}", runs.len(), lines.join(", ")),
    })
}

/// Trains with BatchNorm, keeping one checkpoint per epoch.
pub fn batchnorm_checkpoints(cfg: &RunConfig, graphs: &[Graph]) -> Result<(ModelConfig, Vec<Checkpoint>)> {
    let model = model_config(cfg, graphs, NormKind::Batch)?;
    let mut params = ModelParams::init(&model, derive_seed(cfg.seed, 0))?;
    let mut running = RunningStats::new(&model);
    let mut checkpoints = Vec::new();
    train(
        &mut params,
        &mut running,
        &model,
        graphs,
        None,
        &TrainSettings {
            track_accuracy: false,
            ..train_settings(cfg, derive_seed(cfg.seed, 1))
        },
        |epoch, p, r| {
            checkpoints.push(Checkpoint {
                epoch,
                params: p.clone(),
                running: r.clone(),
            });
            Ok(())
        },
    )?;
    Ok((model, checkpoints))
}

pub fn cmd_noise_probe(cfg: &RunConfig) -> Result<Outcome> {
    let graphs = load_graphs(cfg)?;
    let (model, checkpoints) = batchnorm_checkpoints(cfg, &graphs)?;
    let mut records: Vec<NoiseRecord> = Vec::new();
    for &dim in &cfg.probe_dims {
        records.extend(probe(
            &checkpoints,
            &model,
            &graphs,
            cfg.probe_batch_size,
            cfg.probe_layer,
            dim,
            cfg.seed,
        )?);
    }
    write_noise_csv(&records, create(&cfg.output_dir, "noise.csv")?)?;
    let first_dim: Vec<NoiseRecord> = records
        .iter()
        .filter(|r| Some(&r.feature_dim) == cfg.probe_dims.first())
        .cloned()
        .collect();
    write_svg(&cfg.output_dir, "noise.svg", &noise_chart(&first_dim))?;
    let ordered = records
        .iter()
        .all(|r| r.batch_mean_max >= r.batch_mean_min && r.batch_std_max >= r.batch_std_min);
    let summary = noise_summary(&records);
    Ok(Outcome {
        passed: ordered,
        summary: format!(
            "{} records; average normalized spread: mean {:.4}, std {:.4}",
            records.len(),
            summary.average_mean_spread,
            summary.average_std_spread
        ),
    })
}
