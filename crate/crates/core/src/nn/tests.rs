use super::*;
use crate::graph::{adjacency, make_complete_graph, make_er_graph, Graph};
use crate::norm::{q_gcn, q_gin};
use rand::Rng;

fn random_features(d: usize, n: usize, seed: u64) -> DenseMatrix {
    let mut r = rng::seeded(seed);
    DenseMatrix::from_fn(d, n, |_, _| r.random_range(-1.0..1.0))
}

fn graph(n: usize, seed: u64, d: usize, label: usize) -> Graph {
    make_er_graph(n, 0.4, seed)
        .unwrap()
        .with_features(random_features(d, n, seed + 1000))
        .unwrap()
        .with_label(label)
}

fn config(arch: Arch, norm: NormKind) -> ModelConfig {
    ModelConfig {
        layers: 3,
        hidden_dim: 5,
        norm,
        ..ModelConfig::new(arch, 3, 2)
    }
}

/// Moves γ, β, α away from their defaults so the check sees generic values.
fn perturb_norms(params: &mut ModelParams, seed: u64) {
    let mut r = rng::seeded(seed);
    for layer in &mut params.layers {
        layer.xi = r.random_range(-0.3..0.3);
        for n in &mut layer.norms {
            n.gamma.iter_mut().for_each(|g| *g = r.random_range(0.5..1.5));
            // positive shifts keep most ReLUs alive, away from their kink
            n.beta.iter_mut().for_each(|b| *b = r.random_range(0.0..0.5));
            n.alpha.iter_mut().for_each(|a| *a = r.random_range(0.2..1.2));
        }
    }
}

fn logits_of(params: &ModelParams, cfg: &ModelConfig, graphs: Vec<Graph>) -> DenseMatrix {
    let batch = GraphBatch::new(graphs).unwrap();
    forward(params, cfg, &batch, Mode::Train, None).unwrap().0
}

#[test]
fn single_node_gcn_reads_out_relu_of_input() {
    let cfg = ModelConfig {
        layers: 1,
        hidden_dim: 3,
        ..ModelConfig::new(Arch::Gcn, 3, 2)
    };
    let mut params = ModelParams::init(&cfg, 1).unwrap();
    params.layers[0].linears[0] = Linear {
        weight: DenseMatrix::identity(3),
        bias: vec![0.0; 3],
    };
    let x = [0.7, -1.2, 0.0];
    let g = Graph::new(1, vec![], DenseMatrix::column_vector(&x), 0).unwrap();
    let batch = GraphBatch::new(vec![g]).unwrap();
    let (_, cache) = forward(&params, &cfg, &batch, Mode::Train, None).unwrap();
    assert_eq!(cache.readout().column(0), vec![0.7, 0.0, 0.0]);
}

#[test]
fn graph_norm_on_complete_graph_leaves_only_bias_path() {
    let k3 = make_complete_graph(3).unwrap().with_features(DenseMatrix::filled(3, 3, 0.4)).unwrap();
    let cfg = config(Arch::Gin, NormKind::Graph);
    let params = ModelParams::init(&cfg, 5).unwrap();
    let logits = logits_of(&params, &cfg, vec![k3]);
    for c in 0..2 {
        assert!((logits[(c, 0)] - params.head.bias[c]).abs() < 1e-12);
    }
}

#[test]
fn batched_forward_equals_single_graph_forwards() {
    for norm in [NormKind::None, NormKind::Layer, NormKind::Instance, NormKind::Graph] {
        for arch in [Arch::Gin, Arch::Gcn] {
            let cfg = config(arch, norm);
            let mut params = ModelParams::init(&cfg, 3).unwrap();
            perturb_norms(&mut params, 4);
            let (a, b) = (graph(6, 1, 3, 0), graph(9, 2, 3, 1));
            let joint = logits_of(&params, &cfg, vec![a.clone(), b.clone()]);
            let la = logits_of(&params, &cfg, vec![a]);
            let lb = logits_of(&params, &cfg, vec![b]);
            for c in 0..2 {
                assert!((joint[(c, 0)] - la[(c, 0)]).abs() < 1e-12, "{arch} {norm}");
                assert!((joint[(c, 1)] - lb[(c, 0)]).abs() < 1e-12, "{arch} {norm}");
            }
        }
    }
}

#[test]
fn node_permutation_leaves_logits_unchanged() {
    for norm in NormKind::ALL {
        for readout in [Readout::Sum, Readout::Mean] {
            let cfg = ModelConfig {
                readout,
                ..config(Arch::Gin, norm)
            };
            let params = ModelParams::init(&cfg, 9).unwrap();
            let g = graph(8, 11, 3, 1);
            let perm = [3, 7, 0, 5, 1, 6, 2, 4];
            let a = logits_of(&params, &cfg, vec![g.clone(), graph(5, 12, 3, 0)]);
            let b = logits_of(&params, &cfg, vec![g.permuted(&perm).unwrap(), graph(5, 12, 3, 0)]);
            assert!(a.sub(&b).unwrap().max_abs() < 1e-9, "{norm} {readout}");
        }
    }
}

#[test]
fn graph_order_permutes_logits() {
    for norm in [NormKind::None, NormKind::Layer, NormKind::Instance, NormKind::Graph] {
        let cfg = config(Arch::Gcn, norm);
        let params = ModelParams::init(&cfg, 2).unwrap();
        let gs = [graph(4, 1, 3, 0), graph(7, 2, 3, 1), graph(5, 3, 3, 0)];
        let fwd = logits_of(&params, &cfg, gs.to_vec());
        let rev = logits_of(&params, &cfg, vec![gs[2].clone(), gs[0].clone(), gs[1].clone()]);
        for (i, j) in [(0, 1), (1, 2), (2, 0)] {
            assert!((fwd[(0, i)] - rev[(0, j)]).abs() < 1e-12);
        }
    }
}

/// Dense composition of the layer equations, written without the batched
/// aggregation code.
fn reference_logits(params: &ModelParams, cfg: &ModelConfig, g: &Graph) -> DenseMatrix {
    let a = adjacency(g);
    let relu = |m: DenseMatrix| DenseMatrix::from_fn(m.rows(), m.cols(), |i, j| m[(i, j)].max(0.0));
    let affine = |lin: &Linear, x: &DenseMatrix| {
        let wx = matmul(&lin.weight, x).unwrap();
        DenseMatrix::from_fn(wx.rows(), wx.cols(), |i, j| wx[(i, j)] + lin.bias[i])
    };
    let mut h = g.node_features().clone();
    for layer in &params.layers {
        let q = match cfg.arch {
            Arch::Gin => q_gin(&a, layer.xi),
            Arch::Gcn => q_gcn(&a),
        };
        let mut z = matmul(&h, &q).unwrap();
        for lin in &layer.linears {
            z = relu(affine(lin, &z));
        }
        h = z;
    }
    let pooled: Vec<f64> = (0..h.rows()).map(|r| h.row(r).iter().sum()).collect();
    affine(&params.head, &DenseMatrix::column_vector(&pooled))
}

#[test]
fn two_layer_forward_matches_dense_reference() {
    for arch in [Arch::Gin, Arch::Gcn] {
        let cfg = ModelConfig {
            layers: 2,
            ..config(arch, NormKind::None)
        };
        let mut params = ModelParams::init(&cfg, 21).unwrap();
        perturb_norms(&mut params, 22);
        for seed in 0..5 {
            let g = graph(7, seed, 3, 0);
            let ours = logits_of(&params, &cfg, vec![g.clone()]);
            let reference = reference_logits(&params, &cfg, &g);
            assert!(ours.sub(&reference).unwrap().max_abs() < 1e-10, "{arch}");
        }
    }
}

#[test]
fn zero_gamma_blocks_hidden_weight_gradients() {
    let cfg = config(Arch::Gin, NormKind::Graph);
    let mut params = ModelParams::init(&cfg, 1).unwrap();
    for layer in &mut params.layers {
        for n in &mut layer.norms {
            n.gamma.iter_mut().for_each(|g| *g = 0.0);
        }
    }
    let batch = GraphBatch::new(vec![graph(6, 1, 3, 0), graph(8, 2, 3, 1)]).unwrap();
    let (_, cache) = forward(&params, &cfg, &batch, Mode::Train, None).unwrap();
    let (_, grads) = backward(&params, &cfg, &batch, &batch.labels(), &cache).unwrap();
    for layer in &grads.layers {
        for lin in &layer.linears {
            assert!(lin.weight.max_abs() == 0.0);
        }
    }
}

#[test]
fn duplicated_graph_doubles_its_gradient_contribution() {
    for norm in [NormKind::Instance, NormKind::Graph] {
        let cfg = config(Arch::Gin, norm);
        let mut params = ModelParams::init(&cfg, 8).unwrap();
        perturb_norms(&mut params, 9);
        let (a, b) = (graph(6, 31, 3, 0), graph(7, 32, 3, 1));
        // summed-loss gradient = batch size × mean-loss gradient
        let summed = |graphs: Vec<Graph>| {
            let batch = GraphBatch::new(graphs).unwrap();
            let (_, cache) = forward(&params, &cfg, &batch, Mode::Train, None).unwrap();
            let (_, g) = backward(&params, &cfg, &batch, &batch.labels(), &cache).unwrap();
            g.flatten().into_iter().map(|v| v * batch.len() as f64).collect::<Vec<_>>()
        };
        let triple = summed(vec![a.clone(), b.clone(), b.clone()]);
        let ga = summed(vec![a]);
        let gb = summed(vec![b]);
        for i in 0..triple.len() {
            assert!((triple[i] - (ga[i] + 2.0 * gb[i])).abs() < 1e-10, "{norm} coordinate {i}");
        }
    }
}

fn check_gradients(cfg: &ModelConfig, seed: u64) {
    let mut params = ModelParams::init(cfg, seed).unwrap();
    perturb_norms(&mut params, seed + 1);
    let batch = GraphBatch::new(vec![graph(8, seed, 3, 0), graph(8, seed + 7, 3, 1), graph(8, seed + 9, 3, 1)]).unwrap();
    let report = gradient_check(&params, cfg, &batch, &batch.labels()).unwrap();
    assert!(report.kink_skipped * 2 <= report.coordinates, "{} of {} skipped", report.kink_skipped, report.coordinates);
    assert!(
        report.max_relative_error() <= 1e-4,
        "{:?} {:?}: worst {:?}",
        cfg.arch,
        cfg.norm,
        report.worst()
    );
}

#[test]
fn gradients_match_finite_differences() {
    for norm in NormKind::ALL {
        for seed in 0..30 {
            check_gradients(&config(Arch::Gin, norm), seed);
            check_gradients(&config(Arch::Gcn, norm), seed + 10);
        }
    }
}

#[test]
fn gradients_match_with_mean_readout_residual_and_single_norm() {
    let cfg = ModelConfig {
        readout: Readout::Mean,
        residual: true,
        norm_once: true,
        input_dim: 5,
        ..config(Arch::Gin, NormKind::Graph)
    };
    let mut params = ModelParams::init(&cfg, 3).unwrap();
    perturb_norms(&mut params, 4);
    let graphs: Vec<Graph> = (0..3).map(|i| graph(8, 60 + i, 5, (i % 2) as usize)).collect();
    let batch = GraphBatch::new(graphs).unwrap();
    let report = gradient_check(&params, &cfg, &batch, &batch.labels()).unwrap();
    assert!(report.max_relative_error() <= 1e-4, "{:?}", report.worst());
    assert!(report.tensors.iter().any(|(n, _)| n.ends_with("alpha")));
    assert!(report.tensors.iter().any(|(n, _)| n.ends_with("xi")));
}

#[test]
fn stale_cache_is_rejected() {
    let cfg = config(Arch::Gin, NormKind::Graph);
    let mut params = ModelParams::init(&cfg, 1).unwrap();
    let batch = GraphBatch::new(vec![graph(5, 1, 3, 0)]).unwrap();
    let (_, cache) = forward(&params, &cfg, &batch, Mode::Train, None).unwrap();
    params.layers[0].xi = 0.5;
    let err = backward(&params, &cfg, &batch, &[0], &cache).err().unwrap();
    assert!(matches!(err, Error::StaleCache(_)), "{err}");
    let other = GraphBatch::new(vec![graph(6, 1, 3, 0)]).unwrap();
    params.layers[0].xi = 0.0;
    assert!(backward(&params, &cfg, &other, &[0], &cache).is_err());
}

#[test]
fn non_finite_activation_names_the_layer() {
    let cfg = config(Arch::Gin, NormKind::None);
    let mut params = ModelParams::init(&cfg, 1).unwrap();
    params.layers[1].linears[0].bias[0] = f64::NAN;
    let batch = GraphBatch::new(vec![graph(5, 1, 3, 0)]).unwrap();
    match forward(&params, &cfg, &batch, Mode::Train, None).err().unwrap() {
        Error::NanActivation { layer } => assert_eq!(layer, 1),
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn input_dimension_is_checked() {
    let cfg = config(Arch::Gcn, NormKind::None);
    let params = ModelParams::init(&cfg, 1).unwrap();
    let batch = GraphBatch::new(vec![graph(5, 1, 4, 0)]).unwrap();
    assert!(forward(&params, &cfg, &batch, Mode::Train, None).is_err());
}

#[test]
fn init_is_shared_across_norm_kinds() {
    let a = ModelParams::init(&config(Arch::Gin, NormKind::None), 17).unwrap();
    let b = ModelParams::init(&config(Arch::Gin, NormKind::Graph), 17).unwrap();
    assert_eq!(a.head, b.head);
    for (la, lb) in a.layers.iter().zip(&b.layers) {
        assert_eq!(la.linears, lb.linears);
    }
}

#[test]
fn ties_resolve_to_lowest_class() {
    let cfg = config(Arch::Gcn, NormKind::None);
    let mut params = ModelParams::init(&cfg, 1).unwrap();
    params.head = Linear {
        weight: DenseMatrix::zeros(2, 5),
        bias: vec![0.0, 0.0],
    };
    let graphs = vec![graph(5, 1, 3, 1), graph(6, 2, 3, 1)];
    let running = RunningStats::new(&cfg);
    assert_eq!(predict(&params, &cfg, &running, &graphs).unwrap(), vec![0, 0]);
    assert_eq!(evaluate(&params, &cfg, &running, &graphs).unwrap(), 0.0);
}

fn toy_set() -> Vec<Graph> {
    (0..24)
        .map(|i| {
            let n = 5 + i % 4;
            let p = if i % 2 == 0 { 0.2 } else { 0.8 };
            let g = make_er_graph(n, p, i as u64).unwrap();
            let deg: Vec<f64> = g.degrees().iter().map(|&d| d as f64 / n as f64).collect();
            let feats = DenseMatrix::from_fn(3, n, |r, c| if r == 0 { deg[c] } else { 1.0 });
            g.with_features(feats).unwrap().with_label(i % 2)
        })
        .collect()
}

#[test]
fn training_reduces_loss_and_is_deterministic() {
    let cfg = config(Arch::Gin, NormKind::Batch);
    let data = toy_set();
    let settings = TrainSettings {
        epochs: 30,
        batch_size: 8,
        seed: 5,
        ..TrainSettings::default()
    };
    let run = || {
        let mut params = ModelParams::init(&cfg, 1).unwrap();
        let mut running = RunningStats::new(&cfg);
        let mut checkpoints = 0;
        let trace = train(&mut params, &mut running, &cfg, &data, Some(&data), &settings, |_, _, _| {
            checkpoints += 1;
            Ok(())
        })
        .unwrap();
        (trace, params, checkpoints)
    };
    let (trace, params, checkpoints) = run();
    assert_eq!(checkpoints, 30);
    assert_eq!(trace.iterations.len(), 90);
    assert_eq!(trace.epochs.len(), 30);
    let losses = trace.losses();
    let head: f64 = losses[..6].iter().sum::<f64>() / 6.0;
    let tail: f64 = losses[84..].iter().sum::<f64>() / 6.0;
    assert!(tail < head, "{head} -> {tail}");
    let (again, params_again, _) = run();
    assert_eq!(params, params_again);
    let (mut a, mut b) = (Vec::new(), Vec::new());
    trace.write_csv(&mut a).unwrap();
    again.write_csv(&mut b).unwrap();
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("iteration,loss,epoch,train_acc,test_acc\n"));
}

#[test]
fn frozen_xi_stays_at_zero() {
    let cfg = ModelConfig {
        xi_learnable: false,
        ..config(Arch::Gin, NormKind::Graph)
    };
    let mut params = ModelParams::init(&cfg, 1).unwrap();
    let mut running = RunningStats::new(&cfg);
    let settings = TrainSettings {
        epochs: 3,
        batch_size: 8,
        track_accuracy: false,
        ..TrainSettings::default()
    };
    train(&mut params, &mut running, &cfg, &toy_set(), None, &settings, |_, _, _| Ok(())).unwrap();
    assert!(params.layers.iter().all(|l| l.xi == 0.0));
}

#[test]
fn divergence_is_reported_with_iteration() {
    let cfg = config(Arch::Gin, NormKind::None);
    let mut params = ModelParams::init(&cfg, 1).unwrap();
    for layer in &mut params.layers {
        for lin in &mut layer.linears {
            lin.weight.data_mut().iter_mut().for_each(|w| *w *= 1e3);
        }
    }
    let mut running = RunningStats::new(&cfg);
    let settings = TrainSettings {
        epochs: 2,
        batch_size: 8,
        ..TrainSettings::default()
    };
    match train(&mut params, &mut running, &cfg, &toy_set(), None, &settings, |_, _, _| Ok(())) {
        Err(Error::Diverged { iteration, .. }) => assert_eq!(iteration, 0),
        other => panic!("expected divergence, got {other:?}"),
    }
}


