use proptest::prelude::*;

use graphnorm::graph::{adjacency, assign_degree_features, make_er_graph, GraphBatch};
use graphnorm::linalg::{matmul, singular_values, DenseMatrix};
use graphnorm::nn::{forward, Arch, ModelConfig, ModelParams};
use graphnorm::norm::{normalize, q_gcn, q_gin, shift_matrix, Mode, NormKind, NormSpec};
use graphnorm::spectral::{interlaces, spectrum_report};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DenseMatrix> {
    proptest::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |v| DenseMatrix::new(rows, cols, v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn shifted_spectrum_interlaces(n in 2usize..14, p in 0.1f64..0.9, seed in 0u64..10_000, xi in 0.0f64..1.5, gcn in any::<bool>()) {
        let g = make_er_graph(n, p, seed).unwrap();
        let a = adjacency(&g);
        let q = if gcn { q_gcn(&a) } else { q_gin(&a, xi) };
        let report = spectrum_report(&q).unwrap();
        prop_assert!(report.interlacing_ok);
        prop_assert!(report.zero_singular_present);
        prop_assert!(report.mu.max() <= report.lambda.max() * (1.0 + 1e-9));
    }

    #[test]
    fn shift_projector_is_idempotent_and_kills_ones(n in 1usize..12) {
        let nm = shift_matrix(n);
        let nn = matmul(&nm, &nm).unwrap();
        prop_assert!(nn.sub(&nm).unwrap().max_abs() <= 1e-14);
        let ones = nm.matvec(&vec![1.0; n]).unwrap();
        prop_assert!(ones.iter().all(|v| v.abs() <= 1e-14));
    }

    #[test]
    fn singular_values_match_transpose(m in matrix(4, 6)) {
        let a = singular_values(&m).unwrap();
        let b = singular_values(&m.transpose()).unwrap();
        let scale = a.max().max(1.0);
        for (x, y) in a.values().iter().zip(b.values()) {
            prop_assert!((x - y).abs() <= 1e-10 * scale);
        }
    }

    #[test]
    fn interlacing_accepts_nested_sequences(mut l in proptest::collection::vec(0.0f64..10.0, 2..10), t in proptest::collection::vec(0.0f64..1.0, 9)) {
        l.sort_by(f64::total_cmp);
        // one value in each gap between consecutive λ (the smallest μ is not passed)
        let mut m: Vec<f64> = l.windows(2).zip(&t).map(|(w, s)| w[0] + s * (w[1] - w[0])).collect();
        prop_assert!(interlaces(&l, &m, 1e-12));
        let top = m.len() - 1;
        m[top] = l[l.len() - 1] + 1.0;
        prop_assert!(!interlaces(&l, &m, 1e-12));
    }

    #[test]
    fn graph_norm_with_unit_alpha_equals_instance(h in matrix(3, 9), split in 1usize..8) {
        let g1 = make_er_graph(split, 0.5, 1).unwrap();
        let g2 = make_er_graph(9 - split, 0.5, 2).unwrap();
        let batch = GraphBatch::new(assign_degree_features(vec![g1, g2]).unwrap()).unwrap();
        let a = normalize(&h, &batch, &NormSpec::new(NormKind::Graph, 3).with_alpha(1.0), None, Mode::Train).unwrap();
        let b = normalize(&h, &batch, &NormSpec::new(NormKind::Instance, 3), None, Mode::Train).unwrap();
        prop_assert!(a.sub(&b).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn instance_like_norms_are_batch_independent(h in matrix(2, 10), split in 1usize..9, graph in any::<bool>()) {
        // a per-graph normalization of one graph does not depend on the rest of the batch
        let kind = if graph { NormKind::Graph } else { NormKind::Instance };
        let g1 = make_er_graph(split, 0.5, 3).unwrap();
        let g2 = make_er_graph(10 - split, 0.5, 4).unwrap();
        let graphs = assign_degree_features(vec![g1, g2]).unwrap();
        let spec = NormSpec::new(kind, 2).with_alpha(0.6);
        let joint = normalize(&h, &GraphBatch::new(graphs.clone()).unwrap(), &spec, None, Mode::Train).unwrap();
        let first = DenseMatrix::from_fn(2, split, |r, c| h[(r, c)]);
        let alone = normalize(&first, &GraphBatch::new(vec![graphs[0].clone()]).unwrap(), &spec, None, Mode::Train).unwrap();
        for r in 0..2 {
            for c in 0..split {
                prop_assert!((joint[(r, c)] - alone[(r, c)]).abs() <= 1e-12);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn logits_are_invariant_to_node_relabelling(seed in 0u64..1000, n in 3usize..9, kind in 0usize..5) {
        let norm = NormKind::ALL[kind];
        let g = assign_degree_features(vec![make_er_graph(n, 0.5, seed).unwrap()]).unwrap().remove(0);
        let perm: Vec<usize> = (0..n).rev().collect();
        let cfg = ModelConfig { layers: 2, hidden_dim: 4, norm, ..ModelConfig::new(Arch::Gin, g.feature_dim(), 2) };
        let params = ModelParams::init(&cfg, seed).unwrap();
        let a = forward(&params, &cfg, &GraphBatch::new(vec![g.clone()]).unwrap(), Mode::Train, None).unwrap().0;
        let b = forward(&params, &cfg, &GraphBatch::new(vec![g.permuted(&perm).unwrap()]).unwrap(), Mode::Train, None).unwrap().0;
        prop_assert!(a.sub(&b).unwrap().max_abs() <= 1e-9 * a.max_abs().max(1.0));
    }
}
