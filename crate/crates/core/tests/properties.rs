use std::path::Path;

use kmp_core::distill::kl_divergence;
use kmp_core::experiment::{DatasetSource, ExperimentManifest, Method};
use kmp_core::graph::{add_feature_noise, make_split, row_normalize, Graph, Setting, SplitParams};
use kmp_core::io::{
    decode_checkpoint, decode_features, decode_pe, encode_features, parse_edges, parse_key_values, parse_labels,
    parse_metrics, SbmSpec,
};
use kmp_core::models::ModelKind;
use kmp_core::sparse::CsrMatrix;
use kmp_core::spectral::eigen::eigendecompose;
use kmp_core::Tensor;
use proptest::prelude::*;

fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Tensor> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-5.0f64..5.0, r * c).prop_map(move |d| Tensor::from_vec(r, c, d).unwrap())
    })
}

fn simplex_pair(max_rows: usize, max_cols: usize) -> impl Strategy<Value = (Tensor, Tensor)> {
    (1..=max_rows, 2..=max_cols).prop_flat_map(|(r, c)| {
        let side = move || prop::collection::vec(-4.0f64..4.0, r * c).prop_map(move |d| Tensor::from_vec(r, c, d).unwrap().softmax_rows());
        (side(), side())
    })
}

fn random_graph() -> impl Strategy<Value = Graph> {
    (6usize..40, 2usize..4).prop_flat_map(|(n, classes)| {
        let edges = prop::collection::vec((0..n, 0..n), 0..n * 3);
        let labels = prop::collection::vec(0..classes, n);
        (edges, labels).prop_map(move |(edges, labels)| {
            let features = Tensor::from_fn(n, 3, |i, j| ((i * 7 + j * 3) % 5) as f64);
            Graph::build(&edges, features, labels.into_iter().map(Some).collect(), classes).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kl_is_nonnegative_and_zero_on_self((p, q) in simplex_pair(6, 6)) {
        let d = kl_divergence(&p, &q).unwrap();
        prop_assert!(d >= -1e-12, "kl {d}");
        prop_assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_are_distributions(t in matrix(8, 8)) {
        let s = t.softmax_rows();
        for r in 0..s.rows() {
            let sum: f64 = s.row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(s.row(r).iter().all(|&x| x > 0.0));
        }
    }

    #[test]
    fn sparse_product_matches_dense(a in matrix(8, 8), seed in 0u64..1000) {
        let sparse_a = a.map(|x| if x.abs() < 2.5 { 0.0 } else { x });
        let csr = CsrMatrix::from_dense(&sparse_a);
        prop_assert_eq!(csr.to_dense(), sparse_a.clone());
        let b = Tensor::from_fn(a.cols(), 3, |i, j| ((i as u64 * 31 + j as u64 * 17 + seed) % 11) as f64 - 5.0);
        let got = csr.matmul(&b).unwrap();
        let want = sparse_a.matmul(&b).unwrap();
        for (x, y) in got.data().iter().zip(want.data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn eigendecomposition_residual_is_small(a in matrix(12, 12)) {
        let n = a.rows();
        let sym = Tensor::from_fn(n, n, |i, j| {
            let (x, y) = (i % a.rows(), j % a.cols());
            let (u, v) = (j % a.rows(), i % a.cols());
            0.5 * (a.get(x, y) + a.get(u, v))
        });
        let e = eigendecompose(&sym).unwrap();
        prop_assert!(e.max_residual(&sym) < 1e-8 * n as f64);
        prop_assert!(e.values.windows(2).all(|w| w[0] <= w[1]));
        for i in 0..n {
            let norm: f64 = e.vector(i).iter().map(|x| x * x).sum();
            prop_assert!((norm - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn splits_are_disjoint_and_seeded(g in random_graph(), seed in 0u64..50, induc in any::<bool>()) {
        let mode = if induc { Setting::Inductive } else { Setting::Transductive };
        let params = SplitParams { labeled_per_class: 1, validation_count: 2, holdout_fraction: 0.2 };
        let Ok(s) = make_split(&g, mode, params, seed) else { return Ok(()) };
        s.check_disjoint().unwrap();
        prop_assert_eq!(make_split(&g, mode, params, seed).unwrap(), s.clone());
        let mut all: Vec<usize> = s.train_labeled.iter().chain(&s.train_soft).chain(&s.validation).chain(&s.test).copied().collect();
        all.sort_unstable();
        all.dedup();
        prop_assert_eq!(all.len(), g.num_nodes());
        if let Some(obs) = &s.observed {
            prop_assert!(s.test.iter().all(|t| !obs.contains(t)));
        }
    }

    #[test]
    fn graph_build_is_symmetric_without_self_loops(g in random_graph()) {
        for u in 0..g.num_nodes() {
            prop_assert!(!g.has_edge(u, u));
            for &v in g.neighbors(u) {
                prop_assert!(g.has_edge(v, u));
            }
        }
        prop_assert_eq!(g.degrees().iter().sum::<usize>(), 2 * g.num_edges());
    }

    #[test]
    fn row_normalize_sums_to_one_or_zero(t in matrix(8, 6)) {
        let pos = t.map(f64::abs);
        let n = row_normalize(&pos);
        for r in 0..n.rows() {
            let sum: f64 = n.row(r).iter().sum();
            let orig: f64 = pos.row(r).iter().sum();
            let ok = if orig == 0.0 { sum == 0.0 } else { (sum - 1.0).abs() < 1e-12 };
            prop_assert!(ok, "row {r} sums to {sum}");
        }
    }

    #[test]
    fn zero_noise_is_identity(t in matrix(8, 6), seed in any::<u64>()) {
        prop_assert_eq!(add_feature_noise(&t, 0.0, seed).unwrap(), t.clone());
        let full = add_feature_noise(&t, 1.0, seed).unwrap();
        prop_assert_eq!(add_feature_noise(&t, 1.0, seed).unwrap(), full);
    }

    #[test]
    fn features_encoding_round_trips(t in matrix(10, 10)) {
        prop_assert_eq!(decode_features(Path::new("f"), &encode_features(&t)).unwrap(), t);
    }

    #[test]
    fn decoders_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let p = Path::new("fuzz");
        let _ = decode_features(p, &bytes);
        let _ = decode_checkpoint(p, &bytes);
        let _ = decode_pe(p, &bytes);
        let text = String::from_utf8_lossy(&bytes);
        let _ = parse_edges(p, &text);
        let _ = parse_labels(p, &text);
        let _ = parse_key_values(p, &text);
        let _ = parse_metrics(p, &text);
    }

    #[test]
    fn manifest_render_round_trips(
        gamma in 0.0f64..5.0,
        theta in 0.0f64..1.0,
        k in 1usize..20,
        noise in 0.0f64..1.0,
        sage in any::<bool>(),
        induc in any::<bool>(),
    ) {
        let teacher = if sage { ModelKind::Sage } else { ModelKind::Gcn };
        let source = DatasetSource::Sbm { spec: SbmSpec::new(vec![10, 12], 0.3, 0.05, 4), seed: 2 };
        let mut m = ExperimentManifest::new(source, teacher, Method::KmpPe).unwrap();
        m.distill.gamma = gamma;
        m.distill.theta = theta;
        m.pe_k = k;
        m.noise = noise;
        m.setting = if induc { Setting::Inductive } else { Setting::Transductive };
        let again = ExperimentManifest::parse(Path::new("m"), &m.render(), None).unwrap();
        prop_assert_eq!(again, m);
    }
}
