mod common;

use common::*;
use kcd_core::consistency::{consistency_matrix, consistency_score, ConsistencyMetric, MetricKind};
use kcd_core::matching::{match_random, TransformKind};
use kcd_core::{KcdError, Matrix};
use proptest::prelude::*;

fn metric(kind: MetricKind) -> ConsistencyMetric {
    ConsistencyMetric::new(kind, 1e-8).unwrap()
}

fn pair(seed: u64, b: usize, c: usize) -> (Matrix, Matrix) {
    let mut r = rng(seed);
    (uniform(&mut r, b, c), uniform(&mut r, b, c))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn correlation_ignores_affine_maps(seed in 0u64..10_000, scale in 0.1f64..10.0, shift in -5.0f64..5.0, neg in any::<bool>()) {
        let (t, s) = pair(seed, 12, 4);
        let a = if neg { -scale } else { scale };
        let base = consistency_matrix(&pooled(t.clone()), &pooled(s.clone()), metric(MetricKind::Correlation)).unwrap();
        let moved = consistency_matrix(&pooled(t.map(|v| a * v + shift)), &pooled(s), metric(MetricKind::Correlation)).unwrap();
        let sign = if neg { -1.0 } else { 1.0 };
        for (x, y) in base.m.as_slice().iter().zip(moved.m.as_slice()) {
            prop_assert!((sign * x - y).abs() < 1e-10, "{x} vs {y}");
        }
    }

    #[test]
    fn distances_are_symmetric_under_swap(seed in 0u64..10_000, l2 in any::<bool>()) {
        let kind = if l2 { MetricKind::L2 } else { MetricKind::L1 };
        let (t, s) = pair(seed, 9, 5);
        let ts = consistency_matrix(&pooled(t.clone()), &pooled(s.clone()), metric(kind)).unwrap();
        let st = consistency_matrix(&pooled(s), &pooled(t), metric(kind)).unwrap();
        prop_assert!(ts.m.max_abs_diff(&st.m.transpose()) < 1e-12);
        prop_assert!(ts.m.as_slice().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn bounded_metrics_stay_in_range(seed in 0u64..10_000) {
        let (t, s) = pair(seed, 7, 6);
        for kind in [MetricKind::Cosine, MetricKind::Correlation] {
            let m = consistency_matrix(&pooled(t.clone()), &pooled(s.clone()), metric(kind)).unwrap();
            prop_assert!(m.m.as_slice().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        let kl = consistency_matrix(&pooled(t.clone()), &pooled(s), metric(MetricKind::KlDivergence)).unwrap();
        prop_assert!(kl.m.as_slice().iter().all(|&v| v <= 0.0));
        let self_kl = consistency_matrix(&pooled(t.clone()), &pooled(t), metric(MetricKind::KlDivergence)).unwrap();
        prop_assert!(self_kl.m.trace().abs() < 1e-12);
    }

    #[test]
    fn index_map_score_matches_moved_features(seed in 0u64..10_000, c in 2usize..7) {
        let (t, s) = pair(seed, 10, c);
        let m = consistency_matrix(&pooled(t.clone()), &pooled(s.clone()), metric(MetricKind::Correlation)).unwrap();
        let perm = match_random(c, seed).unwrap();
        let moved = perm.apply(&pooled(t)).unwrap();
        let direct = consistency_matrix(&moved, &pooled(s), metric(MetricKind::Correlation)).unwrap();
        let via_map = consistency_score(&m, Some(&perm)).unwrap();
        prop_assert!((via_map - direct.m.trace()).abs() < 1e-10);
        let TransformKind::Permutation(map) = perm.kind() else { panic!("permutation expected") };
        prop_assert!((via_map - gamma(&m.m, map)).abs() < 1e-12);
    }
}

#[test]
fn constant_column_correlates_to_zero() {
    let t = Matrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 5.0], vec![1.0, -1.0]]).unwrap();
    let m = consistency_matrix(&pooled(t.clone()), &pooled(t), metric(MetricKind::Correlation)).unwrap();
    assert_eq!(m.m[(0, 0)], 0.0);
    assert!((m.m[(1, 1)] - 1.0).abs() < 1e-12);
}

#[test]
fn shape_and_sample_errors() {
    let (t, s) = pair(1, 4, 3);
    let short = s.select_rows(&[0, 1]);
    let narrow = s.select_columns(&[0, 1]);
    let cor = metric(MetricKind::Correlation);
    assert!(matches!(consistency_matrix(&pooled(t.clone()), &pooled(short), cor), Err(KcdError::ShapeMismatch(_))));
    assert!(matches!(consistency_matrix(&pooled(t.clone()), &pooled(narrow), cor), Err(KcdError::ShapeMismatch(_))));
    let one = t.select_rows(&[0]);
    assert!(matches!(consistency_matrix(&pooled(one.clone()), &pooled(one), cor), Err(KcdError::InsufficientSamples(_))));
    assert!(ConsistencyMetric::new(MetricKind::L1, 0.0).is_err());
}

#[test]
fn save_load_keeps_metric() {
    let dir = tempfile::tempdir().unwrap();
    let (t, s) = pair(3, 6, 3);
    let m = consistency_matrix(&pooled(t), &pooled(s), ConsistencyMetric::new(MetricKind::L2, 1e-3).unwrap()).unwrap();
    let p = dir.path().join("M.npy");
    m.save(&p).unwrap();
    assert_eq!(kcd_core::consistency::ConsistencyMatrix::load(&p).unwrap(), m);
}
