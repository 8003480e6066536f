mod common;

use common::*;
use modelbridge::metrics::{balanced_accuracy, f1_scores, MetricSet};
use rand::Rng;

#[test]
fn matches_counting_oracle_exactly() {
    let mut r = rng(2024);
    for case in 0..1000 {
        let classes = r.random_range(2..=6);
        let n = r.random_range(1..=60);
        let y: Vec<usize> = (0..n).map(|_| r.random_range(0..classes)).collect();
        let p: Vec<usize> = (0..n).map(|_| r.random_range(0..classes)).collect();
        let m = MetricSet::compute(&y, &p, classes).unwrap();
        let o = naive_metrics(&y, &p, classes);
        assert_eq!(m.balanced_accuracy.to_bits(), o.bacc.to_bits(), "case {case}");
        assert_eq!(m.f1_macro.to_bits(), o.f1_macro.to_bits(), "case {case}");
        assert_eq!(m.f1_weighted.to_bits(), o.f1_weighted.to_bits(), "case {case}");
        for (c, row) in m.confusion.iter().enumerate() {
            assert_eq!(row.iter().sum::<u64>() as usize, y.iter().filter(|t| **t == c).count());
        }
        assert!([m.balanced_accuracy, m.f1_macro, m.f1_weighted].iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn hand_computed_example() {
    let (y, p) = ([0, 0, 1, 1], [0, 1, 1, 1]);
    assert_eq!(balanced_accuracy(&y, &p).unwrap(), 0.75);
    let f = f1_scores(&y, &p).unwrap();
    assert!((f.macro_f1 - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-15);
    assert!((f.macro_f1 - 0.7333).abs() < 1e-4);
    assert_eq!(f.macro_f1, f.weighted_f1);
}

#[test]
fn uniform_random_predictor_is_near_chance() {
    let mut r = rng(5);
    let n = 30_000;
    let y: Vec<usize> = (0..n).map(|i| i % 3).collect();
    let p: Vec<usize> = (0..n).map(|_| r.random_range(0..3)).collect();
    let b = balanced_accuracy(&y, &p).unwrap();
    assert!((b - 1.0 / 3.0).abs() < 0.01, "{b}");
}
