//! Average accuracy and forgetting against a literal brute-force reading of the definitions.

mod common;

use common::oracles::{brute_avg_accuracy, brute_avg_forgetting, random_matrix};
use metacl::bench::metrics::AccuracyMatrix;
use metacl::rng::RngStream;

#[test]
fn hundred_random_matrices_match_the_brute_force_oracle() {
    let root = RngStream::new(5);
    for i in 0..100 {
        let mut rng = root.child("matrix", i);
        let k = 1 + rng.below(10);
        let rows = random_matrix(k, &mut rng);
        let m = AccuracyMatrix::from_rows(rows.clone()).unwrap();
        let a = m.avg_accuracy().unwrap();
        let f = m.avg_forgetting().unwrap();
        assert!((a - brute_avg_accuracy(&rows)).abs() < 1e-12, "matrix {i}: A {a}");
        assert!((f - brute_avg_forgetting(&rows)).abs() < 1e-12, "matrix {i}: F {f}");
    }
}

#[test]
fn hand_derived_two_task_example() {
    let m = AccuracyMatrix::from_rows(vec![vec![0.9], vec![0.8, 0.7]]).unwrap();
    assert!((m.avg_accuracy().unwrap() - 0.825).abs() < 1e-12);
    assert!((m.avg_forgetting().unwrap() - 0.1).abs() < 1e-12);
}

#[test]
fn constant_matrix_has_that_accuracy_and_no_forgetting() {
    let rows: Vec<Vec<f64>> = (1..=5).map(|k| vec![0.6; k]).collect();
    let m = AccuracyMatrix::from_rows(rows).unwrap();
    assert!((m.avg_accuracy().unwrap() - 0.6).abs() < 1e-12);
    assert!(m.avg_forgetting().unwrap().abs() < 1e-12);
}

#[test]
fn csv_parsing_matches_direct_construction() {
    let m = AccuracyMatrix::parse_csv("0.9\n0.8, 0.7\n\n").unwrap();
    assert_eq!(m, AccuracyMatrix::from_rows(vec![vec![0.9], vec![0.8, 0.7]]).unwrap());
}
