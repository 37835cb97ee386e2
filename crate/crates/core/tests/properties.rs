// SPDX-License-Identifier: MIT OR Apache-2.0

use proptest::collection::vec;
use proptest::prelude::*;

use xconsist::corpus::LanguageTable;
use xconsist::evolution::{Metric, Pairing};
use xconsist::metrics::{pair_rankc, precision_at_j, rankc_weights, top1_accuracy, CandidateList};
use xconsist::repsim::cka_linear;
use xconsist::stats::{average_ranks, spearman, ConsistencyReport, ReportLayer, ReportRow, NO_INTERVENTION};
use xconsist::toymodel::tensor::Mat;

/// A permutation of `0..n` taken from sort keys.
fn perm(keys: &[u32]) -> Vec<u32> {
    let mut idx: Vec<u32> = (0..keys.len() as u32).collect();
    idx.sort_by_key(|&i| (keys[i as usize], i));
    idx
}

fn list(tokens: &[u32]) -> CandidateList {
    CandidateList::from_ranked(tokens.iter().map(|&t| vec![t]).collect()).unwrap()
}

/// Two ranked lists of distinct tokens drawn from a shared pool.
fn list_pair() -> impl Strategy<Value = (Vec<u32>, Vec<u32>)> {
    (1usize..8).prop_flat_map(|n| {
        (vec(any::<u32>(), 2 * n), vec(any::<u32>(), 2 * n)).prop_map(move |(a, b)| {
            (perm(&a)[..n].to_vec(), perm(&b)[..n].to_vec())
        })
    })
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Mat> {
    vec(-5.0f64..5.0, rows * cols).prop_map(move |d| Mat::from_vec(rows, cols, d))
}

proptest! {
    #[test]
    fn rankc_lies_in_unit_interval((a, b) in list_pair()) {
        let r = pair_rankc(&list(&a), &list(&b)).unwrap();
        prop_assert!((0.0..=1.0 + 1e-15).contains(&r));
    }

    #[test]
    fn rankc_is_symmetric((a, b) in list_pair()) {
        let ab = pair_rankc(&list(&a), &list(&b)).unwrap();
        let ba = pair_rankc(&list(&b), &list(&a)).unwrap();
        prop_assert_eq!(ab, ba);
    }

    #[test]
    fn rankc_of_a_list_with_itself_is_one((a, _) in list_pair()) {
        let r = pair_rankc(&list(&a), &list(&a)).unwrap();
        prop_assert!((r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn full_prefix_precision_counts_shared_items((a, b) in list_pair()) {
        let n = a.len();
        let shared = a.iter().filter(|t| b.contains(t)).count();
        let p = precision_at_j(&list(&a), &list(&b), n).unwrap();
        prop_assert_eq!(p, shared as f64 / n as f64);
    }

    #[test]
    fn top1_is_zero_or_one((a, b) in list_pair()) {
        let t = top1_accuracy([(&list(&a), &list(&b))]).unwrap();
        prop_assert_eq!(t, if a[0] == b[0] { 1.0 } else { 0.0 });
    }

    #[test]
    fn weights_are_decreasing_and_normalised(n in 1usize..40) {
        let w = rankc_weights(n);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.windows(2).all(|p| p[0] > p[1]));
    }

    #[test]
    fn average_ranks_sum_to_triangular_number(x in vec(-3i32..3, 1..30)) {
        let x: Vec<f64> = x.into_iter().map(f64::from).collect();
        let n = x.len() as f64;
        let r = average_ranks(&x);
        prop_assert!((r.iter().sum::<f64>() - n * (n + 1.0) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn spearman_is_bounded_symmetric_and_rank_invariant(
        x in vec(-100.0f64..100.0, 3..25),
        y_seed in vec(-100.0f64..100.0, 25),
    ) {
        let y = &y_seed[..x.len()];
        let xy = spearman(&x, y);
        let yx = spearman(y, &x);
        match (xy, yx) {
            (Ok(a), Ok(b)) => {
                prop_assert!((-1.0..=1.0).contains(&a.rho));
                prop_assert!((0.0..=1.0).contains(&a.p_value));
                prop_assert!((a.rho - b.rho).abs() < 1e-12);
                let warped: Vec<f64> = x.iter().map(|v| v.powi(3) + 3.0 * v).collect();
                let c = spearman(&warped, y).unwrap();
                prop_assert!((a.rho - c.rho).abs() < 1e-12);
            }
            (Err(_), Err(_)) => {}
            other => prop_assert!(false, "asymmetric definedness: {:?}", other),
        }
    }

    #[test]
    fn cka_is_bounded_and_symmetric(x in matrix(12, 4), y in matrix(12, 3)) {
        let xy = cka_linear(&x, &y).unwrap();
        let yx = cka_linear(&y, &x).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&xy));
        prop_assert!((xy - yx).abs() < 1e-12);
    }

    #[test]
    fn cka_ignores_isotropic_scaling(x in matrix(10, 3), y in matrix(10, 3), s in 0.01f64..100.0) {
        let a = cka_linear(&x, &y).unwrap();
        let b = cka_linear(&x.scale(s), &y).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn report_csv_round_trip(values in vec(0.0f64..=1.0, 1..20)) {
        let table = LanguageTable::default();
        let rows = values.iter().enumerate().map(|(i, &v)| {
            ReportRow::new(&table, "m", "en", "de", Metric::Rankc, ReportLayer::Index(i), v, Pairing::CmVsMono, NO_INTERVENTION)
                .unwrap()
        });
        let report = ConsistencyReport::from_rows(rows).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        report.write_csv(&path).unwrap();
        let back = ConsistencyReport::read_csv(&path).unwrap();
        prop_assert_eq!(back.rows(), report.rows());
    }
}
