//! Exact signed-rank p-values against a brute-force oracle that
//! enumerates every sign assignment directly.

use fairclip_core::analysis::{wilcoxon_signed_rank, PairedSample};
use fairclip_core::numerics::{Stream, StreamKey};
use proptest::prelude::*;

fn pairs_from(diffs: &[f64]) -> Vec<PairedSample> {
    diffs
        .iter()
        .enumerate()
        .map(|(i, d)| PairedSample {
            seed: i as u64,
            dataset: "d".into(),
            attribute: "a".into(),
            value_a: *d,
            value_b: 0.0,
        })
        .collect()
}

/// Enumerate all 2^n sign assignments of the ranked absolute differences
/// and count those at least as far from the center as the observed rank
/// sum. Mid-ranks are assigned by averaging tied positions.
fn enumeration_oracle(diffs: &[f64]) -> Option<f64> {
    let nonzero: Vec<f64> = diffs.iter().copied().filter(|d| *d != 0.0).collect();
    let n = nonzero.len();
    if n == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| nonzero[i].abs().partial_cmp(&nonzero[j].abs()).unwrap());
    let mut ranks = vec![0.0; n];
    let mut pos = 0;
    while pos < n {
        let mut end = pos;
        while end + 1 < n && nonzero[order[end + 1]].abs() == nonzero[order[pos]].abs() {
            end += 1;
        }
        let mid = (pos + 1 + end + 1) as f64 / 2.0;
        for k in pos..=end {
            ranks[order[k]] = mid;
        }
        pos = end + 1;
    }
    let total: f64 = ranks.iter().sum();
    let observed: f64 =
        (0..n).filter(|&i| nonzero[i] > 0.0).map(|i| ranks[i]).sum();
    let dev_obs = (observed - total / 2.0).abs();

    let mut hits = 0u64;
    for mask in 0u64..(1u64 << n) {
        let w_plus: f64 =
            (0..n).filter(|&i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        if (w_plus - total / 2.0).abs() >= dev_obs - 1e-12 {
            hits += 1;
        }
    }
    Some(hits as f64 / (1u64 << n) as f64)
}

#[test]
fn all_positive_five_is_exactly_one_sixteenth_of_half() {
    let out = wilcoxon_signed_rank(&pairs_from(&[1.0, 2.0, 3.0, 4.0, 5.0])).unwrap();
    assert_eq!(out.p_value, 0.0625);
    assert_eq!(enumeration_oracle(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap(), 0.0625);
}

#[test]
fn oracle_agreement_on_fixed_tricky_cases() {
    let cases: Vec<Vec<f64>> = vec![
        vec![1.0, -1.0],
        vec![1.0, 1.0, -1.0],
        vec![2.0, 2.0, 2.0, -2.0, -2.0],
        vec![1.0, -2.0, 3.0, -4.0, 5.0, -6.0],
        vec![0.5, 0.5, 0.5, 0.5],
        vec![3.0, -3.0, 1.0, -1.0, 2.0, -2.0],
        vec![1.0, 2.0, 2.0, 3.0, 3.0, 3.0, -1.0],
    ];
    for diffs in cases {
        let ours = wilcoxon_signed_rank(&pairs_from(&diffs)).unwrap();
        let oracle = enumeration_oracle(&diffs).unwrap();
        assert!(
            (ours.p_value - oracle).abs() <= 1e-12,
            "{diffs:?}: {p} vs {oracle}",
            p = ours.p_value
        );
        assert!(ours.exact);
    }
}

#[test]
fn oracle_agreement_thousand_random_sets() {
    let mut stream = Stream::new(StreamKey::new(6021, "wilcoxon", 0, 0));
    for trial in 0..1000 {
        let n = 1 + (stream.next_u64() % 12) as usize;
        // draw from a small integer lattice so ties and zeros are common
        let diffs: Vec<f64> =
            (0..n).map(|_| ((stream.next_u64() % 11) as f64 - 5.0) / 2.0).collect();
        match (wilcoxon_signed_rank(&pairs_from(&diffs)), enumeration_oracle(&diffs)) {
            (Ok(ours), Some(oracle)) => {
                assert!(
                    (ours.p_value - oracle).abs() <= 1e-12,
                    "trial {trial} {diffs:?}: {p} vs {oracle}",
                    p = ours.p_value
                );
            }
            (Err(_), None) => {} // all differences zero on both sides
            (ours, oracle) => panic!("trial {trial} {diffs:?}: disagreement {ours:?} vs {oracle:?}"),
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn prop_exact_p_matches_enumeration(diffs in prop::collection::vec(-6i8..=6i8, 1..12)) {
        let diffs: Vec<f64> = diffs.iter().map(|d| f64::from(*d)).collect();
        match (wilcoxon_signed_rank(&pairs_from(&diffs)), enumeration_oracle(&diffs)) {
            (Ok(ours), Some(oracle)) => prop_assert!((ours.p_value - oracle).abs() <= 1e-12),
            (Err(_), None) => {}
            (ours, oracle) => prop_assert!(false, "disagreement {ours:?} vs {oracle:?}"),
        }
    }

    #[test]
    fn prop_negation_symmetry(diffs in prop::collection::vec(-6i8..=6i8, 1..12)) {
        let diffs: Vec<f64> = diffs.iter().map(|d| f64::from(*d)).collect();
        let negated: Vec<f64> = diffs.iter().map(|d| -d).collect();
        let a = wilcoxon_signed_rank(&pairs_from(&diffs));
        let b = wilcoxon_signed_rank(&pairs_from(&negated));
        match (a, b) {
            (Ok(x), Ok(y)) => {
                prop_assert_eq!(x.p_value, y.p_value);
                prop_assert_eq!(x.statistic, y.statistic);
            }
            (Err(_), Err(_)) => {}
            other => prop_assert!(false, "asymmetry {other:?}"),
        }
    }
}
