use proptest::prelude::*;

use promptstab_core::metrics::{flip_stats, pss};

const LABELS: [&str; 3] = ["A", "B", "C"];

/// Flip rate written straight from the definition, one variant at a time.
fn naive(base: &[&str], variants: &[Vec<&str>]) -> Vec<(bool, f64)> {
    (0..base.len())
        .map(|i| {
            let mut count = 0;
            for v in variants {
                if v[i] != base[i] {
                    count += 1;
                }
            }
            (count > 0, count as f64 / variants.len() as f64)
        })
        .collect()
}

fn instance() -> impl Strategy<Value = (Vec<&'static str>, Vec<Vec<&'static str>>)> {
    (1usize..=3, 1usize..=12, 1usize..=5).prop_flat_map(|(n_labels, n, k)| {
        let label = proptest::sample::select(&LABELS[..n_labels]);
        (
            proptest::collection::vec(label.clone(), n),
            proptest::collection::vec(proptest::collection::vec(label, n), k),
        )
    })
}

proptest! {
    #[test]
    fn matches_definition((base, variants) in instance()) {
        let got: Vec<(bool, f64)> = flip_stats(&base, &variants)
            .unwrap()
            .iter()
            .map(|s| (s.flip, s.flip_rate))
            .collect();
        prop_assert_eq!(got, naive(&base, &variants));
    }

    #[test]
    fn invariant_under_variant_order((base, mut variants) in instance()) {
        let a = flip_stats(&base, &variants).unwrap();
        variants.reverse();
        prop_assert_eq!(a, flip_stats(&base, &variants).unwrap());
    }

    #[test]
    fn pss_is_zero_exactly_when_all_agree((base, variants) in instance()) {
        let mut all = vec![base.clone()];
        all.extend(variants.iter().cloned());
        let p = pss(&all).unwrap();
        let f = flip_stats(&base, &variants).unwrap();
        for (pi, fi) in p.iter().zip(&f) {
            prop_assert!((0.0..=1.0).contains(pi));
            prop_assert_eq!(*pi == 0.0, !fi.flip);
        }
    }
}

#[test]
fn rejects_ragged_input() {
    assert!(flip_stats(&["A", "B"], &[vec!["A"]]).is_err());
    assert!(flip_stats::<&str>(&["A"], &[]).is_err());
}
