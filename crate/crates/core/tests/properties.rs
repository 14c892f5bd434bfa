use proptest::prelude::*;
use wsseg::evaluation::{dsc, kfold_split};
use wsseg::network::ParameterSet;
use wsseg::network::ParamInfo;
use wsseg::nn::Tensor;
use wsseg::training::class_weights;
use wsseg::weakmodels::{moi1_weights, moi2_weights, power_transform, validate_weight_map};
use wsseg::Grid;

fn mask(side: usize) -> impl Strategy<Value = Grid<u8>> {
    proptest::collection::vec(0u8..=1, side * side).prop_map(move |v| Grid::new(side, side, v).unwrap())
}

proptest! {
    #[test]
    fn dsc_is_symmetric_bounded_and_permutation_invariant(
        (a, b) in (mask(6), mask(6)),
        shift in 0usize..36,
    ) {
        let d = dsc(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(d.to_bits(), dsc(&b, &a).unwrap().to_bits());
        let rot = |m: &Grid<u8>| {
            let mut v = m.data().to_vec();
            v.rotate_left(shift);
            Grid::new(6, 6, v).unwrap()
        };
        prop_assert_eq!(d.to_bits(), dsc(&rot(&a), &rot(&b)).unwrap().to_bits());
        prop_assert_eq!(dsc(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn weight_maps_are_valid_for_any_mask(m in mask(8), eps in 0.01f64..5.0) {
        for w in [moi1_weights(&m, eps).unwrap(), moi2_weights(&m, eps).unwrap()] {
            prop_assert!(validate_weight_map(&w.map, &m).is_ok());
        }
    }

    #[test]
    fn larger_powers_never_raise_confidence(
        v in proptest::collection::vec(1e-6f32..=1.0, 16),
        n in 0.1f64..4.0,
        extra in 0.0f64..2.0,
    ) {
        let wm = Grid::new(4, 4, v).unwrap();
        let lo = power_transform(&wm, n).unwrap();
        let hi = power_transform(&wm, n + extra).unwrap();
        for (a, b) in lo.data().iter().zip(hi.data()) {
            prop_assert!(*b <= *a && *b >= 0.0 && *a <= 1.0);
        }
    }

    #[test]
    fn class_weights_balance_the_classes(labels in proptest::collection::vec(0u8..=1, 1..200)) {
        let cw = class_weights(&labels);
        let n1 = labels.iter().filter(|&&y| y == 1).count() as f64;
        let n0 = labels.len() as f64 - n1;
        if n0 > 0.0 && n1 > 0.0 {
            prop_assert!(!cw.fallback);
            prop_assert!((cw.background * n0 - n1 * cw.foreground).abs() <= 1e-9 * n1);
        } else {
            prop_assert!(cw.fallback);
        }
    }

    #[test]
    fn folds_partition_the_samples(n in 2usize..80, k in 2usize..8, seed in any::<u64>()) {
        prop_assume!(n >= k);
        let folds = kfold_split(n, k, seed).unwrap();
        let mut seen = vec![0; n];
        for f in &folds {
            prop_assert!(f.test.len() == n / k || f.test.len() == n / k + 1);
            prop_assert_eq!(f.train.len() + f.test.len(), n);
            for &i in &f.test {
                seen[i] += 1;
                prop_assert!(!f.train.contains(&i));
            }
        }
        prop_assert!(seen.iter().all(|&s| s == 1));
        prop_assert_eq!(folds, kfold_split(n, k, seed).unwrap());
    }

    #[test]
    fn averaged_weights_stay_in_the_hull_of_observed_values(
        seq in proptest::collection::vec(proptest::collection::vec(-100.0f32..100.0, 4), 1..60),
        beta in 0.5f64..0.9999,
    ) {
        let info = vec![ParamInfo { name: "w".into(), trainable: true }];
        let mut p = ParameterSet::new(info, vec![Tensor::from_vec(&[4], seq[0].clone()).unwrap()], beta).unwrap();
        let mut lo = seq[0].clone();
        let mut hi = seq[0].clone();
        for step in &seq[1..] {
            p.values_mut()[0].data_mut().copy_from_slice(step);
            p.ema_update().unwrap();
            for (j, &v) in step.iter().enumerate() {
                lo[j] = lo[j].min(v);
                hi[j] = hi[j].max(v);
                let s = p.shadow()[0].data()[j];
                prop_assert!(lo[j] <= s && s <= hi[j], "{s} outside [{}, {}]", lo[j], hi[j]);
            }
        }
    }
}
