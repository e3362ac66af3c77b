use proptest::prelude::*;
use std::collections::BTreeSet;
use thermvis_core::dataset::make_folds;

proptest! {
    #[test]
    fn folds_partition_identities(k in 2usize..8, per in 1usize..8, seed in any::<u64>(), offset in 0u32..1000) {
        let ids: BTreeSet<u32> = (0..(k * per) as u32).map(|i| offset + 3 * i).collect();
        let plan = make_folds(&ids, k, seed).unwrap();
        prop_assert_eq!(plan.folds.len(), k);
        plan.validate(&ids).unwrap();
        let mut tested = BTreeSet::new();
        for fold in &plan.folds {
            prop_assert_eq!(fold.test.len(), per);
            prop_assert!(fold.train.is_disjoint(&fold.test));
            tested.extend(fold.test.iter().copied());
        }
        prop_assert_eq!(&tested, &ids);
        prop_assert_eq!(make_folds(&ids, k, seed).unwrap(), plan);
    }

    #[test]
    fn uneven_splits_are_rejected(k in 2usize..8, n in 1usize..60) {
        prop_assume!(n % k != 0);
        let ids: BTreeSet<u32> = (0..n as u32).collect();
        prop_assert!(make_folds(&ids, k, 0).is_err());
    }
}
