use modalseg_core::eval::{dice, region_mask, Region};
use modalseg_core::relevance::{evidence, OddsConfig};
use proptest::prelude::*;

proptest! {
    #[test]
    fn dice_is_symmetric_bounded_and_regions_nest(
        pairs in prop::collection::vec((0u8..4, 0u8..4), 1..200)
    ) {
        let (pred, gt): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
        for region in Region::ALL {
            let p = region_mask(&pred, region).unwrap();
            let g = region_mask(&gt, region).unwrap();
            let d = dice(&p, &g).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert_eq!(d, dice(&g, &p).unwrap());
            prop_assert_eq!(dice(&p, &p).unwrap(), 1.0);
        }
        let wt = region_mask(&gt, Region::WT).unwrap();
        let tc = region_mask(&gt, Region::TC).unwrap();
        let ec = region_mask(&gt, Region::EC).unwrap();
        for i in 0..gt.len() {
            prop_assert!(!ec[i] || tc[i]);
            prop_assert!(!tc[i] || wt[i]);
        }
    }

    #[test]
    fn evidence_is_antisymmetric_and_bounded(
        p in 0.0f64..=1.0,
        q in 0.0f64..=1.0,
        eps in 1e-9f64..0.1,
    ) {
        let cfg = OddsConfig { eps };
        let we = evidence(p, q, &cfg);
        prop_assert!(we.is_finite());
        prop_assert_eq!(we, -evidence(q, p, &cfg));
        prop_assert!(we.abs() <= cfg.bound());
        prop_assert_eq!(evidence(p, p, &cfg), 0.0);
    }
}
