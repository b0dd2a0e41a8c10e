//! Property tests over randomly generated RI-CLPM model families: the parser
//! round-trips its own printer, and candidate enumeration never proposes a
//! parameter the model already has.

use std::collections::BTreeSet;

use nalgebra::Matrix2;
use proptest::prelude::*;

use panelwald::closed_form::RiclpmClosedForm;
use panelwald::dsl::{enumerate_candidates, parse_model, print_model, ModelSource};
use panelwald::ram::RamSystem;

fn pd2(v1: f64, v2: f64, r: f64) -> Matrix2<f64> {
    let c = r * (v1 * v2).sqrt();
    Matrix2::new(v1, c, c, v2)
}

prop_compose! {
    fn arb_riclpm()(
        waves in 3usize..6,
        ar in -0.5f64..0.5,
        cl in -0.3f64..0.3,
        v_eta in 0.5f64..1.5,
        v_eps in 0.5f64..1.5,
        v_inn in 0.5f64..1.5,
        r in -0.6f64..0.6,
    ) -> RiclpmClosedForm {
        RiclpmClosedForm::new(
            Matrix2::new(ar, cl, cl, ar),
            pd2(v_eta, v_eta, r),
            pd2(v_eps, v_eps, r),
            pd2(v_inn, v_inn, r),
            waves,
        )
    }
}

proptest! {
    #[test]
    fn parse_print_fixpoint(cf in arb_riclpm()) {
        let text = cf.to_model_text();
        let spec = parse_model(&ModelSource::new("a", text)).unwrap();
        let printed = print_model(&spec);
        let reparsed = parse_model(&ModelSource::new("a", printed.clone())).unwrap();
        prop_assert_eq!(print_model(&reparsed), printed);
        prop_assert_eq!(reparsed.params.len(), spec.params.len());
    }

    #[test]
    fn candidates_disjoint_from_spec(cf in arb_riclpm()) {
        let spec = parse_model(&ModelSource::new("a", cf.to_model_text())).unwrap();
        let existing: BTreeSet<String> = spec.params.iter().map(|p| p.key()).collect();
        let cands = enumerate_candidates(&spec);
        for c in &cands {
            prop_assert!(!existing.contains(&c.key()), "{} already in spec", c.key());
        }
        // no duplicates among the candidates themselves
        let keys: BTreeSet<String> = cands.iter().map(|p| p.key()).collect();
        prop_assert_eq!(keys.len(), cands.len());
    }

    #[test]
    fn candidate_count_bound(cf in arb_riclpm()) {
        // upper bound: all ordered pairs as regressions plus all unordered
        // latent-latent and observed-observed covariances
        let spec = parse_model(&ModelSource::new("a", cf.to_model_text())).unwrap();
        let n_obs = spec.catalog.observed.len();
        let n_lat = spec.catalog.latent.len();
        let m = n_obs + n_lat;
        let bound = m * (m - 1) + n_obs * (n_obs - 1) / 2 + n_lat * (n_lat - 1) / 2
            + n_lat * n_obs; // cross-loadings
        prop_assert!(enumerate_candidates(&spec).len() <= bound);
    }

    #[test]
    fn implied_sigma_symmetric_pd(cf in arb_riclpm()) {
        prop_assume!(cf.spectral_radius() < 0.95);
        let spec = parse_model(&ModelSource::new("a", cf.to_model_text())).unwrap();
        let ram = RamSystem::build(&spec).unwrap();
        let sig = ram.implied_sigma(&[]).unwrap();
        let p = sig.sigma.nrows();
        for i in 0..p {
            for j in 0..i {
                prop_assert!((sig.sigma[(i, j)] - sig.sigma[(j, i)]).abs() < 1e-12);
            }
        }
        prop_assert!(sig.is_pd);
    }
}
