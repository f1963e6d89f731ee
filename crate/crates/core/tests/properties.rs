mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use edvcm_core::gp::{build_covariance, cholesky_with_jitter, KernelSpec};
use edvcm_core::grid::{grid_index, inverse_grid_index, triangle_len};
use edvcm_core::likelihood::{conditional_log_likelihood, ParameterSet};
use edvcm_core::summaries::rate_ratio;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn grid_index_is_a_bijection(dmax in 1u32..40) {
        for k in 0..triangle_len(dmax) {
            let (d, t) = inverse_grid_index(k, dmax).unwrap();
            prop_assert!(t >= 1 && t <= d && d <= dmax);
            prop_assert_eq!(grid_index(d, t, dmax).unwrap(), k);
        }
        prop_assert!(inverse_grid_index(triangle_len(dmax), dmax).is_err());
    }

    #[test]
    fn kernel_factorizes(dmax in 1u32..16, ls in 0.05f64..50.0, lt in 0.05f64..50.0, s in 0.01f64..5.0) {
        let spec = KernelSpec::exposure(dmax, 1e-8);
        let m = build_covariance(s * s, ls, lt, &spec).unwrap();
        prop_assert!(m.is_symmetric());
        prop_assert!(cholesky_with_jitter(&m).is_ok());
    }

    #[test]
    fn likelihood_invariances(seed in 0u64..10_000, shift in -3.0f64..3.0, scale in 0.1f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ds = common::random_dataset(&mut rng, 3, 8, 2, 1, 2.0);
        let mut p = ParameterSet::for_dataset(&ds);
        p.zeta = vec![0.4, -0.7];
        for (i, v) in p.beta.values_mut().iter_mut().enumerate() {
            *v = 0.1 * i as f64 - 0.2;
        }
        let base = conditional_log_likelihood(&ds, &p).unwrap();

        // reversing unit and stratum order
        let mut rev = ds.clone();
        rev.strata.reverse();
        rev.strata.iter_mut().for_each(|s| s.units.reverse());
        let a = conditional_log_likelihood(&rev, &p).unwrap();
        prop_assert!((a - base).abs() < 1e-9 * base.abs().max(1.0));

        // a common covariate shift or person-time scale within a stratum cancels
        let mut moved = ds.clone();
        for s in moved.strata.iter_mut() {
            for u in s.units.iter_mut() {
                u.covariates[0] += shift;
                u.person_time *= scale;
            }
        }
        let b = conditional_log_likelihood(&moved, &p).unwrap();
        prop_assert!((b - base).abs() < 1e-9 * base.abs().max(1.0));
    }

    #[test]
    fn rate_ratio_interval_is_exp_of_coefficient_interval(xs in prop::collection::vec(-3.0f64..3.0, 100..300)) {
        let (rr, iv) = rate_ratio(&xs, 0.9).unwrap();
        prop_assert!(rr.iter().zip(&xs).all(|(r, x)| (r - x.exp()).abs() < 1e-12));
        let coef = edvcm_core::summaries::posterior_mean_ci(&xs, 0.9).unwrap();
        prop_assert!((iv.lower - coef.lower.exp()).abs() < 1e-12);
        prop_assert!((iv.upper - coef.upper.exp()).abs() < 1e-12);
        prop_assert!(iv.lower <= iv.upper);
    }
}
