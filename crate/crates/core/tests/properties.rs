mod common;

use charfactor::inference::VarianceEstimates;
use charfactor::outside::threshold_and_refine;
use charfactor::{estimate, EstimationConfig, Panel, ThresholdRule};
use common::*;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn config(k: usize) -> EstimationConfig {
    EstimationConfig { k: Some(k), threshold: ThresholdRule::simulation(), ..EstimationConfig::default() }
}

fn random_orthogonal(l: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(l, l, |_, _| gauss(&mut rng)).qr().q()
}

fn transformed(panel: &Panel, w: &DMatrix<f64>) -> Panel {
    let xs = panel.characteristics().iter().map(|x| x * w).collect();
    Panel::new(panel.returns().clone(), xs, panel.asset_ids().to_vec(), panel.period_labels().to_vec(), false).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fits_are_invariant_to_rotating_characteristics(seed in 0u64..10_000, rot in 0u64..10_000) {
        let (panel, _, cfg) = small_instance(seed);
        let o = random_orthogonal(panel.l(), rot);
        let rotated = transformed(&panel, &o);
        let a = estimate(&panel, &config(cfg.k)).unwrap();
        let b = estimate(&rotated, &config(cfg.k)).unwrap();
        prop_assert!(rel_err(&b.debiased.alpha_inside, &a.debiased.alpha_inside) < 1e-8);
        prop_assert!(rel_err(&b.outside.alpha_outside, &a.outside.alpha_outside) < 1e-8);
        prop_assert!(rel_err(&b.debiased.systematic(&rotated), &a.debiased.systematic(&panel)) < 1e-8);
        prop_assert!(rel_err(&b.residuals, &a.residuals) < 1e-8);
        prop_assert_eq!(&b.outside.support, &a.outside.support);
        let va = VarianceEstimates::compute(&panel, &a).unwrap();
        let vb = VarianceEstimates::compute(&rotated, &b).unwrap();
        prop_assert!(rel_err(&vb.v_inside, &va.v_inside) < 1e-8);
        prop_assert!(rel_err(&vb.v_outside, &va.v_outside) < 1e-8);
    }

    #[test]
    fn scaling_returns_scales_alphas_and_their_variances(seed in 0u64..10_000, c in 0.05f64..20.0) {
        let (panel, _, cfg) = small_instance(seed);
        let scaled = panel.with_returns(panel.returns() * c).unwrap();
        let a = estimate(&panel, &config(cfg.k)).unwrap();
        let b = estimate(&scaled, &config(cfg.k)).unwrap();
        prop_assert!(rel_err(&b.debiased.gamma, &a.debiased.gamma) < 1e-8);
        prop_assert!(rel_err(&b.debiased.alpha_inside, &(&a.debiased.alpha_inside * c)) < 1e-8);
        prop_assert!(rel_err(&b.outside.alpha_outside, &(&a.outside.alpha_outside * c)) < 1e-8);
        prop_assert_eq!(&b.outside.support, &a.outside.support);
        let va = VarianceEstimates::compute(&panel, &a).unwrap();
        let vb = VarianceEstimates::compute(&scaled, &b).unwrap();
        prop_assert!(rel_err(&vb.v_inside, &(&va.v_inside * (c * c))) < 1e-8);
        prop_assert!(rel_err(&vb.v_outside, &(&va.v_outside * (c * c))) < 1e-8);
        for l in 0..panel.l() {
            prop_assert!(rel_err(&vb.gamma_row_cov[l], &va.gamma_row_cov[l]) < 1e-8);
        }
    }

    #[test]
    fn larger_thresholds_select_nested_supports(seed in 0u64..10_000, lo in 0.0f64..0.5, extra in 0.0f64..0.5) {
        let (panel, _, cfg) = small_instance(seed);
        let est = estimate(&panel, &config(cfg.k)).unwrap();
        let sigma = vec![1.0; panel.t()];
        let small = threshold_and_refine(&est.outside.delta_raw, &sigma, ThresholdRule::Fixed(lo), &est.bases);
        let large = threshold_and_refine(&est.outside.delta_raw, &sigma, ThresholdRule::Fixed(lo + extra), &est.bases);
        for (s, l) in small.support.iter().zip(&large.support) {
            prop_assert!(l.iter().all(|q| s.contains(q)));
        }
    }

    #[test]
    fn larger_scaled_constant_selects_nested_supports(seed in 0u64..10_000, c in 0.2f64..3.0, factor in 1.0f64..3.0) {
        let (panel, _, cfg) = small_instance(seed);
        let est = estimate(&panel, &config(cfg.k)).unwrap();
        let sigma = est.outside.sigma.clone();
        let rule = |c| ThresholdRule::Scaled { c, kappa: 0.5 };
        let small = threshold_and_refine(&est.outside.delta_raw, &sigma, rule(c), &est.bases);
        let large = threshold_and_refine(&est.outside.delta_raw, &sigma, rule(c * factor), &est.bases);
        let count = |s: &Vec<Vec<usize>>| s.iter().map(Vec::len).sum::<usize>();
        prop_assert!(count(&large.support) <= count(&small.support));
        for (s, l) in small.support.iter().zip(&large.support) {
            prop_assert!(l.iter().all(|q| s.contains(q)));
        }
    }
}
