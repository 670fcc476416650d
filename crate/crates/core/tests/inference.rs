use charfactor::inference::{
    bootstrap_critical_value, max_stat_critical, max_stat_test, run_tests, Dims, OutsideAlphaScores, VarianceEstimates,
};
use charfactor::simlab::{generate_panel, stream_rng, DgpConfig, StreamRole, XiDesign};
use charfactor::stats::chi2_isf;
use charfactor::{estimate, EstimationConfig, ThresholdRule};
use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};

fn null_design(n: usize, t: usize, seed: u64) -> DgpConfig {
    let mut cfg = DgpConfig::power(n, t, 0.0, seed).unwrap();
    cfg.gamma.row_mut(cfg.l - 1).fill(0.0);
    cfg.validated().unwrap()
}

fn est_config() -> EstimationConfig {
    EstimationConfig { k: Some(2), threshold: ThresholdRule::simulation(), ..EstimationConfig::default() }
}

#[test]
fn max_statistic_is_conservative_on_gaussian_noise() {
    let dims = Dims { n: 100, t: 50, l: 1, k: 1 };
    let ones = DMatrix::from_element(100, 50, 1.0);
    let mut rejections = 0;
    for rep in 0..1000 {
        let mut rng = stream_rng(4, rep, StreamRole::Noise);
        let v = DMatrix::from_fn(100, 50, |_, _| StandardNormal.sample(&mut rng));
        let r = max_stat_test("noise", &v, &ones, false, &[0.05], dims).unwrap();
        rejections += r.levels[0].reject as usize;
    }
    assert!(rejections <= 70, "{rejections} rejections in 1000");
}

#[test]
fn wald_statistic_of_a_zero_row_is_chi_square_like() {
    let cfg = null_design(100, 60, 21);
    let zero_row = cfg.l - 1;
    let mut w: Vec<f64> = (0..1000)
        .map(|rep| {
            let (panel, _) = generate_panel(&cfg, rep).unwrap();
            let est = estimate(&panel, &est_config()).unwrap();
            let var = VarianceEstimates::compute(&panel, &est).unwrap();
            run_tests(&panel, &est, &var, &[0.05]).unwrap().wald[zero_row].statistic
        })
        .collect();
    w.sort_by(f64::total_cmp);
    let q95 = w[949];
    assert!((chi2_isf(0.10, 2)..=chi2_isf(0.01, 2)).contains(&q95), "95th percentile {q95}");
}

#[test]
fn null_panels_rarely_reject() {
    let mut clean = 0;
    let seeds = 200;
    for seed in 0..seeds {
        let cfg = null_design(300, 60, 100 + seed);
        let zero_row = cfg.l - 1;
        let (panel, _) = generate_panel(&cfg, 0).unwrap();
        let est = estimate(&panel, &est_config()).unwrap();
        let var = VarianceEstimates::compute(&panel, &est).unwrap();
        let s = run_tests(&panel, &est, &var, &[0.05]).unwrap();
        let any = [&s.t_stat_1, &s.t_stat_2, &s.t_stat_o, &s.t_stat_i, &s.wald[zero_row]]
            .iter()
            .any(|r| r.rejects_at(0.05).unwrap());
        clean += !any as usize;
    }
    assert!(clean as f64 >= 0.9 * seeds as f64, "{clean} of {seeds} clean");
}

#[test]
fn planted_spikes_are_detected() {
    let (n, t) = (200, 40);
    let mut cfg = null_design(n, t, 9);
    cfg.xi = Some(XiDesign {
        active_periods: 4,
        spikes_per_period: 2,
        center: 10.0 / (n as f64).sqrt(),
        halfwidth: 0.0,
        last_period_active: true,
        balanced: false,
    });
    let cfg = cfg.validated().unwrap();
    for rep in 0..5 {
        let (panel, _) = generate_panel(&cfg, rep).unwrap();
        let est = estimate(&panel, &est_config()).unwrap();
        let var = VarianceEstimates::compute(&panel, &est).unwrap();
        let s = run_tests(&panel, &est, &var, &[0.01]).unwrap();
        assert!(s.t_stat_1.rejects_at(0.01).unwrap(), "rep {rep}: {}", s.t_stat_1.statistic);
    }
}

#[test]
fn large_panel_cell_count_gives_the_expected_critical_value() {
    let m = 240 * (973 - 37);
    assert!((max_stat_critical(0.05, m) - 5.18).abs() < 0.01);
}

#[test]
fn bootstrap_is_no_more_conservative_than_the_union_bound() {
    let panels = 40;
    let mut below = 0;
    for rep in 0..panels {
        let cfg = null_design(60, 30, 5);
        let (panel, _) = generate_panel(&cfg, rep).unwrap();
        let est = estimate(&panel, &est_config()).unwrap();
        let var = VarianceEstimates::compute(&panel, &est).unwrap();
        let scores = OutsideAlphaScores {
            bases: &est.bases,
            residuals: &est.residuals,
            support: &est.outside.support,
            v_outside: &var.v_outside,
        };
        let boot = bootstrap_critical_value(&scores, 0.05, 300, rep).unwrap();
        below += (boot <= max_stat_critical(0.05, panel.n() * panel.t())) as usize;
    }
    assert!(below as f64 >= 0.95 * panels as f64, "{below} of {panels}");
}

#[test]
fn standardized_outside_alpha_has_unit_spread() {
    let cfg = DgpConfig::calibrated(100, 60, 5, 2, 31).unwrap();
    let z: Vec<f64> = (0..1000)
        .map(|rep| {
            let (panel, truth) = generate_panel(&cfg, rep).unwrap();
            let est = estimate(&panel, &est_config()).unwrap();
            let var = VarianceEstimates::compute(&panel, &est).unwrap();
            let (i, t) = (0, panel.t() - 1);
            (est.outside.alpha_outside[(i, t)] - truth.alpha_outside[(i, t)]) / var.v_outside[(i, t)].sqrt()
        })
        .collect();
    let mean = z.iter().sum::<f64>() / z.len() as f64;
    let sd = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (z.len() - 1) as f64).sqrt();
    assert!((0.9..=1.1).contains(&sd), "sd {sd}");
}
