use charfactor::simlab::{
    generate_panel, run_coverage_study, run_power_study, DgpConfig, PowerMethod, PowerSettings, Tracked, TrackedCells,
};
use charfactor::{estimate, EstimationConfig, ThresholdRule};

fn est_config(k: usize) -> EstimationConfig {
    EstimationConfig { k: Some(k), threshold: ThresholdRule::simulation(), ..EstimationConfig::default() }
}

#[test]
fn calibrated_design_never_misses_a_true_shock() {
    let cfg = DgpConfig::calibrated(300, 120, 10, 2, 2024).unwrap();
    let mut extra = 0;
    for rep in 0..20 {
        let (panel, truth) = generate_panel(&cfg, rep).unwrap();
        let est = estimate(&panel, &est_config(2)).unwrap();
        for (found, truth) in est.outside.support.iter().zip(&truth.support) {
            assert!(truth.iter().all(|q| found.contains(q)), "rep {rep}: missed a shock");
            extra += found.len() - truth.len();
        }
    }
    assert!(extra < 20 * 3, "{extra} spurious cells in 20 replications");
}

#[test]
fn coverage_study_is_reproducible_and_tabulated() {
    let cfg = DgpConfig::calibrated(60, 24, 4, 1, 5).unwrap();
    let cells = TrackedCells::default_for(24);
    let a = run_coverage_study(&cfg, &est_config(1), &cells, 12, &[0.9, 0.95]);
    let b = run_coverage_study(&cfg, &est_config(1), &cells, 12, &[0.9, 0.95]);
    assert_eq!(a.table, b.table);
    assert_eq!(a.table.len(), Tracked::ALL.len() * 2);
    assert_eq!(a.failures, 0);
    assert!(a.table.iter().all(|r| r.reps == 12 && (0.0..=1.0).contains(&r.coverage)));
    for (_, bins) in &a.histograms {
        assert_eq!(bins.len(), 32);
    }
}

#[test]
fn failed_replications_are_counted_and_fail_the_study() {
    let cfg = DgpConfig::calibrated(40, 12, 4, 1, 5).unwrap();
    let study = run_coverage_study(&cfg, &est_config(4), &TrackedCells::default_for(12), 5, &[0.95]);
    assert_eq!(study.failures, 5);
    assert!(study.failed());
    assert!(study.records.iter().all(|r| r.error.as_deref().unwrap().contains("K must be")));
}

#[test]
fn power_grid_gives_one_row_per_point_and_method() {
    let grid: Vec<DgpConfig> = [0.0, 0.02, 0.05].iter().map(|&d| DgpConfig::power(60, 20, d, 1).unwrap()).collect();
    let settings = PowerSettings { reps: 4, level: 0.01, threshold: ThresholdRule::simulation(), bootstrap_draws: 200 };
    let rows = run_power_study(&grid, &settings, &[PowerMethod::Formula, PowerMethod::Bootstrap]);
    assert_eq!(rows.len(), 6);
    assert_eq!(rows[0].delta_1, 0.0);
    assert_eq!(rows[5].delta_1, 0.05);
    assert!(rows.iter().all(|r| r.reps == 4 && r.failures == 0));
}

#[test]
fn large_outside_alpha_is_always_detected() {
    let grid = vec![DgpConfig::power(200, 60, 1.0, 3).unwrap()];
    let settings = PowerSettings { reps: 10, level: 0.01, threshold: ThresholdRule::simulation(), bootstrap_draws: 200 };
    let rows = run_power_study(&grid, &settings, &[PowerMethod::Formula, PowerMethod::Bootstrap]);
    assert!(rows.iter().all(|r| r.rejection_rate == 1.0), "{rows:?}");
}

#[test]
fn results_do_not_depend_on_the_thread_count() {
    use charfactor::parallel::with_threads;
    let cfg = DgpConfig::calibrated(60, 24, 4, 1, 8).unwrap();
    let cells = TrackedCells::default_for(24);
    let run = |threads| with_threads(Some(threads), || run_coverage_study(&cfg, &est_config(1), &cells, 8, &[0.95]).table);
    assert_eq!(run(1), run(4));
}
