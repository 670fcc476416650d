use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use anyhow::{Context, Result};
use charfactor::factor::{default_k_max, select_rank_from_singular_values, transform_returns};
use charfactor::inference::{
    bootstrap_critical_values, fdr_confidence_bands, max_stat_critical, run_tests, DeltaScores, Dims,
    OutsideAlphaScores, TestSuite,
};
use charfactor::panel::{load_panel, rank_normalize, write_matrices_long};
use charfactor::pipeline::{restore, StoredFit};
use charfactor::simlab::{run_coverage_study, run_power_study, DgpConfig, PowerSettings, TrackedCells};
use charfactor::{estimate, Estimation, Panel, VarianceEstimates};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::config::{RhoPreset, RunConfig, StudyPreset};

pub enum Outcome {
    Done,
    StudyFailed,
}

#[derive(Serialize, Deserialize)]
struct FitReport {
    dims: Dims,
    characteristic_names: Vec<String>,
    singular_values: Vec<f64>,
    r_squared: f64,
    plain: charfactor::factor::ModelFitSummary,
    debiased: charfactor::factor::ModelFitSummary,
    stored: StoredFit,
}

#[derive(Serialize)]
struct BootstrapReport {
    draws: usize,
    seed: u64,
    levels: Vec<f64>,
    t_stat_1: Vec<f64>,
    t_stat_o: Vec<f64>,
}

#[derive(Serialize)]
struct TestsFile<'a> {
    dims: Dims,
    /// Cells in the max tests, `T(N−L)`.
    m: usize,
    levels: &'a [f64],
    tests: &'a TestSuite,
    bootstrap: Option<BootstrapReport>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn load(cfg: &RunConfig) -> Result<Panel> {
    let path = cfg.input.as_deref().context("no input panel: pass --input or set `input` in the config")?;
    let panel = load_panel(path, &cfg.schema).with_context(|| format!("loading {}", path.display()))?;
    let panel = if cfg.rank_normalize { rank_normalize(&panel, cfg.tie_rule)? } else { panel };
    eprintln!("panel: N={} T={} L={}", panel.n(), panel.t(), panel.l());
    Ok(panel)
}

fn prepare_out(cfg: &RunConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    Ok(&cfg.out)
}

fn dims(panel: &Panel, est: &Estimation) -> Dims {
    Dims { n: panel.n(), t: panel.t(), l: panel.l(), k: est.k() }
}

pub fn fit(cfg: &RunConfig) -> Result<Outcome> {
    let panel = load(cfg)?;
    let est = estimate(&panel, &cfg.estimation(RhoPreset::Empirical)?)?;
    let out = prepare_out(cfg)?;
    write_fit(out, &panel, &est)?;
    let support: usize = est.outside.support.iter().map(Vec::len).sum();
    eprintln!("fit: K={} R2={:.4} outside-alpha cells={support}", est.k(), est.r_squared);
    Ok(Outcome::Done)
}

fn write_fit(out: &Path, panel: &Panel, est: &Estimation) -> Result<()> {
    let report = FitReport {
        dims: dims(panel, est),
        characteristic_names: panel.characteristic_names().to_vec(),
        singular_values: est.singular_values.clone(),
        r_squared: est.r_squared,
        plain: est.plain.summary(),
        debiased: est.debiased.summary(),
        stored: est.stored(),
    };
    write_json(&out.join("model_fit.json"), &report)?;
    write_json(&out.join("outside_fit.json"), &est.outside.summary(panel.period_labels()))?;
    let labels = (panel.asset_ids(), panel.period_labels());
    for (file, name, m) in [
        ("alphas_inside.csv", "alpha_inside", &est.debiased.alpha_inside),
        ("alphas_outside.csv", "alpha_outside", &est.outside.alpha_outside),
    ] {
        write_matrices_long(create(&out.join(file))?, "asset_id", labels.0, "period", labels.1, &[(name, m)])?;
    }
    fs::write(out.join("r2.txt"), format!("{}\n", est.r_squared))?;
    Ok(())
}

fn read_fit(dir: &Path, panel: &Panel) -> Result<Estimation> {
    let path = dir.join("model_fit.json");
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let report: FitReport = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(restore(panel, &report.stored)?)
}

fn write_bands(path: &Path, panel: &Panel, est: &DMatrix<f64>, var: &DMatrix<f64>, level: f64) -> Result<()> {
    let cells = fdr_confidence_bands(est, var, level)?;
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["asset_id", "period", "estimate", "lo", "hi", "selected"])?;
    for c in cells {
        w.write_record([
            panel.asset_ids()[c.row].clone(),
            panel.period_labels()[c.col].clone(),
            format!("{:e}", c.estimate),
            format!("{:e}", c.lo),
            format!("{:e}", c.hi),
            c.selected.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_wald(path: &Path, panel: &Panel, suite: &TestSuite, levels: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header = vec!["characteristic".to_string(), "statistic".to_string(), "p_value_bound".to_string()];
    for level in levels {
        header.push(format!("critical_{level}"));
        header.push(format!("reject_{level}"));
    }
    w.write_record(&header)?;
    for (name, report) in panel.characteristic_names().iter().zip(&suite.wald) {
        let mut rec = vec![name.clone(), format!("{:e}", report.statistic), format!("{:e}", report.p_value_bound)];
        for d in &report.levels {
            rec.push(format!("{:e}", d.critical_value));
            rec.push(d.reject.to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn test(cfg: &RunConfig, fit_dir: Option<&Path>) -> Result<Outcome> {
    let panel = load(cfg)?;
    let est = match fit_dir {
        Some(dir) => read_fit(dir, &panel)?,
        None => estimate(&panel, &cfg.estimation(RhoPreset::Empirical)?)?,
    };
    let var = VarianceEstimates::compute(&panel, &est)?;
    let suite = run_tests(&panel, &est, &var, &cfg.levels)?;
    let bootstrap = if cfg.bootstrap_draws > 0 {
        let delta = DeltaScores { bases: &est.bases, residuals: &est.residuals, sigma2: est.sigma2() };
        let outside = OutsideAlphaScores {
            bases: &est.bases,
            residuals: &est.residuals,
            support: &est.outside.support,
            v_outside: &var.v_outside,
        };
        Some(BootstrapReport {
            draws: cfg.bootstrap_draws,
            seed: cfg.seed,
            levels: cfg.levels.clone(),
            t_stat_1: bootstrap_critical_values(&delta, &cfg.levels, cfg.bootstrap_draws, cfg.seed)?,
            t_stat_o: bootstrap_critical_values(&outside, &cfg.levels, cfg.bootstrap_draws, cfg.seed)?,
        })
    } else {
        None
    };
    let out = prepare_out(cfg)?;
    let m = panel.t() * (panel.n() - panel.l());
    let file = TestsFile { dims: dims(&panel, &est), m, levels: &cfg.levels, tests: &suite, bootstrap };
    write_json(&out.join("tests.json"), &file)?;
    write_wald(&out.join("gamma_wald.csv"), &panel, &suite, &cfg.levels)?;
    write_bands(&out.join("bands_alpha_outside.csv"), &panel, &est.outside.alpha_outside, &var.v_outside, cfg.fdr_level)?;
    write_bands(&out.join("bands_alpha_inside.csv"), &panel, &est.debiased.alpha_inside, &var.v_inside, cfg.fdr_level)?;

    for r in [&suite.t_stat_1, &suite.t_stat_2, &suite.t_stat_o, &suite.t_stat_i] {
        let decisions: Vec<String> = r.levels.iter().map(|d| format!("{}:{}", d.level, d.reject)).collect();
        eprintln!("{:<9} {:>9.3}  reject {}", r.name, r.statistic, decisions.join(" "));
    }
    eprintln!("m={m}; 5% critical value {:.3}", max_stat_critical(0.05, m));
    Ok(Outcome::Done)
}

pub fn select_rank(cfg: &RunConfig) -> Result<Outcome> {
    let panel = load(cfg)?;
    let tr = transform_returns(&panel)?;
    let k_max = cfg.k_max.unwrap_or_else(|| default_k_max(tr.l(), tr.t()));
    if k_max < 1 || k_max >= tr.l().min(tr.t()) {
        return Err(charfactor::Error::InvalidRank { k: k_max, l: tr.l(), t: tr.t() }.into());
    }
    let psi = charfactor::linalg::left_singular_sorted(&tr.rddot_demeaned).1;
    let k = select_rank_from_singular_values(&psi, k_max);
    println!("{k}");
    eprintln!("selected K={k} (k_max={k_max})");
    Ok(Outcome::Done)
}

fn coverage_design(cfg: &RunConfig) -> Result<(DgpConfig, usize)> {
    let s = &cfg.study;
    let (n, t, l, k, reps) = match s.preset {
        StudyPreset::Smoke => (60, 24, 4, 1, 10),
        _ => (300, 120, 10, 2, 500),
    };
    let dgp = DgpConfig::calibrated(s.n.unwrap_or(n), s.t.unwrap_or(t), s.l.unwrap_or(l), s.k.unwrap_or(k), cfg.seed)?;
    Ok((dgp, s.reps.unwrap_or(reps)))
}

fn power_design(cfg: &RunConfig) -> Result<(Vec<DgpConfig>, usize)> {
    let s = &cfg.study;
    let (n, t, reps) = match s.preset {
        StudyPreset::Smoke => (60, 20, 10),
        _ => (500, 200, 100),
    };
    let (n, t) = (s.n.unwrap_or(n), s.t.unwrap_or(t));
    let deltas = s.delta_grid.clone().unwrap_or_else(|| vec![0.0, 0.02, 0.05]);
    let grid = deltas.iter().map(|&d| DgpConfig::power(n, t, d, cfg.seed)).collect::<charfactor::Result<Vec<_>>>()?;
    Ok((grid, s.reps.unwrap_or(reps)))
}

#[derive(Serialize)]
struct StudySummary {
    preset: StudyPreset,
    seed: u64,
    replications: usize,
    failures: usize,
    failure_rate: f64,
    coverage: Option<CoverageSummary>,
    power: Option<PowerSummary>,
}

#[derive(Serialize)]
struct CoverageSummary {
    n: usize,
    t: usize,
    l: usize,
    k: usize,
    reps: usize,
    failures: usize,
    support_recovery_rate: f64,
}

#[derive(Serialize)]
struct PowerSummary {
    n: usize,
    t: usize,
    reps: usize,
    level: f64,
    delta_grid: Vec<f64>,
    failures: usize,
}

fn write_csv_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct HistogramRow<'a> {
    parameter: &'a str,
    bin_lo: f64,
    bin_hi: f64,
    count: usize,
    normal_density: f64,
}

pub fn simulate(cfg: &RunConfig) -> Result<Outcome> {
    let out = prepare_out(cfg)?;
    let preset = cfg.study.preset;
    let mut replications = 0;
    let mut failures = 0;
    let mut coverage = None;
    let mut power = None;

    if matches!(preset, StudyPreset::Smoke | StudyPreset::Coverage) {
        let (dgp, reps) = coverage_design(cfg)?;
        let mut est_cfg = cfg.estimation(RhoPreset::Simulation)?;
        est_cfg.k = est_cfg.k.or(Some(dgp.k));
        let study = run_coverage_study(&dgp, &est_cfg, &TrackedCells::default_for(dgp.t), reps, &cfg.study.coverage_levels);
        write_csv_rows(&out.join("coverage.csv"), &study.table)?;
        write_csv_rows(
            &out.join("histograms.csv"),
            study.histograms.iter().flat_map(|(p, bins)| {
                bins.iter().map(|b| HistogramRow {
                    parameter: p.name(),
                    bin_lo: b.bin_lo,
                    bin_hi: b.bin_hi,
                    count: b.count,
                    normal_density: b.normal_density,
                })
            }),
        )?;
        for row in &study.table {
            eprintln!("{:<20} {:.2} coverage {:.3} (se {:.3})", row.parameter, row.level, row.coverage, row.se);
        }
        replications += reps;
        failures += study.failures;
        coverage = Some(CoverageSummary {
            n: dgp.n,
            t: dgp.t,
            l: dgp.l,
            k: dgp.k,
            reps,
            failures: study.failures,
            support_recovery_rate: study.support_recovery_rate,
        });
    }

    if matches!(preset, StudyPreset::Smoke | StudyPreset::Power) {
        let (grid, reps) = power_design(cfg)?;
        let settings = PowerSettings {
            reps,
            level: cfg.study.power_level,
            threshold: cfg.rho.rule(RhoPreset::Simulation)?,
            bootstrap_draws: cfg.bootstrap_draws.max(200),
        };
        let rows = run_power_study(&grid, &settings, &cfg.study.power_methods);
        write_csv_rows(&out.join("power.csv"), &rows)?;
        for row in &rows {
            eprintln!("delta_1={:<6} {:?} rejection {:.3}", row.delta_1, row.method, row.rejection_rate);
        }
        let grid_failures: usize = rows.iter().step_by(cfg.study.power_methods.len().max(1)).map(|r| r.failures).sum();
        replications += reps * grid.len();
        failures += grid_failures;
        power = Some(PowerSummary {
            n: grid[0].n,
            t: grid[0].t,
            reps,
            level: settings.level,
            delta_grid: grid.iter().map(|g| g.zeta.get(0).copied().unwrap_or(0.0)).collect(),
            failures: grid_failures,
        });
    }

    let failure_rate = failures as f64 / replications.max(1) as f64;
    let summary = StudySummary { preset, seed: cfg.seed, replications, failures, failure_rate, coverage, power };
    write_json(&out.join("summary.json"), &summary)?;
    eprintln!("{replications} replications, {failures} failed");
    if failure_rate > 0.01 {
        eprintln!("study failed: failure rate {failure_rate:.3} exceeds 1%");
        Ok(Outcome::StudyFailed)
    } else {
        Ok(Outcome::Done)
    }
}
