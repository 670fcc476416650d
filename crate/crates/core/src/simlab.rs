//! Monte Carlo lab: data-generating processes, coverage studies and
//! size/power studies.
//!
//! All randomness comes from ChaCha streams keyed by
//! `(seed, replication, role)`, so any replication can be regenerated in
//! isolation and results do not depend on scheduling.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factor::demean_rows;
use crate::inference::{
    bootstrap_critical_value, estimate_outside_variance, max_stat_test, Dims, OutsideAlphaScores, VarianceEstimates,
};
use crate::linalg::{spd_inverse, SPD_REL_TOL};
use crate::outside::{build_bases, OmegaSpec, ThresholdRule};
use crate::panel::Panel;
use crate::parallel::map_indexed;
use crate::pipeline::{estimate, EstimationConfig};
use crate::stats::{binomial_se, histogram, normal_isf, HistogramBin};

/// Purpose of a random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum StreamRole {
    Loadings = 0,
    Characteristics = 1,
    Factors = 2,
    Noise = 3,
    Shocks = 4,
    Bootstrap = 5,
}

pub fn stream_rng(seed: u64, rep: u64, role: StreamRole) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep.wrapping_mul(8).wrapping_add(role as u64));
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Sparse transitory shocks `ξ_t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct XiDesign {
    pub active_periods: usize,
    pub spikes_per_period: usize,
    pub center: f64,
    pub halfwidth: f64,
    /// Force the last period to be active.
    #[serde(default)]
    pub last_period_active: bool,
    /// Pair active periods and give each pair the same cells with opposite
    /// signs, so every cell's shocks average to zero over time.
    #[serde(default)]
    pub balanced: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DgpConfig {
    pub n: usize,
    pub t: usize,
    /// Characteristics including the constant.
    pub l: usize,
    pub k: usize,
    pub gamma: DMatrix<f64>,
    pub eta: DVector<f64>,
    /// Covariance of the non-constant characteristics.
    pub char_cov: DMatrix<f64>,
    pub factor_mean: DVector<f64>,
    pub factor_cov: DMatrix<f64>,
    pub zeta: DVector<f64>,
    pub xi: Option<XiDesign>,
    /// One value, or one per period.
    pub noise_sigma: Vec<f64>,
    pub omega: OmegaSpec,
    pub seed: u64,
}

/// Ground truth behind a generated panel.
#[derive(Debug, Clone)]
pub struct Truth {
    pub gamma: DMatrix<f64>,
    pub eta: DVector<f64>,
    pub zeta: DVector<f64>,
    /// (N−L)×T.
    pub xi: DMatrix<f64>,
    pub support: Vec<Vec<usize>>,
    /// K×T factors `f̆`.
    pub factors: DMatrix<f64>,
    pub alpha_inside: DMatrix<f64>,
    pub alpha_outside: DMatrix<f64>,
    pub noise_sigma: Vec<f64>,
}

fn project_out(eta: &DVector<f64>, gamma: &DMatrix<f64>) -> Result<DVector<f64>> {
    let inv = spd_inverse(&gamma.tr_mul(gamma), SPD_REL_TOL).ok_or(Error::SingularFactorGram)?;
    Ok(eta - gamma * (inv * gamma.tr_mul(eta)))
}

fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    m.clone()
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::InvalidConfig(format!("{what} covariance is not positive definite")))
}

impl DgpConfig {
    /// Check shapes and enforce `ηᵀΓ = 0`.
    pub fn validated(mut self) -> Result<Self> {
        let (n, t, l, k) = (self.n, self.t, self.l, self.k);
        let bad = |m: String| Err(Error::IncompatibleDimensions(m));
        if !(k >= 1 && k < l && l < n && t >= 2) {
            return bad(format!("need 1 ≤ K < L < N and T ≥ 2 (N={n}, T={t}, L={l}, K={k})"));
        }
        if self.gamma.shape() != (l, k) || self.eta.len() != l {
            return bad("gamma must be L×K and eta length L".into());
        }
        if self.char_cov.shape() != (l - 1, l - 1) {
            return bad("characteristic covariance must be (L−1)×(L−1)".into());
        }
        if self.factor_mean.len() != k || self.factor_cov.shape() != (k, k) {
            return bad("factor mean/covariance must have dimension K".into());
        }
        if self.zeta.len() != n - l {
            return bad("zeta must have length N−L".into());
        }
        if !(self.noise_sigma.len() == 1 || self.noise_sigma.len() == t) {
            return bad("noise_sigma must have length 1 or T".into());
        }
        if let Some(xi) = &self.xi {
            if xi.active_periods > t || xi.spikes_per_period > n - l || (xi.balanced && xi.active_periods % 2 == 1) {
                return bad(format!("invalid shock design {xi:?}"));
            }
        }
        self.eta = project_out(&self.eta, &self.gamma)?;
        Ok(self)
    }

    pub fn sigma_at(&self, t: usize) -> f64 {
        if self.noise_sigma.len() == 1 {
            self.noise_sigma[0]
        } else {
            self.noise_sigma[t]
        }
    }

    /// Desk-scale calibrated design with documented stand-in constants:
    /// `Σ_x` with `0.3^{|j−k|}` decay, shocks centred at 1.0 with half-width
    /// 0.5 in 71/240 of the periods (three cells each), noise σ = 0.15,
    /// weak factors (standard deviations 0.012 and 0.0096, Sharpe ratio
    /// 0.15) and `Γ ~ N(0,1)` with the constant's row tripled.
    pub fn calibrated(n: usize, t: usize, l: usize, k: usize, seed: u64) -> Result<Self> {
        let mut rng = stream_rng(seed, u64::MAX, StreamRole::Loadings);
        let gamma = DMatrix::from_fn(l, k, |i, _| if i == 0 { 3.0 } else { 1.0 } * normal(&mut rng));
        let eta = DVector::from_fn(l, |_, _| 0.02 * normal(&mut rng));
        let char_cov = DMatrix::from_fn(l - 1, l - 1, |i, j| 0.3_f64.powi((i as i32 - j as i32).abs()));
        let sd = DVector::from_fn(k, |i, _| CALIBRATED_FACTOR_SD * 0.8_f64.powi(i as i32));
        let factor_mean = &sd * 0.15;
        let factor_cov = DMatrix::from_diagonal(&sd.component_mul(&sd));
        let p = n.saturating_sub(l);
        let zeta = DVector::from_fn(p, |q, _| if q < p / 10 { 0.02 } else { 0.0 });
        let active = ((71.0 * t as f64 / 240.0).round() as usize).clamp(1, t);
        Self {
            n,
            t,
            l,
            k,
            gamma,
            eta,
            char_cov,
            factor_mean,
            factor_cov,
            zeta,
            xi: Some(XiDesign {
                active_periods: active,
                spikes_per_period: 3,
                center: 1.0,
                halfwidth: 0.5,
                last_period_active: true,
                balanced: false,
            }),
            noise_sigma: vec![0.15],
            omega: OmegaSpec::Simple,
            seed,
        }
        .validated()
    }

    /// Power design: ten standard-normal characteristics plus a constant,
    /// two factors with standard deviations (2, 1), `Γ ~ N(0, 1/L)` held
    /// fixed, unit noise, no inside alpha, and `δ_o = δ₁ e₁` constant in time.
    pub fn power(n: usize, t: usize, delta_1: f64, seed: u64) -> Result<Self> {
        let (l, k) = (11, 2);
        let mut rng = stream_rng(seed, u64::MAX, StreamRole::Loadings);
        let sd = (1.0 / l as f64).sqrt();
        let gamma = DMatrix::from_fn(l, k, |_, _| sd * normal(&mut rng));
        let mut zeta = DVector::zeros(n.saturating_sub(l));
        if !zeta.is_empty() {
            zeta[0] = delta_1;
        }
        Self {
            n,
            t,
            l,
            k,
            gamma,
            eta: DVector::zeros(l),
            char_cov: DMatrix::identity(l - 1, l - 1),
            factor_mean: DVector::zeros(k),
            factor_cov: DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0])),
            zeta,
            xi: None,
            noise_sigma: vec![1.0],
            omega: OmegaSpec::Simple,
            seed,
        }
        .validated()
    }
}

/// Factor scale of the calibrated design.
pub const CALIBRATED_FACTOR_SD: f64 = 0.012;

fn draw_shocks(design: &XiDesign, p: usize, t: usize, rng: &mut ChaCha8Rng) -> (DMatrix<f64>, Vec<Vec<usize>>) {
    let mut xi = DMatrix::zeros(p, t);
    let mut support = vec![Vec::new(); t];
    let mut periods: Vec<usize> = if design.last_period_active && design.active_periods > 0 {
        let mut rest: Vec<usize> = sample(rng, t - 1, design.active_periods - 1).into_vec();
        rest.push(t - 1);
        rest
    } else {
        sample(rng, t, design.active_periods).into_vec()
    };
    periods.sort_unstable();
    let magnitude = |rng: &mut ChaCha8Rng| design.center - design.halfwidth + 2.0 * design.halfwidth * rng.random::<f64>();
    let sign = |rng: &mut ChaCha8Rng| if rng.random::<bool>() { 1.0 } else { -1.0 };
    if design.balanced {
        for pair in periods.chunks(2) {
            let cells = sample(rng, p, design.spikes_per_period).into_vec();
            for &q in &cells {
                let v = sign(rng) * magnitude(rng);
                xi[(q, pair[0])] = v;
                xi[(q, pair[1])] = -v;
            }
            for &s in pair {
                support[s] = cells.clone();
            }
        }
    } else {
        for &s in &periods {
            let cells = sample(rng, p, design.spikes_per_period).into_vec();
            for &q in &cells {
                xi[(q, s)] = sign(rng) * magnitude(rng);
            }
            support[s] = cells;
        }
    }
    for s in &mut support {
        s.sort_unstable();
    }
    (xi, support)
}

/// Draw one replication of the forward model
/// `R_{t+1} = Bᵒ_t(ζ + ξ_t) + X_tη + X_tΓf̆_{t+1} + E_{t+1}`.
pub fn generate_panel(cfg: &DgpConfig, rep: u64) -> Result<(Panel, Truth)> {
    let (n, t_len, l, k) = (cfg.n, cfg.t, cfg.l, cfg.k);
    let p = n - l;
    let chol_x = cholesky(&cfg.char_cov, "characteristic")?;
    let chol_f = cholesky(&cfg.factor_cov, "factor")?;

    let mut rng = stream_rng(cfg.seed, rep, StreamRole::Characteristics);
    let xs: Vec<DMatrix<f64>> = (0..t_len)
        .map(|_| {
            let z = DMatrix::from_fn(n, l - 1, |_, _| normal(&mut rng));
            let mut x = DMatrix::from_element(n, l, 1.0);
            x.columns_mut(1, l - 1).copy_from(&(z * chol_x.transpose()));
            x
        })
        .collect();
    let mut rng = stream_rng(cfg.seed, rep, StreamRole::Factors);
    let factors = DMatrix::from_columns(
        &(0..t_len)
            .map(|_| &cfg.factor_mean + &chol_f * DVector::from_fn(k, |_, _| normal(&mut rng)))
            .collect::<Vec<_>>(),
    );
    let (xi, support) = match &cfg.xi {
        Some(d) => draw_shocks(d, p, t_len, &mut stream_rng(cfg.seed, rep, StreamRole::Shocks)),
        None => (DMatrix::zeros(p, t_len), vec![Vec::new(); t_len]),
    };
    let mut rng = stream_rng(cfg.seed, rep, StreamRole::Noise);
    let noise = DMatrix::from_fn(n, t_len, |_, s| cfg.sigma_at(s) * normal(&mut rng));

    let assets: Vec<String> = (0..n).map(|i| format!("a{i:05}")).collect();
    let periods: Vec<String> = (0..t_len).map(|s| format!("{:05}", s + 1)).collect();
    let skeleton = Panel::new(DMatrix::zeros(n, t_len), xs, assets, periods, true)?;
    let bases = build_bases(&skeleton, cfg.omega)?;

    let mut returns = DMatrix::zeros(n, t_len);
    let mut alpha_inside = DMatrix::zeros(n, t_len);
    let mut alpha_outside = DMatrix::zeros(n, t_len);
    for s in 0..t_len {
        let x = skeleton.x(s);
        let b = x * &cfg.gamma;
        let xe = x * &cfg.eta;
        let inv = spd_inverse(&b.tr_mul(&b), SPD_REL_TOL).ok_or(Error::RankDeficientLoadings { period: s })?;
        let ai = &xe - &b * (inv * b.tr_mul(&xe));
        let delta = &cfg.zeta + xi.column(s);
        let ao = bases[s].apply(&delta);
        let r = &ao + &xe + &b * factors.column(s) + noise.column(s);
        returns.set_column(s, &r);
        alpha_inside.set_column(s, &ai);
        alpha_outside.set_column(s, &ao);
    }
    let panel = skeleton.with_returns(returns)?;
    let noise_sigma = (0..t_len).map(|s| cfg.sigma_at(s)).collect();
    Ok((
        panel,
        Truth {
            gamma: cfg.gamma.clone(),
            eta: cfg.eta.clone(),
            zeta: cfg.zeta.clone(),
            xi,
            support,
            factors,
            alpha_inside,
            alpha_outside,
            noise_sigma,
        },
    ))
}

/// Tracked parameters of a coverage study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tracked {
    GammaPlain,
    GammaDebiased,
    AlphaInside,
    Delta,
    AlphaOutside,
}

impl Tracked {
    pub const ALL: [Tracked; 5] =
        [Tracked::GammaPlain, Tracked::GammaDebiased, Tracked::AlphaInside, Tracked::Delta, Tracked::AlphaOutside];

    pub fn name(self) -> &'static str {
        match self {
            Tracked::GammaPlain => "gamma_plain_1_1",
            Tracked::GammaDebiased => "gamma_debiased_1_1",
            Tracked::AlphaInside => "alpha_inside",
            Tracked::Delta => "delta",
            Tracked::AlphaOutside => "alpha_outside",
        }
    }
}

/// Standardized errors `(estimate − truth)/se` of one replication.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub rep: u64,
    pub seed: u64,
    pub error: Option<String>,
    pub z: Vec<(Tracked, f64)>,
    pub support_exact: bool,
    pub seconds: f64,
}

impl ReplicationRecord {
    pub fn z_of(&self, p: Tracked) -> Option<f64> {
        self.z.iter().find(|(q, _)| *q == p).map(|(_, v)| *v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub parameter: String,
    pub level: f64,
    pub coverage: f64,
    pub reps: usize,
    pub se: f64,
}

#[derive(Debug, Clone)]
pub struct CoverageStudy {
    pub records: Vec<ReplicationRecord>,
    pub table: Vec<CoverageRow>,
    pub histograms: Vec<(Tracked, Vec<HistogramBin>)>,
    pub failures: usize,
    pub support_recovery_rate: f64,
}

impl CoverageStudy {
    pub fn failure_rate(&self) -> f64 {
        self.failures as f64 / self.records.len().max(1) as f64
    }

    /// More than 1% of replications failed.
    pub fn failed(&self) -> bool {
        self.failure_rate() > 0.01
    }

    pub fn coverage(&self, p: Tracked, level: f64) -> Option<f64> {
        self.table
            .iter()
            .find(|r| r.parameter == p.name() && (r.level - level).abs() < 1e-12)
            .map(|r| r.coverage)
    }

    pub fn z_values(&self, p: Tracked) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.z_of(p)).collect()
    }
}

/// Fraction of standardized errors inside the two-sided `level` interval.
pub fn coverage_rate(z: &[f64], level: f64) -> f64 {
    let crit = normal_isf((1.0 - level) / 2.0);
    z.iter().filter(|v| v.abs() <= crit).count() as f64 / z.len().max(1) as f64
}

/// Cells tracked in every replication.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackedCells {
    /// Characteristic row and factor column of `γ`.
    pub gamma: (usize, usize),
    /// Asset and period of `α_I`.
    pub alpha_inside: (usize, usize),
    /// Asset and period of `α_O`.
    pub alpha_outside: (usize, usize),
    /// Period of `δ`; the cell is the first true shock in that period, or
    /// cell 0 when the period is quiet.
    pub delta_period: usize,
}

impl TrackedCells {
    pub fn default_for(t: usize) -> Self {
        Self { gamma: (0, 0), alpha_inside: (0, t / 2), alpha_outside: (0, t - 1), delta_period: t - 1 }
    }
}

fn replicate(
    cfg: &DgpConfig,
    est_cfg: &EstimationConfig,
    cells: &TrackedCells,
    rep: u64,
) -> Result<(Vec<(Tracked, f64)>, bool)> {
    let (panel, truth) = generate_panel(cfg, rep)?;
    let est = estimate(&panel, est_cfg)?;
    let var = VarianceEstimates::compute(&panel, &est)?;
    let (n, t) = (panel.n(), panel.t());
    let mut z = Vec::with_capacity(5);

    let f_true = demean_rows(&truth.factors);
    let f_plain = &est.plain.factors_demeaned;
    let ff_inv = spd_inverse(&(f_plain * f_plain.transpose()), SPD_REL_TOL).ok_or(Error::SingularFactorGram)?;
    let h = &f_true * f_plain.transpose() * ff_inv;
    let (gl, gk) = cells.gamma;
    let target = (h.transpose() * truth.gamma.row(gl).transpose())[gk];
    let se = var.gamma_se(gl, gk, n, t);
    z.push((Tracked::GammaPlain, (est.plain.gamma[(gl, gk)] - target) / se));
    z.push((Tracked::GammaDebiased, (est.debiased.gamma[(gl, gk)] - target) / se));

    let (i, s) = cells.alpha_inside;
    z.push((
        Tracked::AlphaInside,
        (est.debiased.alpha_inside[(i, s)] - truth.alpha_inside[(i, s)]) / var.v_inside[(i, s)].sqrt(),
    ));

    let s = cells.delta_period;
    let q = truth.support[s].first().copied().unwrap_or(0);
    let delta_true = truth.zeta[q] + truth.xi[(q, s)];
    z.push((Tracked::Delta, (est.outside.delta_raw[(q, s)] - delta_true) / var.v_delta[(q, s)].sqrt()));

    let (i, s) = cells.alpha_outside;
    z.push((
        Tracked::AlphaOutside,
        (est.outside.alpha_outside[(i, s)] - truth.alpha_outside[(i, s)]) / var.v_outside[(i, s)].sqrt(),
    ));
    let support_exact = est.outside.support == truth.support;
    Ok((z, support_exact))
}

/// Coverage of `estimate ± z·se` intervals for the tracked parameters.
pub fn run_coverage_study(
    cfg: &DgpConfig,
    est_cfg: &EstimationConfig,
    cells: &TrackedCells,
    reps: usize,
    levels: &[f64],
) -> CoverageStudy {
    let records: Vec<ReplicationRecord> = map_indexed(reps, |r| {
        let start = std::time::Instant::now();
        let out = replicate(cfg, est_cfg, cells, r as u64);
        let seconds = start.elapsed().as_secs_f64();
        match out {
            Ok((z, support_exact)) => ReplicationRecord { rep: r as u64, seed: cfg.seed, error: None, z, support_exact, seconds },
            Err(e) => {
                log::warn!("replication {r} failed: {e}");
                ReplicationRecord { rep: r as u64, seed: cfg.seed, error: Some(e.to_string()), z: Vec::new(), support_exact: false, seconds }
            }
        }
    });
    let failures = records.iter().filter(|r| r.error.is_some()).count();
    let ok = records.len() - failures;
    let mut table = Vec::new();
    let mut histograms = Vec::new();
    for p in Tracked::ALL {
        let z: Vec<f64> = records.iter().filter_map(|r| r.z_of(p)).collect();
        for &level in levels {
            let c = coverage_rate(&z, level);
            table.push(CoverageRow { parameter: p.name().to_string(), level, coverage: c, reps: z.len(), se: binomial_se(c, z.len()) });
        }
        histograms.push((p, histogram(&z, -4.0, 4.0, 32)));
    }
    let support_recovery_rate =
        records.iter().filter(|r| r.error.is_none() && r.support_exact).count() as f64 / ok.max(1) as f64;
    CoverageStudy { records, table, histograms, failures, support_recovery_rate }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PowerMethod {
    Formula,
    Bootstrap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerRow {
    pub delta_1: f64,
    pub method: PowerMethod,
    pub rejection_rate: f64,
    pub reps: usize,
    pub se: f64,
    pub failures: usize,
}

/// Settings shared by every point of a power grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerSettings {
    pub reps: usize,
    /// Significance level of the test.
    pub level: f64,
    pub threshold: ThresholdRule,
    pub bootstrap_draws: usize,
}

fn power_replication(cfg: &DgpConfig, settings: &PowerSettings, methods: &[PowerMethod], rep: u64) -> Result<Vec<bool>> {
    let (panel, _) = generate_panel(cfg, rep)?;
    let est_cfg = EstimationConfig { k: Some(cfg.k), omega: cfg.omega, threshold: settings.threshold, ..EstimationConfig::default() };
    let est = estimate(&panel, &est_cfg)?;
    let v = estimate_outside_variance(&est.bases, &est.outside, est.sigma2());
    let dims = Dims { n: panel.n(), t: panel.t(), l: panel.l(), k: cfg.k };
    let report = max_stat_test("t_stat_o", &est.outside.alpha_outside, &v, false, &[settings.level], dims)?;
    methods
        .iter()
        .map(|m| match m {
            PowerMethod::Formula => Ok(report.levels[0].reject),
            PowerMethod::Bootstrap => {
                let scores = OutsideAlphaScores {
                    bases: &est.bases,
                    residuals: &est.residuals,
                    support: &est.outside.support,
                    v_outside: &v,
                };
                let seed = cfg.seed ^ rep.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ StreamRole::Bootstrap as u64;
                let cv = bootstrap_critical_value(&scores, settings.level, settings.bootstrap_draws, seed)?;
                Ok(report.statistic > cv)
            }
        })
        .collect()
}

/// Rejection rates of the outside-alpha max test over a grid of configs
/// that differ only in `δ₁` (the first entry of `ζ`).
pub fn run_power_study(grid: &[DgpConfig], settings: &PowerSettings, methods: &[PowerMethod]) -> Vec<PowerRow> {
    let mut rows = Vec::new();
    for cfg in grid {
        let outcomes = map_indexed(settings.reps, |r| power_replication(cfg, settings, methods, r as u64));
        let failures = outcomes.iter().filter(|o| o.is_err()).count();
        for (j, &method) in methods.iter().enumerate() {
            let decisions: Vec<bool> = outcomes.iter().filter_map(|o| o.as_ref().ok().map(|d| d[j])).collect();
            let rate = decisions.iter().filter(|&&d| d).count() as f64 / decisions.len().max(1) as f64;
            rows.push(PowerRow {
                delta_1: cfg.zeta.get(0).copied().unwrap_or(0.0),
                method,
                rejection_rate: rate,
                reps: decisions.len(),
                se: binomial_se(rate, decisions.len()),
                failures,
            });
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factor::transform_returns;

    #[test]
    fn eta_is_orthogonal_to_gamma() {
        let cfg = DgpConfig::calibrated(60, 20, 5, 2, 1).unwrap();
        assert!(cfg.gamma.tr_mul(&cfg.eta).amax() < 1e-12);
    }

    #[test]
    fn same_seed_same_panel() {
        let cfg = DgpConfig::calibrated(40, 10, 4, 1, 9).unwrap();
        let (a, _) = generate_panel(&cfg, 3).unwrap();
        let (b, _) = generate_panel(&cfg, 3).unwrap();
        let (c, _) = generate_panel(&cfg, 4).unwrap();
        assert_eq!(a.returns(), b.returns());
        assert_ne!(a.returns(), c.returns());
    }

    #[test]
    fn noiseless_pure_factor_panel_has_rank_k() {
        let mut cfg = DgpConfig::calibrated(50, 15, 5, 2, 2).unwrap();
        cfg.noise_sigma = vec![0.0];
        cfg.xi = None;
        cfg.zeta = DVector::zeros(45);
        cfg.eta = DVector::zeros(5);
        let (p, truth) = generate_panel(&cfg, 0).unwrap();
        for s in 0..15 {
            let fitted = p.x(s) * (&truth.gamma * truth.factors.column(s));
            assert!((p.r(s) - fitted).amax() < 1e-12);
        }
        let tr = transform_returns(&p).unwrap();
        let sv = tr.rddot_demeaned.singular_values();
        let mut sv: Vec<f64> = sv.iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        assert!(sv[2] < 1e-10 * sv[0]);
    }

    #[test]
    fn shock_design_counts_and_magnitudes() {
        let d = XiDesign { active_periods: 6, spikes_per_period: 3, center: 1.0, halfwidth: 0.5, last_period_active: true, balanced: false };
        let mut rng = stream_rng(1, 0, StreamRole::Shocks);
        let (xi, support) = draw_shocks(&d, 20, 10, &mut rng);
        assert_eq!(support.iter().filter(|s| !s.is_empty()).count(), 6);
        assert_eq!(support[9].len(), 3);
        for (t, s) in support.iter().enumerate() {
            for &q in s {
                let v = xi[(q, t)].abs();
                assert!((0.5..=1.5).contains(&v));
            }
        }
        let balanced = XiDesign { balanced: true, ..d };
        let (xi, _) = draw_shocks(&balanced, 20, 10, &mut rng);
        for q in 0..20 {
            assert!(xi.row(q).sum().abs() < 1e-15);
        }
    }

    #[test]
    fn power_factor_variance_matches_design() {
        let cfg = DgpConfig::power(30, 200, 0.0, 5).unwrap();
        let (_, truth) = generate_panel(&cfg, 0).unwrap();
        let f = demean_rows(&truth.factors);
        let var = f.row(0).norm_squared() / 199.0;
        assert!((var - 4.0).abs() < 0.4, "{var}");
    }

    #[test]
    fn gaussian_oracle_coverage_is_nominal() {
        let mut rng = stream_rng(11, 0, StreamRole::Noise);
        let z: Vec<f64> = (0..4000).map(|_| normal(&mut rng)).collect();
        let c = coverage_rate(&z, 0.95);
        assert!((c - 0.95).abs() <= 2.0 * binomial_se(0.95, 4000), "{c}");
    }
}
