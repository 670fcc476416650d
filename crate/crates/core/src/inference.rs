//! Variance estimators, max-type tests, Wald tests for loading rows,
//! multiplier-bootstrap critical values and FDR-adjusted confidence bands.
//!
//! Noise is treated as independent across assets and periods with
//! period-specific variance `σ²_t`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factor::row_means;
use crate::linalg::{pairwise_sum, pairwise_sum_matrices, spd_inverse, SPD_REL_TOL};
use crate::outside::{OrthoBasis, OutsideAlphaFit};
use crate::panel::Panel;
use crate::parallel::{map_indexed, try_map_indexed};
use crate::pipeline::Estimation;
use crate::stats::{chi2_isf, chi2_sf, normal_isf, normal_sf};

/// Significance levels reported by every test.
pub const DEFAULT_LEVELS: [f64; 3] = [0.10, 0.05, 0.01];

#[derive(Debug, Clone)]
pub struct VarianceEstimates {
    /// Per characteristic, the K×K asymptotic covariance of `√(NT)(γ̂_l − Hᵀγ_l)`.
    pub gamma_row_cov: Vec<DMatrix<f64>>,
    /// N×T variances of `α̂_I`.
    pub v_inside: DMatrix<f64>,
    /// (N−L)×T variances of `δ̃`.
    pub v_delta: DMatrix<f64>,
    /// N×T variances of `α̂_O`.
    pub v_outside: DMatrix<f64>,
}

impl VarianceEstimates {
    pub fn compute(panel: &Panel, est: &Estimation) -> Result<Self> {
        let fit = &est.debiased;
        let gamma_row_cov = (0..panel.l())
            .map(|l| estimate_gamma_row_variance(est, l))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            gamma_row_cov,
            v_inside: estimate_inside_variance(panel, est)?,
            v_delta: estimate_delta_variance(&fit.sigma2, panel.n(), panel.n() - panel.l()),
            v_outside: estimate_outside_variance(&est.bases, &est.outside, &fit.sigma2),
        })
    }

    /// Standard error of `γ̂_{l,k}`.
    pub fn gamma_se(&self, l: usize, k: usize, n: usize, t: usize) -> f64 {
        (self.gamma_row_cov[l][(k, k)] / (n * t) as f64).sqrt()
    }
}

fn factor_gram_inverse(f: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let t = f.ncols() as f64;
    spd_inverse(&(f * f.transpose() / t), SPD_REL_TOL).ok_or(Error::SingularFactorGram)
}

/// Sandwich `Q_f⁻¹ (T⁻¹ Σ_t σ̂²_t [Q_t⁻¹]_ll f̂ᵈ_t f̂ᵈ_tᵀ) Q_f⁻¹` with `Q_t = X_tᵀX_t/N`.
pub fn estimate_gamma_row_variance(est: &Estimation, l: usize) -> Result<DMatrix<f64>> {
    let fit = &est.debiased;
    let f = &fit.factors_demeaned;
    let qf_inv = factor_gram_inverse(f)?;
    let n = est.residuals.nrows() as f64;
    let terms: Vec<DMatrix<f64>> = (0..f.ncols())
        .map(|t| {
            let w = fit.sigma2[t] * n * est.transformed.gram_inverses[t][(l, l)];
            f.column(t) * f.column(t).transpose() * w
        })
        .collect();
    let middle = pairwise_sum_matrices(&terms).ok_or(Error::SingularFactorGram)? / f.ncols() as f64;
    let v = &qf_inv * middle * &qf_inv;
    Ok((&v + v.transpose()) * 0.5)
}

/// `V̂_{I,it} = σ̂²_{I,it} L/(NT)`.
///
/// Every `σ̂²_{I,it}` is a quadratic form `x_itᵀ Z_t x_it / (TL)`; `Z_t` is
/// assembled from a handful of period-weighted sums of `Q_s`.
pub fn estimate_inside_variance(panel: &Panel, est: &Estimation) -> Result<DMatrix<f64>> {
    let fit = &est.debiased;
    let tr = &est.transformed;
    let (n, t_len, l, k) = (panel.n(), panel.t(), panel.l(), fit.k);
    let nf = n as f64;
    let gamma = &fit.gamma;
    let qf_inv = factor_gram_inverse(&fit.factors_demeaned)?;
    let ft = &qf_inv * &fit.factors_demeaned;
    let gg_inv = spd_inverse(&gamma.tr_mul(gamma), SPD_REL_TOL).ok_or(Error::RankDeficientLoadings { period: 0 })?;
    let f_bar = &gg_inv * gamma.tr_mul(&tr.rddot_mean);
    let sigma2 = &fit.sigma2;

    let weighted = |w: &dyn Fn(usize) -> f64| -> DMatrix<f64> {
        let terms: Vec<DMatrix<f64>> = (0..t_len).map(|s| &tr.grams[s] * (sigma2[s] * w(s) / nf)).collect();
        pairwise_sum_matrices(&terms).unwrap_or_else(|| DMatrix::zeros(l, l))
    };
    let s0 = weighted(&|_| 1.0);
    let s1: Vec<DMatrix<f64>> = (0..k).map(|a| weighted(&|s| ft[(a, s)])).collect();
    let mut s2 = vec![vec![DMatrix::zeros(l, l); k]; k];
    for a in 0..k {
        for b in a..k {
            let m = weighted(&|s| ft[(a, s)] * ft[(b, s)]);
            s2[b][a] = m.clone();
            s2[a][b] = m;
        }
    }

    let eta = &fit.eta;
    let cols = try_map_indexed(t_len, |t| {
        let q = &tr.grams[t] / nf;
        let q_inv = &tr.gram_inverses[t] * nf;
        let qg = &q * gamma;
        let g_inv = spd_inverse(&gamma.tr_mul(&qg), SPD_REL_TOL).ok_or(Error::RankDeficientLoadings { period: t })?;
        let h: DVector<f64> = &g_inv * qg.tr_mul(eta) + &f_bar;
        let p = q_inv - gamma * &g_inv * gamma.transpose();
        let beta: DVector<f64> = eta - gamma * (&g_inv * qg.tr_mul(eta));
        let r = &g_inv * gamma.transpose();

        let mut maa = s0.clone();
        let mut c = DMatrix::zeros(l, k);
        let mut d = DMatrix::zeros(k, k);
        for a in 0..k {
            maa -= &s1[a] * (2.0 * h[a]);
            let mut col = s1[a].clone();
            for b in 0..k {
                maa += &s2[a][b] * (h[a] * h[b]);
                col -= &s2[b][a] * h[b];
                d[(a, b)] = beta.dot(&(&s2[a][b] * &beta));
            }
            c.set_column(a, &(col * &beta));
        }
        let pcr = &p * c * &r;
        let z = &p * maa * &p - &pcr - pcr.transpose() + r.transpose() * d * &r;
        let x = panel.x(t);
        let scale = 1.0 / (nf * (t_len * t_len) as f64);
        Ok::<_, Error>(DVector::from_iterator(
            n,
            (0..n).map(|i| {
                let xi = x.row(i).transpose();
                (xi.dot(&(&z * &xi)) * scale).max(0.0)
            }),
        ))
    })?;
    Ok(DMatrix::from_columns(&cols))
}

/// `V̂_{δ,tq} = σ̂²_t / N`.
pub fn estimate_delta_variance(sigma2: &[f64], n: usize, p: usize) -> DMatrix<f64> {
    DMatrix::from_fn(p, sigma2.len(), |_, t| sigma2[t] / n as f64)
}

/// `V̂_{o,it} = (σ̄²/T)(‖Bᵒ_{t,i}‖²/N) + σ̂²_t N⁻¹ Σ_{q∈D_t} (Bᵒ_{t,iq})²`.
pub fn estimate_outside_variance(bases: &[OrthoBasis], outside: &OutsideAlphaFit, sigma2: &[f64]) -> DMatrix<f64> {
    let t_len = sigma2.len();
    let sigma_bar = pairwise_sum(sigma2) / t_len as f64;
    let cols = map_indexed(t_len, |t| {
        let b = &bases[t];
        let n = b.n() as f64;
        let mut v = b.row_norms_sq() * (sigma_bar / (t_len as f64 * n));
        let support = &outside.support[t];
        if !support.is_empty() {
            let cols = b.columns(support);
            for i in 0..v.len() {
                v[i] += sigma2[t] * cols.row(i).norm_squared() / n;
            }
        }
        v
    });
    DMatrix::from_columns(&cols)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelDecision {
    pub level: f64,
    pub critical_value: f64,
    pub reject: bool,
}

/// Panel dimensions echoed in every report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n: usize,
    pub t: usize,
    pub l: usize,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub name: String,
    pub statistic: f64,
    pub levels: Vec<LevelDecision>,
    pub p_value_bound: f64,
    /// Number of cells (or tests) the critical value is adjusted for.
    pub m: usize,
    pub dims: Dims,
    /// Cell attaining the maximum, as (row, period).
    pub argmax: Option<(usize, usize)>,
}

impl TestReport {
    pub fn rejects_at(&self, level: f64) -> Option<bool> {
        self.levels.iter().find(|d| (d.level - level).abs() < 1e-12).map(|d| d.reject)
    }
}

/// Bonferroni-Gaussian critical value `Φ⁻¹(1 − level/(2m))`.
pub fn max_stat_critical(level: f64, m: usize) -> f64 {
    normal_isf(level / (2.0 * m as f64))
}

/// `max |v/√V|` over all cells, optionally demeaning each row across periods
/// first, compared with `Φ⁻¹(1 − level/(2m))`.
pub fn max_stat_test(
    name: &str,
    values: &DMatrix<f64>,
    variances: &DMatrix<f64>,
    demean_over_t: bool,
    levels: &[f64],
    dims: Dims,
) -> Result<TestReport> {
    if values.shape() != variances.shape() {
        return Err(Error::IncompatibleDimensions(format!(
            "values {:?} vs variances {:?}",
            values.shape(),
            variances.shape()
        )));
    }
    let centred;
    let v = if demean_over_t {
        let means = row_means(values);
        centred = DMatrix::from_fn(values.nrows(), values.ncols(), |i, j| values[(i, j)] - means[i]);
        &centred
    } else {
        values
    };
    let mut stat = 0.0;
    let mut argmax = None;
    for j in 0..v.ncols() {
        for i in 0..v.nrows() {
            let var = variances[(i, j)];
            if !(var > 0.0) || !var.is_finite() {
                return Err(Error::ZeroVariance { row: i, col: j });
            }
            let z = (v[(i, j)] / var.sqrt()).abs();
            if z > stat {
                stat = z;
                argmax = Some((i, j));
            }
        }
    }
    let m = v.len();
    Ok(TestReport {
        name: name.to_string(),
        statistic: stat,
        levels: levels
            .iter()
            .map(|&level| {
                let cv = max_stat_critical(level, m);
                LevelDecision { level, critical_value: cv, reject: stat > cv }
            })
            .collect(),
        p_value_bound: (2.0 * m as f64 * normal_sf(stat)).min(1.0),
        m,
        dims,
        argmax,
    })
}

/// `W_l = NT γ̂_lᵀ V̂⁻¹ γ̂_l` against the `χ²_K` quantile at `1 − level/n_tests`.
pub fn wald_gamma_test(
    gamma: &DMatrix<f64>,
    row_cov: &DMatrix<f64>,
    l: usize,
    levels: &[f64],
    n_tests: usize,
    dims: Dims,
) -> Result<TestReport> {
    let k = gamma.ncols();
    let inv = spd_inverse(row_cov, SPD_REL_TOL).ok_or(Error::SingularVariance(l))?;
    let g = gamma.row(l).transpose();
    let w = (dims.n * dims.t) as f64 * g.dot(&(inv * &g));
    Ok(TestReport {
        name: format!("wald_gamma_{l}"),
        statistic: w,
        levels: levels
            .iter()
            .map(|&level| {
                let cv = chi2_isf(level / n_tests as f64, k);
                LevelDecision { level, critical_value: cv, reject: w > cv }
            })
            .collect(),
        p_value_bound: (n_tests as f64 * chi2_sf(w, k)).min(1.0),
        m: n_tests,
        dims,
        argmax: None,
    })
}

/// The full battery: two `δ̃` max tests, the outside- and inside-alpha max
/// tests, and one Wald test per characteristic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TestSuite {
    pub t_stat_1: TestReport,
    pub t_stat_2: TestReport,
    pub t_stat_o: TestReport,
    pub t_stat_i: TestReport,
    pub wald: Vec<TestReport>,
}

pub fn run_tests(panel: &Panel, est: &Estimation, var: &VarianceEstimates, levels: &[f64]) -> Result<TestSuite> {
    let dims = Dims { n: panel.n(), t: panel.t(), l: panel.l(), k: est.k() };
    let delta = &est.outside.delta_raw;
    let wald = (0..panel.l())
        .map(|l| wald_gamma_test(&est.debiased.gamma, &var.gamma_row_cov[l], l, levels, panel.l(), dims))
        .collect::<Result<Vec<_>>>()?;
    Ok(TestSuite {
        t_stat_1: max_stat_test("t_stat_1", delta, &var.v_delta, false, levels, dims)?,
        t_stat_2: max_stat_test("t_stat_2", delta, &var.v_delta, true, levels, dims)?,
        t_stat_o: max_stat_test("t_stat_o", &est.outside.alpha_outside, &var.v_outside, false, levels, dims)?,
        t_stat_i: max_stat_test("t_stat_i", &est.debiased.alpha_inside, &var.v_inside, false, levels, dims)?,
        wald,
    })
}

fn normal_draw(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Source of bootstrap replicates of a studentized max statistic.
pub trait MultiplierScores: Sync {
    /// One draw of `max |·|` under fresh standard-normal multipliers.
    fn draw_max(&self, rng: &mut ChaCha8Rng) -> f64;
}

/// Cells whose studentized score is a fixed linear combination of the
/// multipliers: row `c` of `weights` gives cell `c`.
#[derive(Debug, Clone)]
pub struct LinearScores {
    pub weights: DMatrix<f64>,
}

impl MultiplierScores for LinearScores {
    fn draw_max(&self, rng: &mut ChaCha8Rng) -> f64 {
        let e = DVector::from_iterator(self.weights.ncols(), (0..self.weights.ncols()).map(|_| normal_draw(rng)));
        (&self.weights * e).amax()
    }
}

/// `δ̃` cells: score `N^{-1/2} Σ_j Bᵒ_{t,jq} ε̂_{j,t} e_{j,t} / σ̂_t`.
pub struct DeltaScores<'a> {
    pub bases: &'a [OrthoBasis],
    pub residuals: &'a DMatrix<f64>,
    pub sigma2: &'a [f64],
}

impl MultiplierScores for DeltaScores<'_> {
    fn draw_max(&self, rng: &mut ChaCha8Rng) -> f64 {
        let (n, t_len) = self.residuals.shape();
        let mut best = 0.0_f64;
        for t in 0..t_len {
            let e = DMatrix::from_fn(n, 1, |j, _| self.residuals[(j, t)] * normal_draw(rng));
            let s = self.bases[t].apply_t_mat(&e) / (n as f64 * self.sigma2[t]).sqrt();
            best = best.max(s.amax());
        }
        best
    }
}

/// `α̂_O` cells: multiplier replicate of the linearised error
/// `Bᵒ_t(ḡ + 1_{D_t}∘g_t)` with `g_s = N⁻¹Bᵒ_sᵀ(ε̂_s∘e_s)`, studentized by `V̂_O`.
pub struct OutsideAlphaScores<'a> {
    pub bases: &'a [OrthoBasis],
    pub residuals: &'a DMatrix<f64>,
    pub support: &'a [Vec<usize>],
    pub v_outside: &'a DMatrix<f64>,
}

impl MultiplierScores for OutsideAlphaScores<'_> {
    fn draw_max(&self, rng: &mut ChaCha8Rng) -> f64 {
        let (n, t_len) = self.residuals.shape();
        let g: Vec<DMatrix<f64>> = (0..t_len)
            .map(|t| {
                let e = DMatrix::from_fn(n, 1, |j, _| self.residuals[(j, t)] * normal_draw(rng));
                self.bases[t].apply_t_mat(&e) / n as f64
            })
            .collect();
        let g_bar = pairwise_sum_matrices(&g).map(|s| s / t_len as f64);
        let Some(g_bar) = g_bar else { return 0.0 };
        let mut best = 0.0_f64;
        for t in 0..t_len {
            let mut c = g_bar.clone();
            for &q in &self.support[t] {
                c[(q, 0)] += g[t][(q, 0)];
            }
            let a = self.bases[t].apply_mat(&c);
            for i in 0..n {
                best = best.max((a[(i, 0)] / self.v_outside[(i, t)].sqrt()).abs());
            }
        }
        best
    }
}

/// Empirical `(1 − level)` quantiles of the bootstrapped max statistic.
/// Draw `b` uses stream `b` of a ChaCha generator keyed by `seed`, so the
/// result does not depend on the number of threads.
pub fn bootstrap_critical_values(
    scores: &dyn MultiplierScores,
    levels: &[f64],
    draws: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if draws < 200 {
        return Err(Error::InvalidConfig(format!("bootstrap needs at least 200 draws, got {draws}")));
    }
    let mut maxima = map_indexed(draws, |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(b as u64);
        scores.draw_max(&mut rng)
    });
    maxima.sort_by(f64::total_cmp);
    Ok(levels
        .iter()
        .map(|&level| {
            let idx = ((1.0 - level) * draws as f64).ceil() as usize;
            maxima[idx.clamp(1, draws) - 1]
        })
        .collect())
}

pub fn bootstrap_critical_value(scores: &dyn MultiplierScores, level: f64, draws: usize, seed: u64) -> Result<f64> {
    Ok(bootstrap_critical_values(scores, &[level], draws, seed)?[0])
}

/// One cell of an FDR-adjusted band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandCell {
    pub row: usize,
    pub col: usize,
    pub estimate: f64,
    pub lo: f64,
    pub hi: f64,
    pub selected: bool,
}

/// Two-sided intervals `estimate ± z*·√V` where `z*` comes from the
/// Benjamini–Yekutieli step-up rule at rate `level`; unselected cells use the
/// most conservative step.
pub fn fdr_confidence_bands(estimates: &DMatrix<f64>, variances: &DMatrix<f64>, level: f64) -> Result<Vec<BandCell>> {
    if estimates.shape() != variances.shape() {
        return Err(Error::IncompatibleDimensions("estimates and variances differ in shape".into()));
    }
    let m = estimates.len();
    if m == 0 {
        return Ok(Vec::new());
    }
    let harmonic: f64 = (1..=m).map(|j| 1.0 / j as f64).sum();
    let mut cells = Vec::with_capacity(m);
    for j in 0..estimates.ncols() {
        for i in 0..estimates.nrows() {
            let var = variances[(i, j)];
            if !(var > 0.0) || !var.is_finite() {
                return Err(Error::ZeroVariance { row: i, col: j });
            }
            let z = estimates[(i, j)].abs() / var.sqrt();
            cells.push((i, j, 2.0 * normal_sf(z)));
        }
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| cells[a].2.total_cmp(&cells[b].2));
    let step = |k: usize| k as f64 * level / (m as f64 * harmonic);
    let k_star = (1..=m).rev().find(|&k| cells[order[k - 1]].2 <= step(k)).unwrap_or(0);
    let mut selected = vec![false; m];
    for &idx in &order[..k_star] {
        selected[idx] = true;
    }
    let z_sel = normal_isf(step(k_star.max(1)) / 2.0);
    let z_cons = normal_isf(step(1) / 2.0);
    Ok(cells
        .iter()
        .zip(selected)
        .map(|(&(i, j, _), sel)| {
            let z = if sel { z_sel } else { z_cons };
            let half = z * variances[(i, j)].sqrt();
            let est = estimates[(i, j)];
            BandCell { row: i, col: j, estimate: est, lo: est - half, hi: est + half, selected: sel }
        })
        .collect())
}
