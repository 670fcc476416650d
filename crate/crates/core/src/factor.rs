//! Characteristic-space transform, spectral loading estimation, debiasing,
//! and the inside-alpha / η estimators.
//!
//! Returns are mapped into characteristic space period by period,
//! `R̈_{t+1} = (X_tᵀX_t)⁻¹X_tᵀR_{t+1}`, where the demeaned panel `R̈ᵈ` has the
//! low-rank form `Γ fᵈ + noise`. `Γ` is only identified up to a right
//! rotation; every rotation-invariant functional (inside alphas, η, fitted
//! values, residual variances) is reported as such.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    fix_column_signs, left_singular_sorted, pairwise_sum, pairwise_sum_matrices, spd_inverse, SPD_REL_TOL,
};
use crate::panel::Panel;
use crate::parallel::{map_indexed, try_map_indexed};

/// Returns expressed in characteristic space, with per-period Gram matrices.
#[derive(Debug, Clone)]
pub struct TransformedReturns {
    /// L×T, column t is `R̈_{t+1}`.
    pub rddot: DMatrix<f64>,
    pub rddot_mean: DVector<f64>,
    /// `R̈` with each row demeaned across periods.
    pub rddot_demeaned: DMatrix<f64>,
    /// `X_tᵀX_t` per period.
    pub grams: Vec<DMatrix<f64>>,
    /// `(X_tᵀX_t)⁻¹` per period.
    pub gram_inverses: Vec<DMatrix<f64>>,
}

impl TransformedReturns {
    pub fn l(&self) -> usize {
        self.rddot.nrows()
    }

    pub fn t(&self) -> usize {
        self.rddot.ncols()
    }
}

/// Row means of a matrix using pairwise summation.
pub(crate) fn row_means(m: &DMatrix<f64>) -> DVector<f64> {
    let cols = m.ncols() as f64;
    DVector::from_iterator(
        m.nrows(),
        (0..m.nrows()).map(|i| {
            let row: Vec<f64> = m.row(i).iter().copied().collect();
            pairwise_sum(&row) / cols
        }),
    )
}

pub(crate) fn demean_rows(m: &DMatrix<f64>) -> DMatrix<f64> {
    let means = row_means(m);
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] - means[i])
}

pub fn transform_returns(panel: &Panel) -> Result<TransformedReturns> {
    let t_len = panel.t();
    let per_period = try_map_indexed(t_len, |t| {
        let x = panel.x(t);
        let gram = x.tr_mul(x);
        let inv = spd_inverse(&gram, SPD_REL_TOL).ok_or_else(|| Error::RankDeficientCharacteristics {
            period: t,
            label: panel.period_labels()[t].clone(),
        })?;
        let rd = &inv * x.tr_mul(&panel.r(t));
        Ok::<_, Error>((gram, inv, rd))
    })?;
    let l = panel.l();
    let mut rddot = DMatrix::zeros(l, t_len);
    let mut grams = Vec::with_capacity(t_len);
    let mut gram_inverses = Vec::with_capacity(t_len);
    for (t, (gram, inv, rd)) in per_period.into_iter().enumerate() {
        rddot.set_column(t, &rd);
        grams.push(gram);
        gram_inverses.push(inv);
    }
    let rddot_mean = row_means(&rddot);
    let rddot_demeaned = demean_rows(&rddot);
    Ok(TransformedReturns { rddot, rddot_mean, rddot_demeaned, grams, gram_inverses })
}

fn check_rank(k: usize, l: usize, t: usize) -> Result<()> {
    if k == 0 || k >= l.min(t) {
        return Err(Error::InvalidRank { k, l, t });
    }
    Ok(())
}

/// Output of the spectral step: orthonormal `Γ̃` and `F̃ᵈ = Γ̃ᵀR̈ᵈ`.
#[derive(Debug, Clone)]
pub struct SpectralEstimate {
    pub gamma: DMatrix<f64>,
    pub factors_demeaned: DMatrix<f64>,
    pub singular_values: Vec<f64>,
}

/// Top-`k` left singular vectors of `R̈ᵈ`, sign-normalised so that the
/// largest-magnitude entry of each column is positive.
pub fn estimate_gamma_plain(tr: &TransformedReturns, k: usize) -> Result<SpectralEstimate> {
    check_rank(k, tr.l(), tr.t())?;
    let (u, psi) = left_singular_sorted(&tr.rddot_demeaned);
    if (psi[k - 1] - psi[k]).abs() <= 1e-12 * psi[k - 1] {
        return Err(Error::DegenerateSpectrum { k });
    }
    let mut gamma = u.columns(0, k).into_owned();
    fix_column_signs(&mut gamma);
    let factors_demeaned = project_factors(&gamma, &tr.rddot_demeaned)?;
    Ok(SpectralEstimate { gamma, factors_demeaned, singular_values: psi })
}

/// Least-squares factors `(ΓᵀΓ)⁻¹Γᵀ Y`.
pub fn project_factors(gamma: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let inv = spd_inverse(&gamma.tr_mul(gamma), SPD_REL_TOL).ok_or(Error::SingularFactorGram)?;
    Ok(inv * gamma.tr_mul(y))
}

/// `η̂`, inside alphas and the recovered factors `f̆` for given loadings.
#[derive(Debug, Clone)]
pub struct InsideEstimate {
    pub eta: DVector<f64>,
    /// N×T.
    pub alpha_inside: DMatrix<f64>,
    /// K×T.
    pub factors_breve: DMatrix<f64>,
}

pub fn estimate_eta_alpha_inside(
    panel: &Panel,
    tr: &TransformedReturns,
    gamma: &DMatrix<f64>,
) -> Result<InsideEstimate> {
    let gg_inv = spd_inverse(&gamma.tr_mul(gamma), SPD_REL_TOL)
        .ok_or(Error::RankDeficientLoadings { period: 0 })?;
    let mean = &tr.rddot_mean;
    let eta = mean - gamma * (&gg_inv * gamma.tr_mul(mean));
    let base = &gg_inv * gamma.tr_mul(&tr.rddot);

    let per_period = try_map_indexed(tr.t(), |t| {
        let gram = &tr.grams[t];
        let g_gram = gamma.tr_mul(gram);
        let inv = spd_inverse(&(&g_gram * gamma), SPD_REL_TOL)
            .ok_or(Error::RankDeficientLoadings { period: t })?;
        // α_{I,t} = X_t (m − Γ (ΓᵀX_tᵀX_tΓ)⁻¹ ΓᵀX_tᵀX_t m), m = mean of R̈
        let w = mean - gamma * (&inv * (&g_gram * mean));
        let alpha = panel.x(t) * w;
        let f = base.column(t) + &inv * (&g_gram * &eta);
        Ok::<_, Error>((alpha, f))
    })?;
    let mut alpha_inside = DMatrix::zeros(panel.n(), tr.t());
    let mut factors_breve = DMatrix::zeros(gamma.ncols(), tr.t());
    for (t, (a, f)) in per_period.into_iter().enumerate() {
        alpha_inside.set_column(t, &a);
        factors_breve.set_column(t, &f);
    }
    Ok(InsideEstimate { eta, alpha_inside, factors_breve })
}

/// Estimated model for one choice of loadings (plain spectral or debiased).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFit {
    /// L×K loadings, identified up to right rotation.
    pub gamma: DMatrix<f64>,
    /// K×T demeaned factors.
    pub factors_demeaned: DMatrix<f64>,
    /// K×T recovered factors `f̆_{t+1}`.
    pub factors_breve: DMatrix<f64>,
    pub eta: DVector<f64>,
    /// N×T inside alphas.
    pub alpha_inside: DMatrix<f64>,
    /// Per-period residual variances.
    pub sigma2: Vec<f64>,
    pub debiased: bool,
    pub k: usize,
}

impl ModelFit {
    /// Assemble a fit from loadings: factors and inside quantities are derived.
    pub fn from_gamma(
        panel: &Panel,
        tr: &TransformedReturns,
        gamma: DMatrix<f64>,
        sigma2: Vec<f64>,
        debiased: bool,
    ) -> Result<Self> {
        let factors_demeaned = project_factors(&gamma, &tr.rddot_demeaned)?;
        let inside = estimate_eta_alpha_inside(panel, tr, &gamma)?;
        Ok(Self {
            k: gamma.ncols(),
            gamma,
            factors_demeaned,
            factors_breve: inside.factors_breve,
            eta: inside.eta,
            alpha_inside: inside.alpha_inside,
            sigma2,
            debiased,
        })
    }

    /// `X_t Γ f̆_{t+1}` for every period (N×T).
    pub fn systematic(&self, panel: &Panel) -> DMatrix<f64> {
        let cols = map_indexed(panel.t(), |t| panel.x(t) * (&self.gamma * self.factors_breve.column(t)));
        DMatrix::from_columns(&cols)
    }
}

/// JSON view of a [`ModelFit`] with `gamma` as row-major nested arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFitSummary {
    #[serde(rename = "K")]
    pub k: usize,
    pub debiased: bool,
    pub gamma: Vec<Vec<f64>>,
    pub eta: Vec<f64>,
    pub sigma2: Vec<f64>,
}

impl ModelFit {
    pub fn summary(&self) -> ModelFitSummary {
        ModelFitSummary {
            k: self.k,
            debiased: self.debiased,
            gamma: self.gamma.row_iter().map(|r| r.iter().copied().collect()).collect(),
            eta: self.eta.iter().copied().collect(),
            sigma2: self.sigma2.clone(),
        }
    }
}

/// Residuals `r − α_O − α_I − X_tΓf̆` (N×T).
pub fn residuals(panel: &Panel, fit: &ModelFit, alpha_outside: &DMatrix<f64>) -> DMatrix<f64> {
    panel.returns() - alpha_outside - &fit.alpha_inside - fit.systematic(panel)
}

/// Per-period mean squared residual.
pub fn sigma2_from_residuals(resid: &DMatrix<f64>) -> Vec<f64> {
    let n = resid.nrows() as f64;
    (0..resid.ncols())
        .map(|t| {
            let sq: Vec<f64> = resid.column(t).iter().map(|e| e * e).collect();
            pairwise_sum(&sq) / n
        })
        .collect()
}

pub fn estimate_sigma2(panel: &Panel, fit: &ModelFit, alpha_outside: &DMatrix<f64>) -> Vec<f64> {
    sigma2_from_residuals(&residuals(panel, fit, alpha_outside))
}

/// Bias correction `(Σ_t σ̂²_{t+1}(X_tᵀX_t)⁻¹) Γ̃ (Γ̃ᵀΓ̃)⁻¹ (F̃ᵈF̃ᵈᵀ)⁻¹`.
pub fn debias_correction(
    tr: &TransformedReturns,
    gamma: &DMatrix<f64>,
    factors_demeaned: &DMatrix<f64>,
    sigma2: &[f64],
) -> Result<DMatrix<f64>> {
    let weighted: Vec<DMatrix<f64>> = tr
        .gram_inverses
        .iter()
        .zip(sigma2)
        .map(|(inv, s)| inv * *s)
        .collect();
    let noise = pairwise_sum_matrices(&weighted).unwrap_or_else(|| DMatrix::zeros(tr.l(), tr.l()));
    let gg_inv = spd_inverse(&gamma.tr_mul(gamma), SPD_REL_TOL).ok_or(Error::SingularFactorGram)?;
    let ff_inv = spd_inverse(&(factors_demeaned * factors_demeaned.transpose()), SPD_REL_TOL)
        .ok_or(Error::SingularFactorGram)?;
    Ok(noise * gamma * gg_inv * ff_inv)
}

/// Debiased fit: `Γ̂ = Γ̃ − correction`, with factors, η̂, inside alphas and
/// `f̂` recomputed from `Γ̂`. `sigma2` is carried into the returned fit.
pub fn debias_gamma(
    panel: &Panel,
    tr: &TransformedReturns,
    plain: &ModelFit,
    sigma2: &[f64],
) -> Result<ModelFit> {
    let correction = debias_correction(tr, &plain.gamma, &plain.factors_demeaned, sigma2)?;
    let gamma = &plain.gamma - correction;
    ModelFit::from_gamma(panel, tr, gamma, sigma2.to_vec(), true)
}

/// Default upper bound for rank selection: ⌊min(L,T)/2⌋ capped at 15.
pub fn default_k_max(l: usize, t: usize) -> usize {
    (l.min(t) / 2).clamp(1, 15)
}

/// Eigenvalue-ratio rank selector on singular values `ψ` sorted descending.
pub fn select_rank_from_singular_values(psi: &[f64], k_max: usize) -> usize {
    let top = psi.first().copied().unwrap_or(0.0);
    let mut best = (1, f64::NEG_INFINITY);
    for k in 1..=k_max.min(psi.len().saturating_sub(1)) {
        if psi[k] <= 1e-14 * top {
            return k;
        }
        let ratio = psi[k - 1] / psi[k];
        if ratio > best.1 {
            best = (k, ratio);
        }
    }
    best.0
}

pub fn select_rank(tr: &TransformedReturns, k_max: usize) -> Result<usize> {
    if k_max == 0 || k_max >= tr.l().min(tr.t()) {
        return Err(Error::InvalidRank { k: k_max, l: tr.l(), t: tr.t() });
    }
    let psi = tr.rddot_demeaned.singular_values();
    let mut psi: Vec<f64> = psi.iter().copied().collect();
    psi.sort_by(|a, b| b.total_cmp(a));
    Ok(select_rank_from_singular_values(&psi, k_max))
}

/// `R² = 1 − Σε̂² / Σ(r − r̄)²` with `r̄` the grand mean of returns.
pub fn r_squared(panel: &Panel, resid: &DMatrix<f64>) -> f64 {
    let r = panel.returns();
    let grand = r.mean();
    let tss: Vec<f64> = r.iter().map(|v| (v - grand).powi(2)).collect();
    let rss: Vec<f64> = resid.iter().map(|e| e * e).collect();
    1.0 - pairwise_sum(&rss) / pairwise_sum(&tss)
}
