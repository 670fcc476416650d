//! End-to-end estimation: outside alphas first (they depend only on `X` and
//! `R`), then the spectral fit, the debiasing step and the final residuals.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factor::{
    debias_gamma, default_k_max, estimate_gamma_plain, estimate_sigma2, r_squared, residuals, select_rank,
    sigma2_from_residuals, transform_returns, ModelFit, TransformedReturns,
};
use crate::linalg::left_singular_sorted;
use crate::outside::{
    build_bases, effective_omega, estimate_delta_raw, fit_outside, threshold_and_refine, OmegaSpec, OrthoBasis,
    OutsideAlphaFit, ThresholdRule,
};
use crate::panel::Panel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimationConfig {
    /// Number of factors; `None` selects it by the eigenvalue-ratio rule.
    pub k: Option<usize>,
    /// Upper bound for rank selection; defaults to `min(L,T)/2` capped at 15.
    pub k_max: Option<usize>,
    pub omega: OmegaSpec,
    pub threshold: ThresholdRule,
    /// Re-threshold the outside alphas once with the final residual variances.
    pub rethreshold: bool,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self { k: None, k_max: None, omega: OmegaSpec::Simple, threshold: ThresholdRule::empirical(), rethreshold: false }
    }
}

impl EstimationConfig {
    pub fn with_k(k: usize) -> Self {
        Self { k: Some(k), ..Self::default() }
    }
}

/// Everything produced by [`estimate`].
#[derive(Debug, Clone)]
pub struct Estimation {
    pub transformed: TransformedReturns,
    pub bases: Vec<OrthoBasis>,
    pub omega: OmegaSpec,
    pub outside: OutsideAlphaFit,
    /// Spectral fit; its `sigma2` are the residual variances fed to debiasing.
    pub plain: ModelFit,
    /// Debiased fit; its `sigma2` come from the final residuals.
    pub debiased: ModelFit,
    /// N×T final residuals.
    pub residuals: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    pub r_squared: f64,
}

impl Estimation {
    pub fn k(&self) -> usize {
        self.debiased.k
    }

    pub fn sigma2(&self) -> &[f64] {
        &self.debiased.sigma2
    }
}

pub fn resolve_k(tr: &TransformedReturns, cfg: &EstimationConfig) -> Result<usize> {
    match cfg.k {
        Some(k) => Ok(k),
        None => {
            let k_max = cfg.k_max.unwrap_or_else(|| default_k_max(tr.l(), tr.t()));
            if k_max < 2 {
                return Err(Error::InvalidConfig(format!("automatic K needs k_max ≥ 2, got {k_max}")));
            }
            select_rank(tr, k_max)
        }
    }
}

pub fn estimate(panel: &Panel, cfg: &EstimationConfig) -> Result<Estimation> {
    cfg.threshold.validate()?;
    let tr = transform_returns(panel)?;
    let k = resolve_k(&tr, cfg)?;
    let omega = effective_omega(panel.n(), panel.l(), cfg.omega);
    let bases = build_bases(panel, omega)?;
    let mut outside = fit_outside(panel, &bases, cfg.threshold);

    let spectral = estimate_gamma_plain(&tr, k)?;
    let mut plain = ModelFit::from_gamma(panel, &tr, spectral.gamma, Vec::new(), false)?;
    plain.sigma2 = estimate_sigma2(panel, &plain, &outside.alpha_outside);

    let mut debiased = debias_gamma(panel, &tr, &plain, &plain.sigma2)?;
    let mut resid = residuals(panel, &debiased, &outside.alpha_outside);
    debiased.sigma2 = sigma2_from_residuals(&resid);

    if cfg.rethreshold {
        let sigma: Vec<f64> = debiased.sigma2.iter().map(|s| s.sqrt()).collect();
        outside = threshold_and_refine(&outside.delta_raw, &sigma, cfg.threshold, &bases);
        resid = residuals(panel, &debiased, &outside.alpha_outside);
        debiased.sigma2 = sigma2_from_residuals(&resid);
    }
    let r2 = r_squared(panel, &resid);
    log::info!("fit: N={} T={} L={} K={k} R2={r2:.4}", panel.n(), panel.t(), panel.l());
    Ok(Estimation {
        transformed: tr,
        bases,
        omega,
        outside,
        plain,
        debiased,
        residuals: resid,
        singular_values: spectral.singular_values,
        r_squared: r2,
    })
}

/// The estimated quantities an [`Estimation`] is a deterministic function of,
/// given the panel. Everything else is recomputed by [`restore`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredFit {
    pub omega: OmegaSpec,
    pub gamma_plain: DMatrix<f64>,
    pub sigma2_plain: Vec<f64>,
    pub gamma: DMatrix<f64>,
    pub sigma2: Vec<f64>,
    pub zeta: DVector<f64>,
    pub support: Vec<Vec<usize>>,
    pub rho: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl Estimation {
    pub fn stored(&self) -> StoredFit {
        StoredFit {
            omega: self.omega,
            gamma_plain: self.plain.gamma.clone(),
            sigma2_plain: self.plain.sigma2.clone(),
            gamma: self.debiased.gamma.clone(),
            sigma2: self.debiased.sigma2.clone(),
            zeta: self.outside.zeta.clone(),
            support: self.outside.support.clone(),
            rho: self.outside.rho.clone(),
            sigma: self.outside.sigma.clone(),
        }
    }
}

/// Rebuild the full estimation from its stored parameters.
pub fn restore(panel: &Panel, stored: &StoredFit) -> Result<Estimation> {
    let (l, t, p) = (panel.l(), panel.t(), panel.n() - panel.l());
    let bad = |m: &str| Err(Error::IncompatibleDimensions(format!("stored fit does not match the panel: {m}")));
    if stored.gamma.nrows() != l || stored.gamma_plain.shape() != stored.gamma.shape() {
        return bad("loadings");
    }
    if stored.sigma2.len() != t || stored.sigma2_plain.len() != t || stored.rho.len() != t || stored.sigma.len() != t {
        return bad("per-period vectors");
    }
    if stored.zeta.len() != p || stored.support.len() != t || stored.support.iter().flatten().any(|&q| q >= p) {
        return bad("outside alphas");
    }
    let tr = transform_returns(panel)?;
    let omega = effective_omega(panel.n(), l, stored.omega);
    let bases = build_bases(panel, omega)?;
    let outside = OutsideAlphaFit::from_parts(
        estimate_delta_raw(panel, &bases),
        stored.zeta.clone(),
        stored.support.clone(),
        stored.rho.clone(),
        stored.sigma.clone(),
        &bases,
    );
    let plain = ModelFit::from_gamma(panel, &tr, stored.gamma_plain.clone(), stored.sigma2_plain.clone(), false)?;
    let debiased = ModelFit::from_gamma(panel, &tr, stored.gamma.clone(), stored.sigma2.clone(), true)?;
    let resid = residuals(panel, &debiased, &outside.alpha_outside);
    let r2 = r_squared(panel, &resid);
    let (_, singular_values) = left_singular_sorted(&tr.rddot_demeaned);
    Ok(Estimation {
        transformed: tr,
        bases,
        omega,
        outside,
        plain,
        debiased,
        residuals: resid,
        singular_values,
        r_squared: r2,
    })
}
