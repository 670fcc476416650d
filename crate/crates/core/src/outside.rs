//! Outside alphas: the orthogonal basis `Bᵒ_t`, raw coefficients `δ̃`,
//! hard thresholding of transitory shocks and the refinement of `ζ`.
//!
//! `Bᵒ_t = Xᵒ_t (Xᵒ_tᵀXᵒ_t / N)^{-1/2}` with `Xᵒ_t = (I − P_{X_t}) Ω`.
//! For the simple `Ω = [I; 0]` the basis is never materialised: it differs
//! from `√N Ω` only on an `L`-dimensional subspace, so products with `Bᵒ_t`
//! and `Bᵒ_tᵀ` cost `O(NL)`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{pairwise_sum, spd_inverse_sqrt, SPD_REL_TOL};
use crate::panel::Panel;
use crate::parallel::try_map_indexed;

/// Choice of `Ω` used to build the orthogonal basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OmegaSpec {
    /// `Ω = [I_{N−L}; 0]`.
    #[default]
    Simple,
    /// Banded `[Ψ; Θ]` design with equal column support.
    Structured,
}

/// 9×9 block pattern of the structured design.
pub const PSI_PATTERN: [[f64; 9]; 9] = [
    [1.0, 1.01, 1.0, 1.01, 1.0, 1.01, 0.0, 0.0, 0.0],
    [0.0, 1.0, 1.01, 1.0, 1.01, 1.0, 1.01, 0.0, 0.0],
    [0.0, 0.0, 1.0, 1.01, 1.0, 1.01, 1.0, 1.01, 0.0],
    [0.0, 0.0, 0.0, 1.0, 1.01, 1.0, 1.01, 1.0, 1.01],
    [1.0, 0.0, 0.0, 0.0, 1.0, 1.01, 1.0, 1.01, 1.0],
    [1.01, 1.0, 0.0, 0.0, 0.0, 1.0, 1.01, 1.0, 1.01],
    [1.0, 1.01, 1.0, 0.0, 0.0, 0.0, 1.0, 1.01, 1.0],
    [1.01, 1.0, 1.01, 1.0, 0.0, 0.0, 0.0, 1.0, 1.01],
    [1.0, 1.01, 1.0, 1.01, 1.0, 0.0, 0.0, 0.0, 1.0],
];

/// Dense `Ω` (N×(N−L)).
pub fn build_omega(n: usize, l: usize, spec: OmegaSpec) -> Result<DMatrix<f64>> {
    if n <= l {
        return Err(Error::IncompatibleDimensions(format!("N={n} must exceed L={l}")));
    }
    let p = n - l;
    match spec {
        OmegaSpec::Simple => Ok(DMatrix::from_fn(n, p, |i, j| if i == j { 1.0 } else { 0.0 })),
        OmegaSpec::Structured => {
            if p % 9 != 0 || p < l {
                return Err(Error::IncompatibleDimensions(format!(
                    "structured omega needs N−L divisible by 9 and N−L ≥ L (N−L={p}, L={l})"
                )));
            }
            let block = p / 9;
            let reps = p / l;
            let mut omega = DMatrix::zeros(n, p);
            for (a, row) in PSI_PATTERN.iter().enumerate() {
                for (b, &v) in row.iter().enumerate() {
                    if v != 0.0 {
                        for s in 0..block {
                            omega[(a * block + s, b * block + s)] = v;
                        }
                    }
                }
            }
            for r in 0..reps {
                for j in 0..l {
                    omega[(p + j, r * l + j)] = 1.0;
                }
            }
            Ok(omega)
        }
    }
}

/// `Bᵒ_t` for one period.
#[derive(Debug, Clone)]
pub enum OrthoBasis {
    /// Simple-`Ω` basis in factored form
    /// `√N [I − U(1−s)Uᵀ; −V c Uᵀ]`.
    Implicit {
        /// `(N−L)×L` orthonormal directions touched by `X_t`.
        u: DMatrix<f64>,
        /// `L×L` orthogonal factor acting on the last `L` rows.
        v: DMatrix<f64>,
        /// Sines: singular values of the last `L` rows of `Q`.
        s: DVector<f64>,
        /// Cosines, `√(1 − s²)`.
        c: DVector<f64>,
        /// Leverages `h_ii` of `X_t`.
        leverage: DVector<f64>,
    },
    Dense(DMatrix<f64>),
}

impl OrthoBasis {
    /// Basis for `X_t` under the simple `Ω`.
    ///
    /// With `Q = [Q₁; Q₂]` the thin QR factor of `X_t` and `Q₂ = V diag(s) Wᵀ`,
    /// the cosine-sine structure gives `Q₁W = U diag(c)` and `Bᵒ` is `√N`
    /// times the polar factor of `(I − QQᵀ)Ω`, assembled from `U`, `V`, `s`,
    /// `c` so that it is orthonormal to working precision.
    pub fn simple(x: &DMatrix<f64>, period: usize) -> Result<Self> {
        let (n, l) = x.shape();
        let q = x.clone().qr().q();
        let leverage = DVector::from_iterator(n, q.row_iter().map(|r| r.norm_squared()));
        let svd = q.rows(n - l, l).into_owned().svd(true, true);
        let (Some(v), Some(w_t)) = (svd.u, svd.v_t) else {
            return Err(Error::DegenerateOrthoComplement { period });
        };
        let s = svd.singular_values.map(|x| x.min(1.0));
        if s.iter().any(|&x| x < SPD_REL_TOL) {
            return Err(Error::DegenerateOrthoComplement { period });
        }
        let c = s.map(|x| ((1.0 - x) * (1.0 + x)).sqrt());
        let mut u = q.rows(0, n - l) * w_t.transpose();
        for mut col in u.column_iter_mut() {
            let norm = col.norm();
            if norm > 0.0 {
                col /= norm;
            }
        }
        Ok(OrthoBasis::Implicit { u, v, s, c, leverage })
    }

    /// Basis for `X_t` under an arbitrary full-rank `Ω`, materialised.
    pub fn dense(x: &DMatrix<f64>, omega: &DMatrix<f64>, period: usize) -> Result<Self> {
        let n = x.nrows() as f64;
        let q = x.clone().qr().q();
        let xo = omega - &q * q.tr_mul(omega);
        let gram = xo.tr_mul(&xo) / n;
        let root = spd_inverse_sqrt(&gram, SPD_REL_TOL).ok_or(Error::DegenerateOrthoComplement { period })?;
        Ok(OrthoBasis::Dense(xo * root))
    }

    pub fn n(&self) -> usize {
        match self {
            OrthoBasis::Implicit { leverage, .. } => leverage.len(),
            OrthoBasis::Dense(b) => b.nrows(),
        }
    }

    /// Number of basis columns, `N − L`.
    pub fn dim(&self) -> usize {
        match self {
            OrthoBasis::Implicit { u, .. } => u.nrows(),
            OrthoBasis::Dense(b) => b.ncols(),
        }
    }

    /// `Bᵒ C` for a `(N−L)×m` coefficient matrix.
    pub fn apply_mat(&self, c: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            OrthoBasis::Dense(b) => b * c,
            OrthoBasis::Implicit { u, v, s, c: cos, leverage } => {
                let p = u.nrows();
                let l = v.nrows();
                let coef = u.tr_mul(c);
                let mut out = DMatrix::zeros(p + l, c.ncols());
                let top = c - u * (DMatrix::from_diagonal(&s.map(|x| 1.0 - x)) * &coef);
                out.rows_mut(0, p).copy_from(&top);
                out.rows_mut(p, l).copy_from(&(-(v * (DMatrix::from_diagonal(cos) * &coef))));
                out * (leverage.len() as f64).sqrt()
            }
        }
    }

    /// `Bᵒᵀ R` for an `N×m` matrix.
    pub fn apply_t_mat(&self, r: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            OrthoBasis::Dense(b) => b.tr_mul(r),
            OrthoBasis::Implicit { u, v, s, c, leverage } => {
                let p = u.nrows();
                let r1 = r.rows(0, p);
                let r2 = r.rows(p, v.nrows());
                let inner = DMatrix::from_diagonal(&s.map(|x| 1.0 - x)) * u.tr_mul(&r1)
                    + DMatrix::from_diagonal(c) * v.tr_mul(&r2);
                (r1 - u * inner) * (leverage.len() as f64).sqrt()
            }
        }
    }

    pub fn apply(&self, c: &DVector<f64>) -> DVector<f64> {
        self.apply_mat(&DMatrix::from_column_slice(c.len(), 1, c.as_slice())).column(0).into_owned()
    }

    pub fn apply_t(&self, r: &DVector<f64>) -> DVector<f64> {
        self.apply_t_mat(&DMatrix::from_column_slice(r.len(), 1, r.as_slice())).column(0).into_owned()
    }

    /// Selected columns of `Bᵒ` (N×|cols|).
    pub fn columns(&self, cols: &[usize]) -> DMatrix<f64> {
        match self {
            OrthoBasis::Dense(b) => b.select_columns(cols),
            OrthoBasis::Implicit { .. } => {
                let mut e = DMatrix::zeros(self.dim(), cols.len());
                for (j, &c) in cols.iter().enumerate() {
                    e[(c, j)] = 1.0;
                }
                self.apply_mat(&e)
            }
        }
    }

    /// Squared row norms `‖Bᵒ_{t,i}‖²`.
    pub fn row_norms_sq(&self) -> DVector<f64> {
        match self {
            OrthoBasis::Dense(b) => DVector::from_iterator(b.nrows(), b.row_iter().map(|r| r.norm_squared())),
            OrthoBasis::Implicit { leverage, .. } => {
                let n = leverage.len() as f64;
                leverage.map(|h| n * (1.0 - h))
            }
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            OrthoBasis::Dense(b) => b.clone(),
            OrthoBasis::Implicit { .. } => self.apply_mat(&DMatrix::identity(self.dim(), self.dim())),
        }
    }
}

/// Effective `Ω` choice for a panel: structured falls back to simple when the
/// block pattern does not tile `N − L`.
pub fn effective_omega(n: usize, l: usize, spec: OmegaSpec) -> OmegaSpec {
    if spec == OmegaSpec::Structured && build_omega(n, l, spec).is_err() {
        log::warn!("structured omega unavailable for N−L={}, L={l}; using simple omega", n - l);
        return OmegaSpec::Simple;
    }
    spec
}

/// One basis per period.
pub fn build_bases(panel: &Panel, spec: OmegaSpec) -> Result<Vec<OrthoBasis>> {
    match effective_omega(panel.n(), panel.l(), spec) {
        OmegaSpec::Simple => try_map_indexed(panel.t(), |t| OrthoBasis::simple(panel.x(t), t)),
        OmegaSpec::Structured => {
            let omega = build_omega(panel.n(), panel.l(), OmegaSpec::Structured)?;
            try_map_indexed(panel.t(), |t| OrthoBasis::dense(panel.x(t), &omega, t))
        }
    }
}

/// `δ̃_{o,t} = N⁻¹ Bᵒ_tᵀ R_{t+1}`, one column per period.
pub fn estimate_delta_raw(panel: &Panel, bases: &[OrthoBasis]) -> DMatrix<f64> {
    let n = panel.n() as f64;
    let cols = crate::parallel::map_indexed(panel.t(), |t| bases[t].apply_t(&panel.r(t)) / n);
    DMatrix::from_columns(&cols)
}

/// Threshold `ρ_t` for the transitory shocks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdRule {
    /// `ρ_t = c σ̂_t (log NT)^κ / √N`.
    Scaled { c: f64, kappa: f64 },
    /// The same `ρ` in every period.
    Fixed(f64),
}

impl ThresholdRule {
    pub const fn empirical() -> Self {
        ThresholdRule::Scaled { c: 1.0, kappa: 0.6 }
    }

    pub const fn simulation() -> Self {
        ThresholdRule::Scaled { c: 1.5, kappa: 0.5 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            ThresholdRule::Scaled { c, kappa } => c > 0.0 && kappa > 0.0 && c.is_finite() && kappa.is_finite(),
            ThresholdRule::Fixed(r) => r >= 0.0 && r.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid threshold rule {self:?}")))
        }
    }

    pub fn rho(&self, sigma: f64, n: usize, t: usize) -> f64 {
        match *self {
            ThresholdRule::Scaled { c, kappa } => c * sigma * ((n * t) as f64).ln().powf(kappa) / (n as f64).sqrt(),
            ThresholdRule::Fixed(r) => r,
        }
    }
}

impl Default for ThresholdRule {
    fn default() -> Self {
        Self::empirical()
    }
}

const MAD_SCALE: f64 = 1.482_602_218_505_602;

/// Robust per-period noise scale from `δ̃`: off the shock support each
/// `δ̃_{t,q} − ζ̃_q` has standard deviation `σ_t √((1 − 1/T)/N)`, so
/// `σ̂_t = 1.4826 · median_q |δ̃_{t,q} − ζ̃_q| · √(N/(1 − 1/T))`.
pub fn preliminary_sigma(delta_raw: &DMatrix<f64>, n: usize) -> Vec<f64> {
    let zeta = crate::factor::row_means(delta_raw);
    let t_len = delta_raw.ncols() as f64;
    let scale = MAD_SCALE * (n as f64 / (1.0 - 1.0 / t_len)).sqrt();
    (0..delta_raw.ncols())
        .map(|t| {
            let mut dev: Vec<f64> = delta_raw.column(t).iter().zip(zeta.iter()).map(|(d, z)| (d - z).abs()).collect();
            dev.sort_by(f64::total_cmp);
            let m = dev.len();
            let median = if m % 2 == 1 { dev[m / 2] } else { 0.5 * (dev[m / 2 - 1] + dev[m / 2]) };
            scale * median
        })
        .collect()
}

/// Thresholded and refined outside-alpha fit.
#[derive(Debug, Clone)]
pub struct OutsideAlphaFit {
    /// (N−L)×T raw coefficients `δ̃`.
    pub delta_raw: DMatrix<f64>,
    /// `ζ̃`, time mean of `δ̃`.
    pub zeta_plain: DVector<f64>,
    /// (N−L)×T refined shocks `ξ̂`.
    pub xi: DMatrix<f64>,
    /// Refined `ζ̂`.
    pub zeta: DVector<f64>,
    /// Per-period support of `ξ̂`.
    pub support: Vec<Vec<usize>>,
    pub rho: Vec<f64>,
    /// Noise scale that produced `rho`.
    pub sigma: Vec<f64>,
    /// N×T outside alphas `Bᵒ_t(ζ̂ + ξ̂_t)`.
    pub alpha_outside: DMatrix<f64>,
}

impl OutsideAlphaFit {
    /// `ζ̂ + ξ̂_t` for every period.
    pub fn delta_hat(&self) -> DMatrix<f64> {
        let mut d = self.xi.clone();
        for mut col in d.column_iter_mut() {
            col += &self.zeta;
        }
        d
    }
}

pub fn threshold_and_refine(
    delta_raw: &DMatrix<f64>,
    sigma: &[f64],
    rule: ThresholdRule,
    bases: &[OrthoBasis],
) -> OutsideAlphaFit {
    let (p, t_len) = delta_raw.shape();
    let n = bases.first().map_or(p, OrthoBasis::n);
    let zeta_plain = crate::factor::row_means(delta_raw);
    let rho: Vec<f64> = sigma.iter().map(|&s| rule.rho(s, n, t_len)).collect();

    let mut xi_tilde = DMatrix::zeros(p, t_len);
    let mut support = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut set = Vec::new();
        for q in 0..p {
            let dev = delta_raw[(q, t)] - zeta_plain[q];
            if dev.abs() >= rho[t] && dev != 0.0 {
                xi_tilde[(q, t)] = dev;
                set.push(q);
            }
        }
        support.push(set);
    }
    let zeta = &zeta_plain - crate::factor::row_means(&xi_tilde);
    OutsideAlphaFit::from_parts(delta_raw.clone(), zeta, support, rho, sigma.to_vec(), bases)
}

impl OutsideAlphaFit {
    /// Assemble a fit from `δ̃`, the refined `ζ̂` and the supports:
    /// `ξ̂_{t,q} = δ̃_{t,q} − ζ̂_q` on the support and `α̂_O = Bᵒ_t(ζ̂ + ξ̂_t)`.
    pub fn from_parts(
        delta_raw: DMatrix<f64>,
        zeta: DVector<f64>,
        support: Vec<Vec<usize>>,
        rho: Vec<f64>,
        sigma: Vec<f64>,
        bases: &[OrthoBasis],
    ) -> Self {
        let (p, t_len) = delta_raw.shape();
        let n = bases.first().map_or(p, OrthoBasis::n);
        let zeta_plain = crate::factor::row_means(&delta_raw);
        let mut xi = DMatrix::zeros(p, t_len);
        for (t, set) in support.iter().enumerate() {
            for &q in set {
                xi[(q, t)] = delta_raw[(q, t)] - zeta[q];
            }
        }
        let mut fit = OutsideAlphaFit {
            delta_raw,
            zeta_plain,
            xi,
            zeta,
            support,
            rho,
            sigma,
            alpha_outside: DMatrix::zeros(n, t_len),
        };
        let delta_hat = fit.delta_hat();
        let cols = crate::parallel::map_indexed(t_len, |t| bases[t].apply(&delta_hat.column(t).into_owned()));
        fit.alpha_outside = DMatrix::from_columns(&cols);
        fit
    }
}

/// Step-5 fit with the robust preliminary noise scale.
pub fn fit_outside(panel: &Panel, bases: &[OrthoBasis], rule: ThresholdRule) -> OutsideAlphaFit {
    let delta_raw = estimate_delta_raw(panel, bases);
    let sigma = preliminary_sigma(&delta_raw, panel.n());
    threshold_and_refine(&delta_raw, &sigma, rule, bases)
}

/// JSON view: `ζ̂`, `ζ̃`, `ρ` and supports keyed by period label.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutsideFitSummary {
    pub zeta: Vec<f64>,
    pub zeta_plain: Vec<f64>,
    pub rho: Vec<f64>,
    pub sigma: Vec<f64>,
    pub support: BTreeMap<String, Vec<usize>>,
    pub support_size: usize,
}

impl OutsideAlphaFit {
    pub fn summary(&self, period_labels: &[String]) -> OutsideFitSummary {
        OutsideFitSummary {
            zeta: self.zeta.iter().copied().collect(),
            zeta_plain: self.zeta_plain.iter().copied().collect(),
            rho: self.rho.clone(),
            sigma: self.sigma.clone(),
            support: period_labels
                .iter()
                .zip(&self.support)
                .filter(|(_, s)| !s.is_empty())
                .map(|(l, s)| (l.clone(), s.clone()))
                .collect(),
            support_size: self.support.iter().map(Vec::len).sum(),
        }
    }

    /// Mean of the threshold noise scales, squared.
    pub fn mean_sigma2(&self) -> f64 {
        let s: Vec<f64> = self.sigma.iter().map(|v| v * v).collect();
        pairwise_sum(&s) / s.len().max(1) as f64
    }
}
