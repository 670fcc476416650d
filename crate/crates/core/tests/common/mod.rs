//! Dense reference implementations written straight from the estimator
//! definitions, plus random small instances to feed them.

#![allow(dead_code)]

use charfactor::outside::OmegaSpec;
use charfactor::simlab::{generate_panel, DgpConfig, Truth, XiDesign};
use charfactor::Panel;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Max-norm relative error of `a` against the reference `b`.
pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let scale = b.amax();
    let diff = (a - b).amax();
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

pub fn rel_err_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    rel_err(&DMatrix::from_column_slice(a.len(), 1, a.as_slice()), &DMatrix::from_column_slice(b.len(), 1, b.as_slice()))
}

/// Small design with strong factors, a few spikes and moderate noise.
pub fn small_config(seed: u64) -> DgpConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(24..=50);
    let t = rng.random_range(10..=20);
    let l = rng.random_range(3..=6);
    let k = rng.random_range(1..=2.min(l - 1));
    let p = n - l;
    let gamma = DMatrix::from_fn(l, k, |_, _| gauss(&mut rng));
    let eta = DVector::from_fn(l, |_, _| 0.3 * gauss(&mut rng));
    let zeta = DVector::from_fn(p, |q, _| if q % 4 == 0 { 0.2 * gauss(&mut rng) } else { 0.0 });
    let sds = [1.0, 0.6];
    DgpConfig {
        n,
        t,
        l,
        k,
        gamma,
        eta,
        char_cov: DMatrix::identity(l - 1, l - 1),
        factor_mean: DVector::from_fn(k, |i, _| 0.3 * sds[i]),
        factor_cov: DMatrix::from_fn(k, k, |i, j| if i == j { sds[i] * sds[i] } else { 0.0 }),
        zeta,
        xi: Some(XiDesign {
            active_periods: t / 3,
            spikes_per_period: 2,
            center: 3.0,
            halfwidth: 0.5,
            last_period_active: true,
            balanced: false,
        }),
        noise_sigma: (0..t).map(|s| 0.4 + 0.02 * s as f64).collect(),
        omega: OmegaSpec::Simple,
        seed,
    }
    .validated()
    .unwrap()
}

pub fn small_instance(seed: u64) -> (Panel, Truth, DgpConfig) {
    let cfg = small_config(seed);
    let (panel, truth) = generate_panel(&cfg, 0).unwrap();
    (panel, truth, cfg)
}

fn spd_inv(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone().cholesky().expect("positive definite").inverse()
}

fn proj(b: &DMatrix<f64>) -> DMatrix<f64> {
    b * spd_inv(&b.tr_mul(b)) * b.transpose()
}

/// `Bᵒ = Xᵒ (XᵒᵀXᵒ/N)^{-1/2}`, `Xᵒ = (I − P_X) Ω`, via an eigendecomposition.
pub fn oracle_basis(x: &DMatrix<f64>, omega: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let xo = (DMatrix::identity(n, n) - proj(x)) * omega;
    let g = xo.tr_mul(&xo) / n as f64;
    let eig = g.symmetric_eigen();
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v.sqrt()));
    xo * (&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

pub fn simple_omega(n: usize, l: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n - l, |i, j| if i == j { 1.0 } else { 0.0 })
}

fn time_mean(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(m.nrows(), |i, _| m.row(i).iter().sum::<f64>() / m.ncols() as f64)
}

fn demean(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mu = time_mean(m);
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] - mu[i])
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = v.len();
    if m % 2 == 1 {
        v[m / 2]
    } else {
        (v[m / 2 - 1] + v[m / 2]) / 2.0
    }
}

/// Loadings-dependent part of the fit.
#[derive(Debug, Clone)]
pub struct OracleModel {
    pub gamma: DMatrix<f64>,
    pub factors_demeaned: DMatrix<f64>,
    pub eta: DVector<f64>,
    pub alpha_inside: DMatrix<f64>,
    pub factors_breve: DMatrix<f64>,
    pub sigma2: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct OracleFit {
    pub bases: Vec<DMatrix<f64>>,
    pub rddot: DMatrix<f64>,
    pub delta_raw: DMatrix<f64>,
    pub sigma_pre: Vec<f64>,
    pub support: Vec<Vec<usize>>,
    pub zeta: DVector<f64>,
    pub xi: DMatrix<f64>,
    pub alpha_outside: DMatrix<f64>,
    pub plain: OracleModel,
    pub debiased: OracleModel,
    pub gamma_row_cov: Vec<DMatrix<f64>>,
    pub v_inside: DMatrix<f64>,
    pub v_delta: DMatrix<f64>,
    pub v_outside: DMatrix<f64>,
}

fn model(panel: &Panel, rddot: &DMatrix<f64>, gamma: DMatrix<f64>) -> OracleModel {
    let (n, t_len) = (panel.n(), panel.t());
    let l = panel.l();
    let rbar = time_mean(rddot);
    let gtg_inv = spd_inv(&gamma.tr_mul(&gamma));
    let factors_demeaned = &gtg_inv * gamma.transpose() * demean(rddot);
    let eta = (DMatrix::identity(l, l) - proj(&gamma)) * &rbar;
    let mut alpha_inside = DMatrix::zeros(n, t_len);
    let mut factors_breve = DMatrix::zeros(gamma.ncols(), t_len);
    for t in 0..t_len {
        let x = panel.x(t);
        let b = x * &gamma;
        let a = (DMatrix::identity(n, n) - proj(&b)) * x * &rbar;
        alpha_inside.set_column(t, &a);
        let xtx = x.transpose() * x;
        let f = &gtg_inv * gamma.transpose() * rddot.column(t)
            + spd_inv(&(gamma.transpose() * &xtx * &gamma)) * gamma.transpose() * &xtx * &eta;
        factors_breve.set_column(t, &f);
    }
    OracleModel { gamma, factors_demeaned, eta, alpha_inside, factors_breve, sigma2: Vec::new() }
}

fn residual_sigma2(panel: &Panel, m: &OracleModel, alpha_outside: &DMatrix<f64>) -> Vec<f64> {
    (0..panel.t())
        .map(|t| {
            let fitted = alpha_outside.column(t) + m.alpha_inside.column(t)
                + panel.x(t) * (&m.gamma * m.factors_breve.column(t));
            let e = panel.r(t) - fitted;
            e.norm_squared() / panel.n() as f64
        })
        .collect()
}

/// Full estimation with the simple `Ω` and a scaled threshold
/// `ρ_t = c σ̂_t (log NT)^κ / √N`.
pub fn oracle_fit(panel: &Panel, k: usize, c: f64, kappa: f64) -> OracleFit {
    let (n, t_len, l) = (panel.n(), panel.t(), panel.l());
    let p = n - l;
    let nf = n as f64;
    let omega = simple_omega(n, l);
    let bases: Vec<DMatrix<f64>> = (0..t_len).map(|t| oracle_basis(panel.x(t), &omega)).collect();

    let mut rddot = DMatrix::zeros(l, t_len);
    let mut delta_raw = DMatrix::zeros(p, t_len);
    for t in 0..t_len {
        let x = panel.x(t);
        let r = panel.r(t);
        let xtx = x.transpose() * x;
        rddot.set_column(t, &xtx.cholesky().unwrap().solve(&(x.transpose() * &r)));
        delta_raw.set_column(t, &(bases[t].transpose() * &r / nf));
    }

    let zeta_plain = time_mean(&delta_raw);
    let tf = t_len as f64;
    let sigma_pre: Vec<f64> = (0..t_len)
        .map(|t| {
            let dev: Vec<f64> = (0..p).map(|q| (delta_raw[(q, t)] - zeta_plain[q]).abs()).collect();
            1.482602218505602 * median(dev) * (nf / (1.0 - 1.0 / tf)).sqrt()
        })
        .collect();
    let log_nt = ((n * t_len) as f64).ln();
    let mut support = vec![Vec::new(); t_len];
    let mut xi_tilde = DMatrix::zeros(p, t_len);
    for t in 0..t_len {
        let rho = c * sigma_pre[t] * log_nt.powf(kappa) / nf.sqrt();
        for q in 0..p {
            let dev = delta_raw[(q, t)] - zeta_plain[q];
            if dev.abs() >= rho && dev != 0.0 {
                support[t].push(q);
                xi_tilde[(q, t)] = dev;
            }
        }
    }
    let zeta = &zeta_plain - time_mean(&xi_tilde);
    let mut xi = DMatrix::zeros(p, t_len);
    let mut alpha_outside = DMatrix::zeros(n, t_len);
    for t in 0..t_len {
        for &q in &support[t] {
            xi[(q, t)] = delta_raw[(q, t)] - zeta[q];
        }
        alpha_outside.set_column(t, &(&bases[t] * (&zeta + xi.column(t))));
    }

    let rd = demean(&rddot);
    let eig = (&rd * rd.transpose()).symmetric_eigen();
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let mut gamma_plain = DMatrix::zeros(l, k);
    for (j, &o) in order.iter().take(k).enumerate() {
        let mut v = eig.eigenvectors.column(o).into_owned();
        let big = v.iter().copied().fold(0.0_f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if big < 0.0 {
            v = -v;
        }
        gamma_plain.set_column(j, &v);
    }
    let mut plain = model(panel, &rddot, gamma_plain);
    plain.sigma2 = residual_sigma2(panel, &plain, &alpha_outside);

    let mut noise = DMatrix::zeros(l, l);
    for t in 0..t_len {
        let x = panel.x(t);
        noise += spd_inv(&(x.transpose() * x)) * plain.sigma2[t];
    }
    let fd = &plain.factors_demeaned;
    let correction =
        noise * &plain.gamma * spd_inv(&plain.gamma.tr_mul(&plain.gamma)) * spd_inv(&(fd * fd.transpose()));
    let mut debiased = model(panel, &rddot, &plain.gamma - correction);
    debiased.sigma2 = residual_sigma2(panel, &debiased, &alpha_outside);

    let s2 = &debiased.sigma2;
    let fd = &debiased.factors_demeaned;
    let qf_inv = spd_inv(&(fd * fd.transpose() / tf));
    let q: Vec<DMatrix<f64>> = (0..t_len).map(|t| panel.x(t).transpose() * panel.x(t) / nf).collect();
    let gamma_row_cov = (0..l)
        .map(|j| {
            let mut mid = DMatrix::zeros(k, k);
            for t in 0..t_len {
                let qinv = spd_inv(&q[t]);
                mid += fd.column(t) * fd.column(t).transpose() * (s2[t] * qinv[(j, j)]);
            }
            &qf_inv * (mid / tf) * &qf_inv
        })
        .collect();

    let g = &debiased.gamma;
    let eta = &debiased.eta;
    let f_bar = spd_inv(&g.tr_mul(g)) * g.transpose() * time_mean(&rddot);
    let mut v_inside = DMatrix::zeros(n, t_len);
    for t in 0..t_len {
        let gqg_inv = spd_inv(&(g.transpose() * &q[t] * g));
        let qinv = spd_inv(&q[t]);
        let x = panel.x(t);
        for i in 0..n {
            let xi_row = x.row(i).into_owned();
            let a_row = &xi_row * &qinv - &xi_row * g * &gqg_inv * g.transpose();
            let b_row = eta.transpose() - eta.transpose() * &q[t] * g * &gqg_inv * g.transpose();
            let mut acc = 0.0;
            for s in 0..t_len {
                let fs = &qf_inv * fd.column(s);
                let a_s = 1.0 - (((eta.transpose() * &q[t] * g * &gqg_inv) + f_bar.transpose()) * &fs)[(0, 0)];
                let b_s = &xi_row * g * &gqg_inv * &fs;
                let gvec = &a_row * a_s - &b_row * b_s[(0, 0)];
                acc += s2[s] * (&gvec * &q[s] * gvec.transpose())[(0, 0)];
            }
            let sigma_i = acc / (tf * l as f64);
            v_inside[(i, t)] = sigma_i * l as f64 / (nf * tf);
        }
    }

    let v_delta = DMatrix::from_fn(p, t_len, |_, t| s2[t] / nf);
    let s_bar = s2.iter().sum::<f64>() / tf;
    let v_outside = DMatrix::from_fn(n, t_len, |i, t| {
        let b = &bases[t];
        let row = b.row(i);
        let on_support: f64 = support[t].iter().map(|&q| b[(i, q)] * b[(i, q)]).sum();
        s_bar / tf * row.norm_squared() / nf + s2[t] * on_support / nf
    });

    OracleFit {
        bases,
        rddot,
        delta_raw,
        sigma_pre,
        support,
        zeta,
        xi,
        alpha_outside,
        plain,
        debiased,
        gamma_row_cov,
        v_inside,
        v_delta,
        v_outside,
    }
}

fn vcol(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v)
}

/// Library fit against the oracle on one instance: `(quantity, relative error)`
/// plus whether the thresholded supports agree.
pub fn oracle_discrepancies(seed: u64) -> (Vec<(&'static str, f64)>, bool) {
    use charfactor::inference::VarianceEstimates;
    use charfactor::{estimate, EstimationConfig, ThresholdRule};

    let (panel, _, cfg) = small_instance(seed);
    let (c, kappa) = (1.5, 0.5);
    let est_cfg = EstimationConfig {
        k: Some(cfg.k),
        threshold: ThresholdRule::Scaled { c, kappa },
        ..EstimationConfig::default()
    };
    let est = estimate(&panel, &est_cfg).unwrap();
    let var = VarianceEstimates::compute(&panel, &est).unwrap();
    let o = oracle_fit(&panel, cfg.k, c, kappa);

    let basis_err = (0..panel.t())
        .map(|t| rel_err(&est.bases[t].to_dense(), &o.bases[t]))
        .fold(0.0, f64::max);
    let row_cov_err = (0..panel.l())
        .map(|j| rel_err(&var.gamma_row_cov[j], &o.gamma_row_cov[j]))
        .fold(0.0, f64::max);
    let errs = vec![
        ("basis", basis_err),
        ("rddot", rel_err(&est.transformed.rddot, &o.rddot)),
        ("delta_raw", rel_err(&est.outside.delta_raw, &o.delta_raw)),
        ("sigma_pre", rel_err(&vcol(&est.outside.sigma), &vcol(&o.sigma_pre))),
        ("zeta", rel_err_vec(&est.outside.zeta, &o.zeta)),
        ("xi", rel_err(&est.outside.xi, &o.xi)),
        ("alpha_outside", rel_err(&est.outside.alpha_outside, &o.alpha_outside)),
        ("gamma_plain", rel_err(&est.plain.gamma, &o.plain.gamma)),
        ("eta_plain", rel_err_vec(&est.plain.eta, &o.plain.eta)),
        ("alpha_inside_plain", rel_err(&est.plain.alpha_inside, &o.plain.alpha_inside)),
        ("sigma2_plain", rel_err(&vcol(&est.plain.sigma2), &vcol(&o.plain.sigma2))),
        ("gamma_debiased", rel_err(&est.debiased.gamma, &o.debiased.gamma)),
        ("eta", rel_err_vec(&est.debiased.eta, &o.debiased.eta)),
        ("alpha_inside", rel_err(&est.debiased.alpha_inside, &o.debiased.alpha_inside)),
        ("factors_breve", rel_err(&est.debiased.factors_breve, &o.debiased.factors_breve)),
        ("sigma2", rel_err(&vcol(&est.debiased.sigma2), &vcol(&o.debiased.sigma2))),
        ("gamma_row_cov", row_cov_err),
        ("v_inside", rel_err(&var.v_inside, &o.v_inside)),
        ("v_delta", rel_err(&var.v_delta, &o.v_delta)),
        ("v_outside", rel_err(&var.v_outside, &o.v_outside)),
    ];
    (errs, est.outside.support == o.support)
}
