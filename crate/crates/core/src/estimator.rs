//! Constructed instruments, the closed-form linear ICM estimator, its
//! sandwich covariance, t-tests and identification diagnostics.
//!
//! Every estimator here is an exactly identified IV regression
//! `theta = (E_n[h'X])^-1 E_n[h'y]`; only the instrument rows `h_i` differ.
//! For a kernel `K` they are `h_i = (1/(n-1)) sum_j k_ij X_j`, and for TSLS
//! they are the first-stage fitted values.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::error::{IcmError, Result};
use crate::kernels::{distance_matrix, kernel_matrix, KernelMatrix, KernelSpec};
use crate::mdd::gmdc;
use crate::stats::{norm_cdf, norm_quantile};

/// Refuse to invert `E_n[h'X]` beyond this condition number.
pub const MAX_CONDITION: f64 = 1e12;

/// Relative singular-value cutoff for numerical rank.
pub const RANK_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    Icm(KernelSpec),
    Tsls,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Icm(k) => k.name(),
            Method::Tsls => "tsls",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = IcmError;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("tsls") {
            Ok(Method::Tsls)
        } else {
            s.parse().map(Method::Icm)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstrumentMatrix {
    /// `n x p_x`; row `i` is `h_n(Z_i)`.
    pub h: DMatrix<f64>,
    pub kernel: KernelSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateResult {
    pub theta: DVector<f64>,
    /// `-E_n[h_n(Z_i)'X_i]`.
    pub a_hat: DMatrix<f64>,
    /// `E_n[U_i^2 h_n(Z_i)'h_n(Z_i)]`.
    pub b_hat: DMatrix<f64>,
    /// `A^-1 B A^-1 / n`.
    pub vcov: DMatrix<f64>,
    pub se: DVector<f64>,
    pub residuals: DVector<f64>,
    pub method: Method,
    pub cond_a: f64,
}

/// `h_i = (1/(n-1)) sum_j k_ij X_j`, with `k_ij = ||Z_i - Z_j||` for MMD and
/// `k_ij = K_ij` otherwise. The global sign of `k` cancels in the estimator.
pub fn build_instruments(ds: &Dataset, k: &KernelMatrix) -> Result<InstrumentMatrix> {
    let n = ds.n();
    if k.n() != n {
        return Err(IcmError::Argument(format!(
            "kernel has {} rows but the dataset has {n}",
            k.n()
        )));
    }
    let weights = match k.spec {
        KernelSpec::Mmd => -&k.values,
        _ => k.values.clone(),
    };
    let h = weights * ds.x() / (n as f64 - 1.0);
    Ok(InstrumentMatrix { h, kernel: k.spec })
}

/// `[y, X]`, the auxiliary matrix the WMD scaling needs.
pub(crate) fn outcome_design(y: &DVector<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut aux = DMatrix::zeros(x.nrows(), x.ncols() + 1);
    aux.set_column(0, y);
    aux.columns_mut(1, x.ncols()).copy_from(x);
    aux
}

pub fn kernel_for(ds: &Dataset, spec: KernelSpec) -> Result<KernelMatrix> {
    match spec {
        KernelSpec::Wmd { .. } => {
            let aux = outcome_design(ds.y(), ds.x());
            kernel_matrix(ds.z(), spec, Some(&aux))
        }
        _ => kernel_matrix(ds.z(), spec, None),
    }
}

/// Singular values of a square matrix, largest first.
fn singular_values(m: &DMatrix<f64>) -> DVector<f64> {
    let mut sv = m.clone().svd(false, false).singular_values;
    sv.as_mut_slice().sort_by(|a, b| b.total_cmp(a));
    sv
}

pub(crate) fn numerical_rank(m: &DMatrix<f64>) -> usize {
    let sv = singular_values(m);
    let top = sv.iter().copied().fold(0.0, f64::max);
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_TOL * top).count()
}

/// A conditioned `E_n[h'X]` factorization, reusable for many outcomes.
#[derive(Debug, Clone)]
pub(crate) struct IvSystem {
    hx: DMatrix<f64>,
    qr: nalgebra::linalg::ColPivQR<f64, nalgebra::Dyn, nalgebra::Dyn>,
    cond: f64,
}

impl IvSystem {
    pub(crate) fn new(h: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<Self> {
        let n = x.nrows() as f64;
        let hx = h.transpose() * x / n;
        let sv = singular_values(&hx);
        let top = sv[0];
        let bottom = sv[sv.len() - 1];
        let cond = if bottom > 0.0 { top / bottom } else { f64::INFINITY };
        if !(cond.is_finite() && cond < MAX_CONDITION) || !top.is_finite() {
            return Err(IcmError::Identification {
                cond,
                min_singular: bottom,
            });
        }
        let qr = hx.clone().col_piv_qr();
        Ok(IvSystem { hx, qr, cond })
    }

    pub(crate) fn solve(&self, h: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
        let hy = h.transpose() * y / y.len() as f64;
        self.qr.solve(&hy).ok_or(IcmError::Identification {
            cond: self.cond,
            min_singular: 0.0,
        })
    }
}

/// Exactly identified IV fit with heteroskedasticity-robust sandwich.
pub(crate) fn fit_iv(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    h: &DMatrix<f64>,
    method: Method,
) -> Result<EstimateResult> {
    let sys = IvSystem::new(h, x)?;
    let theta = sys.solve(h, y)?;
    let residuals = y - x * &theta;
    let n = y.len() as f64;

    let mut hu = h.clone();
    for (mut row, u) in hu.row_iter_mut().zip(residuals.iter()) {
        row *= *u;
    }
    let b_hat = hu.transpose() * &hu / n;
    let hx_inv = sys.qr.try_inverse().ok_or(IcmError::Identification {
        cond: sys.cond,
        min_singular: 0.0,
    })?;
    let v = &hx_inv * &b_hat * hx_inv.transpose() / n;
    let vcov = (&v + v.transpose()) * 0.5;
    let se = vcov.diagonal().map(|d| d.max(0.0).sqrt());

    Ok(EstimateResult {
        theta,
        a_hat: -sys.hx,
        b_hat,
        vcov,
        se,
        residuals,
        method,
        cond_a: sys.cond,
    })
}

/// Linear ICM estimate of `theta` with the sandwich covariance.
pub fn estimate(ds: &Dataset, spec: KernelSpec) -> Result<EstimateResult> {
    let k = kernel_for(ds, spec)?;
    let inst = build_instruments(ds, &k)?;
    fit_iv(ds.y(), ds.x(), &inst.h, Method::Icm(spec))
}

/// Two-stage least squares with instruments `[exogenous X, Z]`.
///
/// Instrument columns that duplicate an earlier one exactly (an instrument
/// that is also an exogenous covariate) are counted once.
pub fn tsls_estimate(ds: &Dataset) -> Result<EstimateResult> {
    let w = tsls_instruments(ds);
    let px = ds.px();
    if w.ncols() < px {
        return Err(IcmError::Infeasible(format!(
            "order condition fails: {} distinct instruments for {px} coefficients",
            w.ncols()
        )));
    }
    if numerical_rank(&(w.transpose() * &w)) < w.ncols() {
        return Err(IcmError::Infeasible("instrument matrix is rank deficient".into()));
    }
    let qr = w.clone().qr();
    let q = qr.q();
    let fitted = &q * (q.transpose() * ds.x());
    fit_iv(ds.y(), ds.x(), &fitted, Method::Tsls)
}

fn push_unique(cols: &mut Vec<DVector<f64>>, c: DVector<f64>) {
    if !cols.contains(&c) {
        cols.push(c);
    }
}

pub(crate) fn tsls_instruments(ds: &Dataset) -> DMatrix<f64> {
    let mut cols: Vec<DVector<f64>> = Vec::new();
    for (j, &endog) in ds.endog_mask().iter().enumerate() {
        if !endog {
            push_unique(&mut cols, ds.x().column(j).into_owned());
        }
    }
    for j in 0..ds.pz() {
        push_unique(&mut cols, ds.z().column(j).into_owned());
    }
    DMatrix::from_columns(&cols)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub pvalue: f64,
    pub reject: bool,
}

/// Two-sided asymptotic t-test of `theta_k = theta0`.
///
/// Rejects iff `|t|` strictly exceeds the normal critical value.
pub fn t_test(res: &EstimateResult, k: usize, theta0: f64, level: f64) -> Result<TTest> {
    if !(level > 0.0 && level < 1.0) {
        return Err(IcmError::Argument(format!("level {level} outside (0, 1)")));
    }
    if k >= res.theta.len() {
        return Err(IcmError::Argument(format!(
            "coefficient index {k} out of range for {} coefficients",
            res.theta.len()
        )));
    }
    let se = res.se[k];
    if !(se > 0.0) {
        return Err(IcmError::Degenerate(format!("standard error of coefficient {k} is zero")));
    }
    let t = (res.theta[k] - theta0) / se;
    let pvalue = (2.0 * norm_cdf(-t.abs())).min(1.0);
    let crit = norm_quantile(1.0 - level / 2.0);
    Ok(TTest {
        t,
        pvalue,
        reject: t.abs() > crit,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentificationReport {
    /// Smallest eigenvalue of the centered kernel-weighted Gram matrix of the
    /// non-intercept covariates.
    pub min_eig: f64,
    /// Unit eigenvector for `min_eig`.
    pub tau_star: DVector<f64>,
    /// `gmdc(X_-1 tau*, K)`; `None` when that combination is constant.
    pub gmdc_strength: Option<f64>,
    pub rank_h: usize,
    /// Rank of `E_n[[1, Z]'X]`.
    pub rank_z: usize,
}

/// Weak-identification diagnostics. Nothing here fails on weak
/// identification; it is reported through the returned numbers.
pub fn identification_diagnostics(ds: &Dataset, spec: KernelSpec) -> Result<IdentificationReport> {
    let px = ds.px();
    if px < 2 {
        return Err(IcmError::Argument(
            "identification diagnostics need at least one non-intercept covariate".into(),
        ));
    }
    let n = ds.n();
    let nf = n as f64;
    let k = kernel_for(ds, spec)?;

    let mut xc = ds.x().columns(1, px - 1).into_owned();
    let means = xc.row_mean();
    for mut r in xc.row_iter_mut() {
        r -= &means;
    }
    let m = xc.transpose() * &k.values * &xc / (nf * nf);
    let m = (&m + m.transpose()) * 0.5;
    let eig = m.symmetric_eigen();
    let (imin, min_eig) = eig
        .eigenvalues
        .iter()
        .copied()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("at least one eigenvalue");
    let tau_star = eig.eigenvectors.column(imin).into_owned();
    let combo = &xc * &tau_star;
    let gmdc_strength = gmdc(&combo, &k).ok();

    let inst = build_instruments(ds, &k)?;
    let rank_h = numerical_rank(&(inst.h.transpose() * ds.x() / nf));
    let mut z1 = DMatrix::from_element(n, ds.pz() + 1, 1.0);
    z1.columns_mut(1, ds.pz()).copy_from(ds.z());
    let rank_z = numerical_rank(&(z1.transpose() * ds.x() / nf));

    Ok(IdentificationReport {
        min_eig,
        tau_star,
        gmdc_strength,
        rank_h,
        rank_z,
    })
}

/// `Q_n(theta) = -E_n[||Z_i - Z_j|| (Y_i - X_i theta)(Y_j - X_j theta)]`.
pub fn objective_qn(ds: &Dataset, theta: &DVector<f64>) -> f64 {
    let d = distance_matrix(ds.z());
    objective_with(&d, ds, theta)
}

fn objective_with(d: &DMatrix<f64>, ds: &Dataset, theta: &DVector<f64>) -> f64 {
    let r = ds.y() - ds.x() * theta;
    let n = ds.n() as f64;
    -(d * &r).dot(&r) / (n * n)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleConfig {
    pub max_evals: usize,
    /// Simplex diameter at which the search stops.
    pub xtol: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            max_evals: 200_000,
            xtol: 1e-11,
        }
    }
}

/// Direct numerical optimization of `Q_n` for small problems.
///
/// `Q_n` is concave along the intercept (the distance matrix has a single
/// positive eigenvalue) and convex in the slopes once the intercept is
/// profiled out, so its stationary point is a saddle. The oracle maximizes
/// over the intercept by exact parabola through three evaluations and
/// minimizes the profile over the slopes with Nelder-Mead. A final step fits
/// the quadratic model of the profile from evaluations only and keeps it if
/// it does not raise the profile.
pub fn minimize_objective_oracle(ds: &Dataset, cfg: OracleConfig) -> Result<DVector<f64>> {
    if ds.n() > 200 || ds.px() > 3 {
        return Err(IcmError::Argument(
            "oracle is limited to n <= 200 and p_x <= 3".into(),
        ));
    }
    let d = distance_matrix(ds.z());
    let px = ds.px();
    let ys = ds.y().amax().max(1.0);

    let profile = |s: &[f64]| -> (f64, f64) {
        let mut theta = DVector::zeros(px);
        theta.as_mut_slice()[1..].copy_from_slice(s);
        let base = objective_with(&d, ds, &theta);
        let eval = |c: f64| {
            let mut t = theta.clone();
            t[0] = c;
            objective_with(&d, ds, &t)
        };
        let (fm, fp) = (eval(-ys), eval(ys));
        let curv = (fp + fm - 2.0 * base) / (2.0 * ys * ys);
        if !(curv < 0.0) {
            return (f64::NAN, f64::NAN);
        }
        let slope = (fp - fm) / (2.0 * ys);
        let c = -slope / (2.0 * curv);
        (eval(c), c)
    };

    if px == 1 {
        let (_, c) = profile(&[]);
        if !c.is_finite() {
            return Err(IcmError::Oracle("intercept direction is not concave".into()));
        }
        return Ok(DVector::from_vec(vec![c]));
    }

    let dim = px - 1;
    let f = |s: &[f64]| profile(s).0;
    let start = vec![0.0; dim];
    let mut best = nelder_mead(&f, &start, 1.0, cfg)?;
    // restart from the best vertex to shake off a collapsed simplex
    for _ in 0..3 {
        best = nelder_mead(&f, &best, 1e-3 * (1.0 + norm(&best)), cfg)?;
    }
    let polished = quadratic_polish(&f, &best, 1e-2 * (1.0 + norm(&best)));
    if let Some(p) = polished {
        if f(&p) <= f(&best) {
            best = p;
        }
    }
    let (_, c) = profile(&best);
    if !c.is_finite() {
        return Err(IcmError::Oracle("intercept direction is not concave".into()));
    }
    let mut theta = DVector::zeros(px);
    theta[0] = c;
    theta.as_mut_slice()[1..].copy_from_slice(&best);
    Ok(theta)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn nelder_mead<F: Fn(&[f64]) -> f64>(f: &F, x0: &[f64], step: f64, cfg: OracleConfig) -> Result<Vec<f64>> {
    let dim = x0.len();
    let mut simplex: Vec<Vec<f64>> = vec![x0.to_vec()];
    for k in 0..dim {
        let mut v = x0.to_vec();
        v[k] += step;
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| f(v)).collect();
    let mut evals = values.len();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(IcmError::Oracle("profile objective undefined at start".into()));
    }
    loop {
        let mut order: Vec<usize> = (0..=dim).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();

        let diameter = simplex[1..]
            .iter()
            .map(|v| norm(&v.iter().zip(&simplex[0]).map(|(a, b)| a - b).collect::<Vec<_>>()))
            .fold(0.0, f64::max);
        if diameter < cfg.xtol * (1.0 + norm(&simplex[0])) {
            return Ok(simplex[0].clone());
        }
        if evals > cfg.max_evals {
            return Err(IcmError::Oracle(format!(
                "Nelder-Mead exceeded {} evaluations (diameter {diameter:e})",
                cfg.max_evals
            )));
        }

        let centroid: Vec<f64> = (0..dim)
            .map(|k| simplex[..dim].iter().map(|v| v[k]).sum::<f64>() / dim as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[dim])
                .map(|(c, w)| c + t * (w - c))
                .collect()
        };
        let reflected = along(-1.0);
        let fr = f(&reflected);
        evals += 1;
        if fr < values[0] {
            let expanded = along(-2.0);
            let fe = f(&expanded);
            evals += 1;
            if fe < fr {
                simplex[dim] = expanded;
                values[dim] = fe;
            } else {
                simplex[dim] = reflected;
                values[dim] = fr;
            }
        } else if fr < values[dim - 1] {
            simplex[dim] = reflected;
            values[dim] = fr;
        } else {
            let contracted = if fr < values[dim] { along(-0.5) } else { along(0.5) };
            let fc = f(&contracted);
            evals += 1;
            if fc < values[dim].min(fr) {
                simplex[dim] = contracted;
                values[dim] = fc;
            } else {
                for i in 1..=dim {
                    let shrunk: Vec<f64> = simplex[i]
                        .iter()
                        .zip(&simplex[0])
                        .map(|(v, b)| b + 0.5 * (v - b))
                        .collect();
                    values[i] = f(&shrunk);
                    simplex[i] = shrunk;
                    evals += 1;
                }
            }
        }
    }
}

/// One Newton step on a quadratic model assembled from function values
/// (central differences are exact for a quadratic up to rounding).
fn quadratic_polish<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64], h: f64) -> Option<Vec<f64>> {
    let dim = x.len();
    let at = |offs: &[(usize, f64)]| {
        let mut v = x.to_vec();
        for &(k, d) in offs {
            v[k] += d;
        }
        f(&v)
    };
    let f0 = f(x);
    let mut grad = DVector::zeros(dim);
    let mut hess = DMatrix::zeros(dim, dim);
    for a in 0..dim {
        let fp = at(&[(a, h)]);
        let fm = at(&[(a, -h)]);
        grad[a] = (fp - fm) / (2.0 * h);
        hess[(a, a)] = (fp + fm - 2.0 * f0) / (h * h);
        for b in 0..a {
            let v = (at(&[(a, h), (b, h)]) - at(&[(a, h), (b, -h)]) - at(&[(a, -h), (b, h)])
                + at(&[(a, -h), (b, -h)]))
                / (4.0 * h * h);
            hess[(a, b)] = v;
            hess[(b, a)] = v;
        }
    }
    let step = hess.cholesky()?.solve(&grad);
    Some(x.iter().zip(step.iter()).map(|(a, s)| a - s).collect())
}
