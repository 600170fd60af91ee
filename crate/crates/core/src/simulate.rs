//! Simulation designs and the Monte Carlo harness for bias, dispersion and
//! size of the t-test on the coefficient of the (first) endogenous covariate.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{IcmError, Result};
use crate::estimator::{estimate, t_test, tsls_estimate, EstimateResult, Method};
use crate::rng::child_rng;
use crate::stats::{mean, median, norm_cdf, norm_quantile};

/// True value of every structural coefficient.
pub const TRUE_COEF: f64 = 1.0;

/// Index of the coefficient under study in every design's `X`.
pub const TARGET_INDEX: usize = 1;

/// Share of failed replications above which a summary is flagged.
pub const MAX_FAILED_SHARE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DgpId {
    /// One endogenous covariate, no excluded instrument.
    Dgp0A,
    /// Two endogenous covariates, one instrument.
    Dgp0B,
    /// IV-weak but ICM-strong instruments.
    Dgp1A,
    /// Instruments uncorrelated with, but mean-dependent on, `D`.
    Dgp1B,
    /// Many weak-ish relevant instruments.
    Dgp4,
}

impl DgpId {
    pub fn name(&self) -> &'static str {
        match self {
            DgpId::Dgp0A => "0A",
            DgpId::Dgp0B => "0B",
            DgpId::Dgp1A => "1A",
            DgpId::Dgp1B => "1B",
            DgpId::Dgp4 => "4",
        }
    }

    /// Instrument dimension the design is defined with, if fixed.
    pub fn fixed_pz(&self) -> Option<usize> {
        match self {
            DgpId::Dgp0A | DgpId::Dgp0B => Some(1),
            DgpId::Dgp1A | DgpId::Dgp1B => Some(2),
            DgpId::Dgp4 => None,
        }
    }

    /// Designs with fewer instruments than coefficients, where TSLS is not
    /// identified.
    pub fn tsls_feasible(&self) -> bool {
        !matches!(self, DgpId::Dgp0A | DgpId::Dgp0B)
    }
}

impl fmt::Display for DgpId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DgpId {
    type Err = IcmError;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_uppercase();
        let t = t.trim_start_matches("DGP").trim_start_matches('_');
        match t {
            "0A" => Ok(DgpId::Dgp0A),
            "0B" => Ok(DgpId::Dgp0B),
            "1A" => Ok(DgpId::Dgp1A),
            "1B" => Ok(DgpId::Dgp1B),
            "4" => Ok(DgpId::Dgp4),
            _ => Err(IcmError::Config(format!("unknown DGP `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DgpConfig {
    pub id: DgpId,
    pub n: usize,
    pub pz: usize,
    pub delta: f64,
    /// Correlation of the structural and first-stage errors.
    pub rho: f64,
    pub seed: u64,
}

impl DgpConfig {
    /// Design defaults: `rho = 0.5` and the design's own `p_z` (8 for DGP 4).
    pub fn new(id: DgpId, n: usize, delta: f64, seed: u64) -> Self {
        DgpConfig {
            id,
            n,
            pz: id.fixed_pz().unwrap_or(8),
            delta,
            rho: 0.5,
            seed,
        }
    }

    pub fn with_pz(mut self, pz: usize) -> Self {
        self.pz = pz;
        self
    }

    pub fn with_rho(mut self, rho: f64) -> Self {
        self.rho = rho;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(pz) = self.id.fixed_pz() {
            if self.pz != pz {
                return Err(IcmError::Config(format!(
                    "DGP {} is defined with p_z = {pz}, got {}",
                    self.id, self.pz
                )));
            }
        }
        if self.pz == 0 {
            return Err(IcmError::Config("p_z must be positive".into()));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(IcmError::Config(format!("delta must be >= 0, got {}", self.delta)));
        }
        if !(self.rho > -1.0 && self.rho < 1.0) {
            return Err(IcmError::Config(format!("rho must lie in (-1, 1), got {}", self.rho)));
        }
        if self.n < 10 {
            return Err(IcmError::Config(format!("n = {} is too small", self.n)));
        }
        Ok(())
    }
}

/// Instrument covariance with entries `exp(-|k - l|)`.
pub fn omega(pz: usize) -> DMatrix<f64> {
    DMatrix::from_fn(pz, pz, |k, l| (-(k.abs_diff(l) as f64)).exp())
}

/// `(2 / sqrt(p)) sum_k 1{|Z_k| < -Phi^-1(1/4)}`.
pub fn f1(z: &[f64]) -> f64 {
    let cut = -norm_quantile(0.25);
    let hits = z.iter().filter(|v| v.abs() < cut).count() as f64;
    2.0 * hits / (z.len() as f64).sqrt()
}

/// Draws replication `rep` of the design. Deterministic in `(cfg.seed, rep)`.
pub fn gen_dgp(cfg: &DgpConfig, rep: u64) -> Result<Dataset> {
    cfg.validate()?;
    let (n, pz) = (cfg.n, cfg.pz);
    let chol = omega(pz)
        .cholesky()
        .ok_or_else(|| IcmError::Config("instrument covariance not positive definite".into()))?;
    let l = chol.l();
    let rho_c = (1.0 - cfg.rho * cfg.rho).sqrt();
    let mut rng = child_rng(cfg.seed, rep);

    let mut z = DMatrix::zeros(n, pz);
    let mut u = DVector::zeros(n);
    let mut v = DVector::zeros(n);
    let mut e = DVector::zeros(pz);
    for i in 0..n {
        for k in 0..pz {
            e[k] = StandardNormal.sample(&mut rng);
        }
        z.set_row(i, &(&l * &e).transpose());
        let e1: f64 = StandardNormal.sample(&mut rng);
        let e2: f64 = StandardNormal.sample(&mut rng);
        u[i] = e1;
        v[i] = cfg.rho * e1 + rho_c * e2;
    }

    let sd = cfg.delta.sqrt();
    let s2 = std::f64::consts::SQRT_2;
    let b = TRUE_COEF;
    let names = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let zrow = |i: usize| z.row(i).iter().copied().collect::<Vec<f64>>();

    let (y, x_rest, x_names, endog, zmat, z_names) = match cfg.id {
        DgpId::Dgp0A => {
            let d = DVector::from_fn(n, |i, _| 0.25 + z[(i, 0)] + sd * z[(i, 0)].powi(2) + v[i]);
            let y = DVector::from_fn(n, |i, _| b + b * d[i] + b * z[(i, 0)] + u[i]);
            let x = DMatrix::from_columns(&[d, z.column(0).into_owned()]);
            (y, x, names(&["d", "z"]), vec![true, false], z.clone(), names(&["z"]))
        }
        DgpId::Dgp0B => {
            let d1 = DVector::from_fn(n, |i, _| {
                0.25 + z[(i, 0)] + sd * z[(i, 0)].powi(2) + v[i] / s2
            });
            let d2 = DVector::from_fn(n, |i, _| z[(i, 0)] + u[i] / s2);
            let y = DVector::from_fn(n, |i, _| b + b * d1[i] + b * d2[i] + u[i]);
            let x = DMatrix::from_columns(&[d1, d2]);
            (y, x, names(&["d1", "d2"]), vec![true, true], z.clone(), names(&["z"]))
        }
        DgpId::Dgp1A | DgpId::Dgp1B => {
            let d = DVector::from_fn(n, |i, _| {
                let zi = zrow(i);
                let signal = if cfg.id == DgpId::Dgp1A {
                    2.0 * cfg.delta * norm_cdf(zi.iter().sum()) + f1(&zi)
                } else {
                    sd * zi[0].sin() * zi[1].sin() / ((1.0 - (-2.0f64).exp()) / 4.0)
                };
                signal + v[i]
            });
            let y = DVector::from_fn(n, |i, _| b + b * d[i] + b * z[(i, 1)] + u[i]);
            let x = DMatrix::from_columns(&[d, z.column(1).into_owned()]);
            (y, x, names(&["d", "z2"]), vec![true, false], z.clone(), names(&["z1", "z2"]))
        }
        DgpId::Dgp4 => {
            let scale = 1.0 / (pz as f64).sqrt();
            let d = DVector::from_fn(n, |i, _| scale * z.row(i).sum() + v[i]);
            let y = DVector::from_fn(n, |i, _| b + b * d[i] + u[i]);
            let x = DMatrix::from_columns(&[d]);
            let zn = (1..=pz).map(|k| format!("z{k}")).collect();
            (y, x, names(&["d"]), vec![true], z.clone(), zn)
        }
    };
    Dataset::with_intercept(y, x_rest, zmat, "y", x_names, z_names, endog)
}

/// Draw `rep` of `Z ~ N(0, I_p)` with `W = (1/sqrt(p)) sum_k Z_k + e`,
/// `e ~ N(0, 1)`, the design for comparing dependence coefficients across
/// kernels and instrument dimensions.
pub fn linear_signal_sample(n: usize, pz: usize, seed: u64, rep: u64) -> (DVector<f64>, DMatrix<f64>) {
    let mut rng = child_rng(seed, rep);
    let z = DMatrix::from_fn(n, pz, |_, _| StandardNormal.sample(&mut rng));
    let scale = 1.0 / (pz as f64).sqrt();
    let w = DVector::from_fn(n, |i, _| {
        let e: f64 = StandardNormal.sample(&mut rng);
        scale * z.row(i).sum() + e
    });
    (w, z)
}

pub fn fit_method(ds: &Dataset, method: Method) -> Result<EstimateResult> {
    match method {
        Method::Icm(spec) => estimate(ds, spec),
        Method::Tsls => tsls_estimate(ds),
    }
}

/// Accuracy and size metrics for one estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct McRow {
    pub method: Method,
    /// Mean of `beta_hat - beta_o`.
    pub mb: f64,
    /// Median of `|beta_hat - beta_o|` (deviation from the truth).
    pub mad: f64,
    pub rmse: f64,
    /// Rejection rate of the 5% t-test of `beta = beta_o`.
    pub rej: f64,
    pub reps: usize,
    pub failures: usize,
    /// False when more than 1% of replications failed.
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McSummary {
    pub cfg: DgpConfig,
    pub reps: usize,
    pub rows: Vec<McRow>,
}

impl McSummary {
    pub fn row(&self, method: Method) -> Option<&McRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

/// Summarizes estimation errors `beta_hat - beta_o` and t-test outcomes.
pub fn summarize(method: Method, outcomes: &[Option<(f64, bool)>]) -> McRow {
    let ok: Vec<(f64, bool)> = outcomes.iter().flatten().copied().collect();
    let reps = outcomes.len();
    let failures = reps - ok.len();
    let errs: Vec<f64> = ok.iter().map(|o| o.0).collect();
    let (mb, mad, rmse, rej) = if errs.is_empty() {
        (f64::NAN, f64::NAN, f64::NAN, f64::NAN)
    } else {
        let abs: Vec<f64> = errs.iter().map(|e| e.abs()).collect();
        let sq: Vec<f64> = errs.iter().map(|e| e * e).collect();
        let rej = ok.iter().filter(|o| o.1).count() as f64 / ok.len() as f64;
        (mean(&errs), median(&abs), mean(&sq).sqrt(), rej)
    };
    McRow {
        method,
        mb,
        mad,
        rmse,
        rej,
        reps,
        failures,
        valid: failures as f64 <= MAX_FAILED_SHARE * reps as f64,
    }
}

/// Monte Carlo over `reps` replications, each estimator on the same draws.
pub fn run_mc(cfg: &DgpConfig, reps: usize, estimators: &[Method]) -> Result<McSummary> {
    cfg.validate()?;
    if reps == 0 {
        return Err(IcmError::Config("reps must be at least 1".into()));
    }
    if estimators.is_empty() {
        return Err(IcmError::Config("no estimators requested".into()));
    }
    if !cfg.id.tsls_feasible() && estimators.contains(&Method::Tsls) {
        return Err(IcmError::Infeasible(format!(
            "TSLS is not identified under DGP {} (fewer instruments than coefficients)",
            cfg.id
        )));
    }

    let per_rep: Vec<Vec<Option<(f64, bool)>>> = (0..reps as u64)
        .into_par_iter()
        .map(|rep| {
            let ds = match gen_dgp(cfg, rep) {
                Ok(ds) => ds,
                Err(_) => return vec![None; estimators.len()],
            };
            estimators
                .iter()
                .map(|&m| {
                    let res = fit_method(&ds, m).ok()?;
                    let test = t_test(&res, TARGET_INDEX, TRUE_COEF, 0.05).ok()?;
                    let err = res.theta[TARGET_INDEX] - TRUE_COEF;
                    err.is_finite().then_some((err, test.reject))
                })
                .collect()
        })
        .collect();

    let rows = estimators
        .iter()
        .enumerate()
        .map(|(k, &m)| {
            let col: Vec<Option<(f64, bool)>> = per_rep.iter().map(|r| r[k]).collect();
            summarize(m, &col)
        })
        .collect();
    Ok(McSummary {
        cfg: *cfg,
        reps,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn omega_two_by_two() {
        let o = omega(2);
        assert_eq!(o[(0, 0)], 1.0);
        assert_eq!(o[(1, 1)], 1.0);
        assert_abs_diff_eq!(o[(0, 1)], (-1.0f64).exp(), epsilon = 1e-16);
        assert_eq!(o[(0, 1)], o[(1, 0)]);
    }

    #[test]
    fn f1_threshold() {
        let cut = 0.6744897501960817;
        assert_abs_diff_eq!(-norm_quantile(0.25), cut, epsilon = 1e-12);
        assert_eq!(f1(&[0.0, 0.0, 0.0, 0.0]), 4.0);
        assert_eq!(f1(&[1.0, -1.0]), 0.0);
    }

    #[test]
    fn design_shapes() {
        for (id, px, pz) in [
            (DgpId::Dgp0A, 3, 1),
            (DgpId::Dgp0B, 3, 1),
            (DgpId::Dgp1A, 3, 2),
            (DgpId::Dgp1B, 3, 2),
            (DgpId::Dgp4, 2, 8),
        ] {
            let ds = gen_dgp(&DgpConfig::new(id, 50, 0.5, 3), 0).unwrap();
            assert_eq!((ds.px(), ds.pz()), (px, pz), "{id}");
            assert!(ds.endog_mask()[TARGET_INDEX]);
        }
    }

    #[test]
    fn wrong_pz_rejected() {
        let cfg = DgpConfig::new(DgpId::Dgp0A, 50, 0.5, 3).with_pz(2);
        assert!(matches!(gen_dgp(&cfg, 0), Err(IcmError::Config(_))));
    }

    #[test]
    fn parse_ids() {
        assert_eq!("dgp_0a".parse::<DgpId>().unwrap(), DgpId::Dgp0A);
        assert_eq!("4".parse::<DgpId>().unwrap(), DgpId::Dgp4);
        assert_eq!("1B".parse::<DgpId>().unwrap(), DgpId::Dgp1B);
        assert!("9".parse::<DgpId>().is_err());
    }

    #[test]
    fn single_rep_summary() {
        let row = summarize(Method::Tsls, &[Some((-0.2, true))]);
        assert_eq!(row.mb, -0.2);
        assert_eq!(row.mad, 0.2);
        assert_abs_diff_eq!(row.rmse, 0.2, epsilon = 1e-16);
        assert_eq!(row.rej, 1.0);
    }

    #[test]
    fn failures_flag_summary() {
        let mut outcomes = vec![Some((0.1, false)); 98];
        outcomes.push(None);
        outcomes.push(None);
        let row = summarize(Method::Tsls, &outcomes);
        assert_eq!(row.failures, 2);
        assert!(!row.valid);
    }

    #[test]
    fn tsls_refused_for_0a() {
        let cfg = DgpConfig::new(DgpId::Dgp0A, 50, 0.5, 3);
        assert!(matches!(run_mc(&cfg, 2, &[Method::Tsls]), Err(IcmError::Infeasible(_))));
    }
}
