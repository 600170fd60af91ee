//! Wild-bootstrap ICM specification test and the linear-completeness
//! relevance test built on it.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{IcmError, Result};
use crate::estimator::{build_instruments, estimate, kernel_for, outcome_design, IvSystem};
use crate::kernels::{distance_matrix, wmd_lambda, KernelSpec};
use crate::mdd::mdd_sq_with_distances;
use crate::rng::child_rng;

/// Largest tolerated share of failed bootstrap refits.
pub const MAX_FAILED_SHARE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WildWeights {
    /// Two-point distribution with mean 0, variance 1 and third moment 1.
    Mammen,
    /// `+-1` with equal probability.
    Rademacher,
}

impl WildWeights {
    pub fn name(&self) -> &'static str {
        match self {
            WildWeights::Mammen => "mammen",
            WildWeights::Rademacher => "rademacher",
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            WildWeights::Mammen => {
                let s5 = 5f64.sqrt();
                let p_low = (s5 + 1.0) / (2.0 * s5);
                if rng.random::<f64>() < p_low {
                    (1.0 - s5) / 2.0
                } else {
                    (1.0 + s5) / 2.0
                }
            }
            WildWeights::Rademacher => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
        }
    }
}

impl fmt::Display for WildWeights {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WildWeights {
    type Err = IcmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mammen" => Ok(WildWeights::Mammen),
            "rademacher" => Ok(WildWeights::Rademacher),
            other => Err(IcmError::Config(format!("unknown weight scheme `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootTestResult {
    /// Observed `n * MDD_n^2(U_hat | Z)`.
    pub stat: f64,
    /// Statistics of the successful bootstrap draws, in draw order.
    pub boot_stats: Vec<f64>,
    /// `(1 + #{boot >= stat}) / (successful draws + 1)`.
    pub pvalue: f64,
    /// Requested number of draws.
    pub b: usize,
    pub failed_draws: usize,
    pub seed: u64,
    pub weight_scheme: WildWeights,
}

/// Re-estimates `theta` for new outcomes on a fixed design.
enum Refit {
    Fixed {
        h: DMatrix<f64>,
        sys: IvSystem,
    },
    /// WMD's diagonal depends on the outcome through `lambda`.
    Wmd {
        ktilde: DMatrix<f64>,
        ktilde_x: DMatrix<f64>,
    },
}

impl Refit {
    fn new(ds: &Dataset, spec: KernelSpec) -> Result<Self> {
        let k = kernel_for(ds, spec)?;
        match spec {
            KernelSpec::Wmd { .. } => {
                let mut ktilde = k.values;
                ktilde.fill_diagonal(0.0);
                let ktilde_x = &ktilde * ds.x();
                Ok(Refit::Wmd { ktilde, ktilde_x })
            }
            _ => {
                let h = build_instruments(ds, &k)?.h;
                let sys = IvSystem::new(&h, ds.x())?;
                Ok(Refit::Fixed { h, sys })
            }
        }
    }

    fn theta(&self, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            Refit::Fixed { h, sys } => sys.solve(h, y),
            Refit::Wmd { ktilde, ktilde_x } => {
                let n = y.len() as f64;
                let lambda = wmd_lambda(&outcome_design(y, x), ktilde)?;
                let h = (ktilde_x - x * (n * lambda)) / (n - 1.0);
                IvSystem::new(&h, x)?.solve(&h, y)
            }
        }
    }
}

fn bootstrap_pvalue(stat: f64, boot: &[f64]) -> f64 {
    let exceed = boot.iter().filter(|&&t| t >= stat).count();
    (1 + exceed) as f64 / (boot.len() + 1) as f64
}

/// ICM specification test of `E[U | Z] = 0` with a full-refit wild bootstrap.
///
/// Draw `b` uses its own generator seeded from `(seed, b)`, so the result is
/// bit-identical for any thread count.
pub fn spec_test(
    ds: &Dataset,
    spec: KernelSpec,
    b: usize,
    seed: u64,
    weights: WildWeights,
) -> Result<BootTestResult> {
    if b < 99 {
        return Err(IcmError::Argument(format!("need at least 99 bootstrap draws, got {b}")));
    }
    let fit = estimate(ds, spec)?;
    let n = ds.n() as f64;
    let dist = distance_matrix(ds.z());
    let stat = n * mdd_sq_with_distances(&fit.residuals, &dist);

    let refit = Refit::new(ds, spec)?;
    let x = ds.x();
    let fitted = x * &fit.theta;

    let draws: Vec<Option<f64>> = (0..b)
        .into_par_iter()
        .map(|draw| {
            let mut rng = child_rng(seed, draw as u64);
            let ystar = DVector::from_fn(ds.n(), |i, _| {
                fitted[i] + fit.residuals[i] * weights.draw(&mut rng)
            });
            let theta = refit.theta(x, &ystar).ok()?;
            let ustar = &ystar - x * theta;
            let t = n * mdd_sq_with_distances(&ustar, &dist);
            t.is_finite().then_some(t)
        })
        .collect();

    let boot_stats: Vec<f64> = draws.iter().flatten().copied().collect();
    let failed = b - boot_stats.len();
    if failed as f64 > MAX_FAILED_SHARE * b as f64 {
        return Err(IcmError::Bootstrap { failed, total: b });
    }
    Ok(BootTestResult {
        stat,
        pvalue: bootstrap_pvalue(stat, &boot_stats),
        boot_stats,
        b,
        failed_draws: failed,
        seed,
        weight_scheme: weights,
    })
}

/// Auxiliary regression of the endogenous column on the remaining covariates.
pub fn lc_auxiliary_dataset(ds: &Dataset, endog: usize) -> Result<Dataset> {
    let px = ds.px();
    if endog == 0 || endog >= px {
        return Err(IcmError::Argument(format!(
            "endogenous column index {endog} must be in 1..{px}"
        )));
    }
    let flagged = ds.endog_indices();
    if flagged.len() > 1 {
        return Err(IcmError::Unsupported(
            "the linear-completeness test covers a single endogenous covariate; \
             it does not extend to several endogenous covariates"
                .into(),
        ));
    }
    if flagged.len() == 1 && flagged[0] != endog {
        return Err(IcmError::Argument(format!(
            "column {endog} is not the flagged endogenous covariate `{}`",
            ds.x_names()[flagged[0]]
        )));
    }
    let keep: Vec<usize> = (0..px).filter(|&j| j != endog).collect();
    let x = ds.x().select_columns(&keep);
    let names = keep.iter().map(|&j| ds.x_names()[j].clone()).collect();
    Dataset::new(
        ds.x().column(endog).into_owned(),
        x,
        ds.z().clone(),
        ds.x_names()[endog].clone(),
        names,
        ds.z_names().to_vec(),
        vec![false; keep.len()],
    )
}

/// Linear-completeness (ICM relevance) test for one endogenous covariate.
///
/// Regresses `D` on the other covariates with `Z` as instruments and runs
/// [`spec_test`] on that fit. The null is that some linear combination
/// `D - X~ eta` is mean-independent of `Z`; rejecting it is evidence that the
/// ICM relevance condition holds.
pub fn lc_test(
    ds: &Dataset,
    endog: usize,
    spec: KernelSpec,
    b: usize,
    seed: u64,
    weights: WildWeights,
) -> Result<BootTestResult> {
    let aux = lc_auxiliary_dataset(ds, endog)?;
    spec_test(&aux, spec, b, seed, weights)
}

pub fn lc_interpretation(pvalue: f64, level: f64) -> &'static str {
    if pvalue <= level {
        "evidence of ICM identification: linear completeness holds"
    } else {
        "no evidence of ICM identification"
    }
}

pub fn spec_interpretation(pvalue: f64, level: f64) -> &'static str {
    if pvalue <= level {
        "reject E[U|Z] = 0: evidence of misspecification"
    } else {
        "no evidence against E[U|Z] = 0"
    }
}
