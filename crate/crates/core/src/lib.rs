//! Integrated conditional moment (ICM) estimation of linear instrumental
//! variable models.
//!
//! The estimators here identify structural coefficients from the full
//! conditional moment restriction `E[Y - X'theta | Z] = 0` rather than a
//! finite set of unconditional moments, so they remain consistent when the
//! instruments are linearly uncorrelated with the endogenous covariates but
//! still mean-dependent on them.

pub mod data;
pub mod error;
pub mod estimator;
pub mod inference;
pub mod kernels;
pub mod mdd;
pub mod rng;
pub mod simulate;
pub mod stats;

pub use data::{load_csv, standardize_instruments, Dataset, InstrumentTransform};
pub use error::{IcmError, Result};
pub use estimator::{
    estimate, identification_diagnostics, minimize_objective_oracle, objective_qn, t_test,
    tsls_estimate, EstimateResult, IdentificationReport, Method, OracleConfig, TTest,
};
pub use inference::{lc_test, spec_test, BootTestResult, WildWeights};
pub use kernels::{kernel_matrix, kernel_sd_mc, KernelMatrix, KernelSd, KernelSpec};
pub use mdd::{gmdc, gmdd_sq, mdd_sq};
pub use simulate::{gen_dgp, run_mc, DgpConfig, DgpId, McRow, McSummary};
