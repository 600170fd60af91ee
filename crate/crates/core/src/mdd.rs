//! Sample martingale difference divergence and its kernel generalization.
//!
//! All measures are V-statistics over the `n^2` ordered pairs, diagonal
//! included, applied to the centered weights `W_c = W - mean(W)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{IcmError, Result};
use crate::kernels::{distance_matrix, entry_sd, KernelMatrix, KernelSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct DependenceReport {
    pub gmdd_sq: f64,
    pub gmdc: f64,
    pub kernel: KernelSpec,
    pub n: usize,
}

fn centered(w: &DVector<f64>) -> DVector<f64> {
    let m = w.mean();
    w.map(|v| v - m)
}

/// `E_n[W_c,i W_c,j K_ij]` for a precomputed symmetric matrix.
pub(crate) fn quadratic_vstat(wc: &DVector<f64>, k: &DMatrix<f64>) -> f64 {
    let n = wc.len() as f64;
    (k * wc).dot(wc) / (n * n)
}

/// `MDD^2(W | Z) = -E_n[||Z_i - Z_j|| W_c,i W_c,j]`.
pub fn mdd_sq(w: &DVector<f64>, z: &DMatrix<f64>) -> Result<f64> {
    let n = w.len();
    if n < 2 {
        return Err(IcmError::Argument("mdd_sq needs at least two observations".into()));
    }
    if z.nrows() != n {
        return Err(IcmError::Argument(format!(
            "W has {n} entries but Z has {} rows",
            z.nrows()
        )));
    }
    if !w.iter().chain(z.iter()).all(|v| v.is_finite()) {
        return Err(IcmError::Argument("mdd_sq inputs must be finite".into()));
    }
    let d = distance_matrix(z);
    Ok(mdd_sq_with_distances(w, &d))
}

/// Same as [`mdd_sq`] with the distance matrix supplied, for repeated use.
pub fn mdd_sq_with_distances(w: &DVector<f64>, distances: &DMatrix<f64>) -> f64 {
    -quadratic_vstat(&centered(w), distances)
}

/// Kernel-weighted dependence `E_n[W_c,i W_c,j K_ij]`.
pub fn gmdd_sq(w: &DVector<f64>, k: &KernelMatrix) -> Result<f64> {
    if k.n() != w.len() {
        return Err(IcmError::Argument(format!(
            "W has {} entries but the kernel is {}x{}",
            w.len(),
            k.n(),
            k.n()
        )));
    }
    Ok(quadratic_vstat(&centered(w), &k.values))
}

/// Correlation analogue of [`gmdd_sq`]: `gmdd_sq / (E_n[W_c^2] sd_n(K))`.
///
/// `sd_n(K)` is the standard deviation of all `n^2` entries with divisor
/// `n^2`. Because the centered weight products sum to zero, Cauchy-Schwarz
/// bounds the ratio by 1 in absolute value for every sample.
pub fn gmdc(w: &DVector<f64>, k: &KernelMatrix) -> Result<f64> {
    let g = gmdd_sq(w, k)?;
    let wc = centered(w);
    let w2 = wc.norm_squared() / w.len() as f64;
    let sd = entry_sd(&k.values);
    if !(w2 > 0.0) {
        return Err(IcmError::Degenerate("W has zero variance".into()));
    }
    if !(sd > 0.0) {
        return Err(IcmError::Degenerate("kernel entries have zero variance".into()));
    }
    let raw = g / (w2 * sd);
    if raw < -1e-8 {
        return Err(IcmError::Degenerate(format!(
            "negative kernel dependence {raw:e}; the kernel is not of negative type on this sample"
        )));
    }
    Ok(raw.clamp(0.0, 1.0))
}

pub fn dependence_report(w: &DVector<f64>, k: &KernelMatrix) -> Result<DependenceReport> {
    Ok(DependenceReport {
        gmdd_sq: gmdd_sq(w, k)?,
        gmdc: gmdc(w, k)?,
        kernel: k.spec,
        n: w.len(),
    })
}
