//! ICM kernel matrices and the kernel-degeneracy diagnostics.
//!
//! Every estimator in the linear ICM class is the same IV formula with a
//! different `n x n` kernel matrix. Kernels here follow one sign convention:
//! `gmdd_sq(W, K) = E_n[W_i W_j K_ij]` is a dependence measure, so the MMD
//! kernel is stored as `-||Z_i - Z_j||`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use statrs::function::gamma::gamma;

use crate::error::{IcmError, Result};
use crate::rng::child_rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelSpec {
    /// `-||Z_i - Z_j||`, the martingale difference divergence kernel.
    Mmd,
    /// Gaussian kernel in the Mahalanobis metric of the sample covariance.
    IivGauss,
    /// Empirical-CDF indicator kernel, coordinate-wise ordering.
    Dl,
    /// Angular kernel averaged over the sample.
    Esc6,
    /// Gaussian-density kernel with the LIML-like diagonal correction.
    Wmd { bandwidth: f64 },
}

impl KernelSpec {
    pub const ALL: [KernelSpec; 5] = [
        KernelSpec::Mmd,
        KernelSpec::IivGauss,
        KernelSpec::Dl,
        KernelSpec::Esc6,
        KernelSpec::Wmd { bandwidth: 1.0 },
    ];

    pub fn name(&self) -> &'static str {
        match self {
            KernelSpec::Mmd => "mmd",
            KernelSpec::IivGauss => "iiv",
            KernelSpec::Dl => "dl",
            KernelSpec::Esc6 => "esc6",
            KernelSpec::Wmd { .. } => "wmd",
        }
    }

    /// DL, ESC6 and WMD need the whole sample to evaluate one entry.
    pub fn is_data_dependent(&self) -> bool {
        matches!(self, KernelSpec::Dl | KernelSpec::Esc6 | KernelSpec::Wmd { .. })
    }
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KernelSpec {
    type Err = IcmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mmd" => Ok(KernelSpec::Mmd),
            "iiv" | "iiv_gauss" | "gauss" => Ok(KernelSpec::IivGauss),
            "dl" => Ok(KernelSpec::Dl),
            "esc6" => Ok(KernelSpec::Esc6),
            "wmd" => Ok(KernelSpec::Wmd { bandwidth: 1.0 }),
            other => Err(IcmError::Config(format!("unknown kernel `{other}`"))),
        }
    }
}

/// Scaling quantities computed while building a kernel.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KernelMeta {
    /// Sample covariance of the instruments (IIV only).
    pub vz: Option<DMatrix<f64>>,
    /// Smallest eigenvalue of `(E_n[Y*'Y*])^-1 E_n[K~ Y*'Y*]` (WMD only).
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    pub values: DMatrix<f64>,
    pub spec: KernelSpec,
    pub meta: KernelMeta,
}

impl KernelMatrix {
    pub fn n(&self) -> usize {
        self.values.nrows()
    }
}

/// Row-major copy, so pair loops read contiguous memory.
fn rows_of(z: &DMatrix<f64>) -> Vec<f64> {
    let (n, p) = z.shape();
    let mut out = Vec::with_capacity(n * p);
    for i in 0..n {
        out.extend(z.row(i).iter());
    }
    out
}

/// Fills a symmetric matrix from `f(i, j)` evaluated once per unordered pair,
/// so `values[(i, j)] == values[(j, i)]` holds bit-for-bit.
fn symmetric_from<F>(n: usize, f: F) -> DMatrix<f64>
where
    F: Fn(usize, usize) -> f64 + Sync,
{
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| (i..n).map(|j| f(i, j)).collect())
        .collect();
    let mut m = DMatrix::zeros(n, n);
    for (i, row) in upper.iter().enumerate() {
        for (k, &v) in row.iter().enumerate() {
            m[(i, i + k)] = v;
            m[(i + k, i)] = v;
        }
    }
    m
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Euclidean distance matrix `||Z_i - Z_j||`.
pub fn distance_matrix(z: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, p) = z.shape();
    let rows = rows_of(z);
    symmetric_from(n, |i, j| {
        if i == j {
            0.0
        } else {
            sq_dist(&rows[i * p..(i + 1) * p], &rows[j * p..(j + 1) * p]).sqrt()
        }
    })
}

/// `pi^(p/2 - 1) / Gamma(p/2 + 1)`, the ESC6 normalizing constant.
pub fn esc6_constant(pz: usize) -> f64 {
    let h = pz as f64 / 2.0;
    PI.powf(h - 1.0) / gamma(h + 1.0)
}

/// `A_ijl` for one triple, given the three points.
///
/// Ties follow the published simplifications: `2 pi` when all three points
/// coincide and `pi` when exactly two do. Otherwise the angle between
/// `Z_i - Z_l` and `Z_j - Z_l` is computed as `2 atan2(|u - v|, |u + v|)` on
/// the unit vectors, which equals the clamped arccos of the cosine but keeps
/// full precision near 0 and pi.
fn esc6_a(zi: &[f64], zj: &[f64], zl: &[f64]) -> f64 {
    let ni = sq_dist(zi, zl).sqrt();
    let nj = sq_dist(zj, zl).sqrt();
    let i_at_l = zi == zl;
    let j_at_l = zj == zl;
    match (i_at_l, j_at_l) {
        (true, true) => 2.0 * PI,
        (true, false) | (false, true) => PI,
        (false, false) => {
            if ni == 0.0 || nj == 0.0 {
                // distinct points whose squared distance underflows
                return PI;
            }
            let (mut diff, mut sum) = (0.0, 0.0);
            for k in 0..zi.len() {
                let u = (zi[k] - zl[k]) / ni;
                let v = (zj[k] - zl[k]) / nj;
                diff += (u - v) * (u - v);
                sum += (u + v) * (u + v);
            }
            let angle = 2.0 * diff.sqrt().atan2(sum.sqrt());
            (PI - angle).abs()
        }
    }
}

fn esc6_matrix(z: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, p) = z.shape();
    let rows = rows_of(z);
    let row = |i: usize| &rows[i * p..(i + 1) * p];
    let scale = esc6_constant(p) / n as f64;
    symmetric_from(n, |i, j| {
        let s: f64 = (0..n).map(|l| esc6_a(row(i), row(j), row(l))).sum();
        scale * s
    })
}

fn dl_matrix(z: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, p) = z.shape();
    let rows = rows_of(z);
    // dominated[(i, l)] = 1 when Z_i <= Z_l in every coordinate
    let cols: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let zi = &rows[i * p..(i + 1) * p];
            (0..n)
                .map(|l| {
                    let zl = &rows[l * p..(l + 1) * p];
                    if zi.iter().zip(zl).all(|(a, b)| a <= b) {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let dominated = DMatrix::from_fn(n, n, |i, l| cols[i][l]);
    // integer counts, exact in f64
    let counts = &dominated * dominated.transpose();
    let nf = n as f64;
    DMatrix::from_fn(n, n, |i, j| counts[(i, j)] / nf)
}

fn iiv_matrix(z: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (n, p) = z.shape();
    let means = z.row_mean();
    let mut centered = z.clone();
    for mut r in centered.row_iter_mut() {
        r -= &means;
    }
    let vz = centered.transpose() * &centered / (n as f64 - 1.0);
    let chol = vz.clone().cholesky().ok_or_else(|| {
        IcmError::Scaling(
            "instrument covariance is singular; drop collinear instruments".into(),
        )
    })?;
    // whitened rows w_i = L^-1 (z_i - mean)
    let white = chol
        .l()
        .solve_lower_triangular(&centered.transpose())
        .ok_or_else(|| IcmError::Scaling("whitening solve failed".into()))?
        .transpose();
    let rows = rows_of(&white);
    let k = symmetric_from(n, |i, j| {
        if i == j {
            1.0
        } else {
            (-0.5 * sq_dist(&rows[i * p..(i + 1) * p], &rows[j * p..(j + 1) * p])).exp()
        }
    });
    Ok((k, vz))
}

/// Product of normal densities of the coordinate differences, zero diagonal.
fn wmd_base(z: &DMatrix<f64>, bandwidth: f64) -> DMatrix<f64> {
    let (n, p) = z.shape();
    let rows = rows_of(z);
    let norm = (2.0 * PI).powf(-(p as f64) / 2.0) * bandwidth.powi(-(p as i32));
    let h2 = bandwidth * bandwidth;
    symmetric_from(n, |i, j| {
        if i == j {
            0.0
        } else {
            norm * (-0.5 * sq_dist(&rows[i * p..(i + 1) * p], &rows[j * p..(j + 1) * p]) / h2).exp()
        }
    })
}

/// Smallest eigenvalue of `(E_n[Y*'Y*])^-1 E_n[K~_ij Y*_i'Y*_j]`.
///
/// Both factors are symmetric and the first is positive definite, so the
/// product is similar to `L^-1 N L^-T` with `L L' = E_n[Y*'Y*]`; its spectrum
/// is real and computed with a symmetric eigensolver.
pub fn wmd_lambda(aux: &DMatrix<f64>, ktilde: &DMatrix<f64>) -> Result<f64> {
    let n = aux.nrows();
    if ktilde.shape() != (n, n) {
        return Err(IcmError::Argument(format!(
            "kernel is {:?} but auxiliary matrix has {n} rows",
            ktilde.shape()
        )));
    }
    let nf = n as f64;
    let m = aux.transpose() * aux / nf;
    let nmat = aux.transpose() * ktilde * aux / (nf * nf);
    let chol = m.cholesky().ok_or_else(|| {
        IcmError::Scaling("E_n[Y*'Y*] is singular; WMD scaling undefined".into())
    })?;
    let linv_n = chol
        .l()
        .solve_lower_triangular(&nmat)
        .ok_or_else(|| IcmError::Scaling("triangular solve failed".into()))?;
    let c = chol
        .l()
        .solve_lower_triangular(&linv_n.transpose())
        .ok_or_else(|| IcmError::Scaling("triangular solve failed".into()))?;
    let c = (&c + c.transpose()) * 0.5;
    let eig = c.symmetric_eigenvalues();
    let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return Err(IcmError::Diagnostic(
            "no admissible real eigenvalue for the WMD scaling".into(),
        ));
    }
    Ok(min)
}

/// Builds the `n x n` kernel matrix for `spec` on instruments `z`.
///
/// `aux` is the `[y, X]` matrix and is required for WMD only. WMD's diagonal
/// is `-n * lambda` so that the IV normal equations reproduce the
/// `u'K~u / u'u` ratio minimizer; `meta.lambda` stores the unscaled value.
pub fn kernel_matrix(
    z: &DMatrix<f64>,
    spec: KernelSpec,
    aux: Option<&DMatrix<f64>>,
) -> Result<KernelMatrix> {
    let n = z.nrows();
    let mut meta = KernelMeta::default();
    let values = match spec {
        KernelSpec::Mmd => -distance_matrix(z),
        KernelSpec::IivGauss => {
            let (k, vz) = iiv_matrix(z)?;
            meta.vz = Some(vz);
            k
        }
        KernelSpec::Dl => dl_matrix(z),
        KernelSpec::Esc6 => esc6_matrix(z),
        KernelSpec::Wmd { bandwidth } => {
            if !(bandwidth > 0.0 && bandwidth.is_finite()) {
                return Err(IcmError::Argument("WMD bandwidth must be positive".into()));
            }
            let aux = aux.ok_or_else(|| {
                IcmError::Argument("WMD kernel needs the [y, X] auxiliary matrix".into())
            })?;
            if aux.nrows() != n {
                return Err(IcmError::Argument("auxiliary matrix row count mismatch".into()));
            }
            let mut k = wmd_base(z, bandwidth);
            let lambda = wmd_lambda(aux, &k)?;
            meta.lambda = Some(lambda);
            k.fill_diagonal(-(n as f64) * lambda);
            k
        }
    };
    Ok(KernelMatrix { values, spec, meta })
}

/// Monte Carlo estimate of `sd[K(Z, Z')]` for independent `Z, Z' ~ N(0, I)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSd {
    pub sd: f64,
    /// Delta-method standard error of `sd`.
    pub stderr: f64,
    pub draws: usize,
    pub seed: u64,
}

/// Size of the reference sample standing in for the population average over
/// `Z_l` in the ESC6 kernel.
pub const ESC6_REFERENCE_POINTS: usize = 256;

const SD_CHUNK: usize = 4096;

fn population_kernel(spec: KernelSpec, a: &[f64], b: &[f64], reference: &[f64]) -> f64 {
    let p = a.len();
    match spec {
        KernelSpec::Mmd => -sq_dist(a, b).sqrt(),
        KernelSpec::IivGauss => (-0.5 * sq_dist(a, b)).exp(),
        // limit of the DL kernel: P(Z_l >= max(a, b)) coordinate-wise
        KernelSpec::Dl => a
            .iter()
            .zip(b)
            .map(|(x, y)| crate::stats::norm_cdf(-x.max(*y)))
            .product(),
        KernelSpec::Esc6 => {
            let m = reference.len() / p;
            let s: f64 = (0..m)
                .map(|l| esc6_a(a, b, &reference[l * p..(l + 1) * p]))
                .sum();
            esc6_constant(p) * s / m as f64
        }
        KernelSpec::Wmd { bandwidth } => {
            let norm = (2.0 * PI).powf(-(p as f64) / 2.0) * bandwidth.powi(-(p as i32));
            norm * (-0.5 * sq_dist(a, b) / (bandwidth * bandwidth)).exp()
        }
    }
}

/// Standard deviation of the kernel across independent standard-normal pairs.
///
/// Draws are split into fixed-size chunks with seeds derived from
/// `(seed, chunk)`, so the estimate is identical for any thread count.
pub fn kernel_sd_mc(spec: KernelSpec, pz: usize, draws: usize, seed: u64) -> Result<KernelSd> {
    if pz == 0 {
        return Err(IcmError::Argument("p_z must be at least 1".into()));
    }
    if draws < 1000 {
        return Err(IcmError::Argument("kernel_sd_mc needs at least 1000 draws".into()));
    }
    let reference: Vec<f64> = if spec == KernelSpec::Esc6 {
        let mut rng = child_rng(seed, u64::MAX);
        (0..ESC6_REFERENCE_POINTS * pz)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect()
    } else {
        Vec::new()
    };
    let chunks = draws.div_ceil(SD_CHUNK);
    let values: Vec<f64> = (0..chunks)
        .into_par_iter()
        .flat_map_iter(|c| {
            let len = SD_CHUNK.min(draws - c * SD_CHUNK);
            let mut rng = child_rng(seed, c as u64);
            let mut a = vec![0.0; pz];
            let mut b = vec![0.0; pz];
            let reference = &reference;
            (0..len)
                .map(move |_| {
                    for v in a.iter_mut().chain(b.iter_mut()) {
                        *v = StandardNormal.sample(&mut rng);
                    }
                    population_kernel(spec, &a, &b, reference)
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let nf = values.len() as f64;
    let mean = values.iter().sum::<f64>() / nf;
    let m2 = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / nf;
    let m4 = values.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / nf;
    let var = m2 * nf / (nf - 1.0);
    let sd = var.sqrt();
    let stderr = if sd > 0.0 {
        ((m4 - m2 * m2).max(0.0) / nf).sqrt() / (2.0 * sd)
    } else {
        0.0
    };
    Ok(KernelSd {
        sd,
        stderr,
        draws,
        seed,
    })
}

/// Population standard deviation of all `n^2` entries, diagonal included.
pub fn entry_sd(k: &DMatrix<f64>) -> f64 {
    let len = k.len() as f64;
    let mean = k.iter().sum::<f64>() / len;
    (k.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len).sqrt()
}
