//! Dense matrix primitives used by every other module.
//!
//! All problem sizes here are tiny (a handful of rows), so everything is
//! backed by nalgebra's dense SVD, symmetric eigensolver and real Schur
//! form. Inputs are validated for finiteness before any decomposition.

use nalgebra::{DMatrix, DVector, Schur, SymmetricEigen};
use num_complex::Complex64;
use thiserror::Error;

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Default relative cutoff for singular values kept by [`pseudoinverse`].
pub const DEFAULT_RANK_TOL: f64 = 1e-10;
/// Default relative cutoff separating "zero" from positive eigenvalues.
pub const DEFAULT_ZERO_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("input matrix has non-finite entries")]
    InvalidInput,
    #[error("expected a square matrix, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is rank deficient (sigma_max = {sigma_max:e}, sigma_min = {sigma_min:e})")]
    RankDeficient { sigma_max: f64, sigma_min: f64 },
    #[error("no eigenvalue above the zero threshold")]
    AllZeroSpectrum,
    #[error("eigenvalue iteration did not converge")]
    NoConvergence,
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// Eigenvalues of a square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub eigenvalues: Vec<Complex64>,
    /// Set when the spectrum came from a symmetric decomposition; the
    /// eigenvalues are then real and sorted ascending.
    pub symmetric: bool,
}

impl Spectrum {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn max_modulus(&self) -> f64 {
        self.eigenvalues.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn max_real_part(&self) -> f64 {
        self.eigenvalues
            .iter()
            .map(|z| z.re)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Real parts, only meaningful for symmetric spectra.
    pub fn real(&self) -> Vec<f64> {
        self.eigenvalues.iter().map(|z| z.re).collect()
    }
}

pub fn ensure_finite(a: &Mat) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NumericsError::InvalidInput)
    }
}

fn ensure_square(a: &Mat) -> Result<()> {
    if a.is_square() {
        Ok(())
    } else {
        Err(NumericsError::NotSquare {
            rows: a.nrows(),
            cols: a.ncols(),
        })
    }
}

/// `(A + Aᵀ) / 2`.
pub fn symmetrize(a: &Mat) -> Mat {
    (a + a.transpose()) * 0.5
}

/// Singular values in descending order.
pub fn singular_values(a: &Mat) -> Result<Vec<f64>> {
    ensure_finite(a)?;
    if a.is_empty() {
        return Ok(Vec::new());
    }
    let mut s: Vec<f64> = a.singular_values().iter().copied().collect();
    s.sort_by(|x, y| y.total_cmp(x));
    Ok(s)
}

/// Largest singular value (induced 2-norm).
pub fn spectral_norm(a: &Mat) -> Result<f64> {
    Ok(singular_values(a)?.first().copied().unwrap_or(0.0))
}

/// Moore–Penrose pseudoinverse by truncated SVD. Singular values are kept
/// iff `σ_i > rank_tol · σ_max`.
pub fn pseudoinverse(a: &Mat, rank_tol: f64) -> Result<Mat> {
    ensure_finite(a)?;
    let svd = a.clone().svd(true, true);
    let sigma = &svd.singular_values;
    let sigma_max = sigma.iter().copied().fold(0.0, f64::max);
    let sigma_min = sigma.iter().copied().fold(f64::INFINITY, f64::min);
    let cutoff = rank_tol * sigma_max;
    if sigma_max == 0.0 || sigma.iter().all(|&s| s <= cutoff) {
        return Err(NumericsError::RankDeficient {
            sigma_max,
            sigma_min: if sigma_min.is_finite() { sigma_min } else { 0.0 },
        });
    }
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let mut pinv = Mat::zeros(a.ncols(), a.nrows());
    for (k, &s) in sigma.iter().enumerate() {
        if s > cutoff {
            // pinv += v_k u_kᵀ / s
            pinv += (v_t.row(k).transpose() * u.column(k).transpose()) / s;
        }
    }
    Ok(pinv)
}

/// Number of singular values above `rank_tol · σ_max`.
pub fn numerical_rank(a: &Mat, rank_tol: f64) -> Result<usize> {
    let s = singular_values(a)?;
    let cutoff = rank_tol * s.first().copied().unwrap_or(0.0);
    Ok(s.iter().filter(|&&v| v > cutoff && v > 0.0).count())
}

/// Eigen-decomposition of the symmetric part of `a`; eigenvalues ascending.
pub fn symmetric_eigen(a: &Mat) -> Result<(Vec<f64>, Mat)> {
    ensure_finite(a)?;
    ensure_square(a)?;
    let eig = SymmetricEigen::new(symmetrize(a));
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = Mat::zeros(a.nrows(), a.ncols());
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok((values, vectors))
}

pub fn symmetric_spectrum(a: &Mat) -> Result<Spectrum> {
    let (values, _) = symmetric_eigen(a)?;
    Ok(Spectrum {
        eigenvalues: values.into_iter().map(|v| Complex64::new(v, 0.0)).collect(),
        symmetric: true,
    })
}

/// Eigenvalues of a general square matrix from its real Schur form.
pub fn spectrum(a: &Mat) -> Result<Spectrum> {
    ensure_finite(a)?;
    ensure_square(a)?;
    if a.is_empty() {
        return Ok(Spectrum {
            eigenvalues: Vec::new(),
            symmetric: false,
        });
    }
    let schur = Schur::try_new(a.clone(), f64::EPSILON, 10_000).ok_or(NumericsError::NoConvergence)?;
    let eigenvalues = schur.complex_eigenvalues().iter().copied().collect();
    Ok(Spectrum {
        eigenvalues,
        symmetric: false,
    })
}

/// Smallest eigenvalue of the symmetric part of `a`.
pub fn lambda_min(a: &Mat) -> Result<f64> {
    let (values, _) = symmetric_eigen(a)?;
    values.first().copied().ok_or(NumericsError::InvalidInput)
}

pub fn lambda_max(a: &Mat) -> Result<f64> {
    let (values, _) = symmetric_eigen(a)?;
    values.last().copied().ok_or(NumericsError::InvalidInput)
}

/// Smallest eigenvalue strictly above `zero_tol · max|λ|`.
pub fn lambda_min_positive(a: &Mat, zero_tol: f64) -> Result<f64> {
    let (values, _) = symmetric_eigen(a)?;
    let scale = values.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let threshold = zero_tol * scale;
    values
        .into_iter()
        .find(|&v| v > threshold && v > 0.0)
        .ok_or(NumericsError::AllZeroSpectrum)
}

/// Spectral radius `max |λ|` over the (possibly complex) spectrum.
pub fn spectral_radius(a: &Mat) -> Result<f64> {
    Ok(spectrum(a)?.max_modulus())
}

/// Condition number `σ_max / σ_min` (infinite when singular).
pub fn condition_number(a: &Mat) -> Result<f64> {
    let s = singular_values(a)?;
    match (s.first(), s.last()) {
        (Some(&hi), Some(&lo)) if lo > 0.0 => Ok(hi / lo),
        (Some(_), Some(_)) => Ok(f64::INFINITY),
        _ => Ok(1.0),
    }
}

pub fn is_symmetric(a: &Mat, tol: f64) -> bool {
    a.is_square() && (a - a.transpose()).amax() <= tol
}
