//! Local linearization of augmented-Lagrangian gradient descent–ascent.
//!
//! ```text
//! J_AL(η_x, η_d; C) = [[ I − η_x A_C,            −η_x Bᵀ          ],
//!                      [ η_d B (I − η_x A_C),    I − η_x η_d B Bᵀ ]]
//! gap = 1 − ρ(J_AL)
//! ```

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{self, Mat, Vector};

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty step grid")]
    EmptyGrid,
    #[error(transparent)]
    Numerics(#[from] numerics::NumericsError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub fn build_jacobian_al(a_c: &Mat, b: &Mat, eta_x: f64, eta_d: f64) -> Result<Mat, SpectralError> {
    let n = a_c.nrows();
    let m = b.nrows();
    if a_c.ncols() != n || b.ncols() != n {
        return Err(SpectralError::Shape(format!(
            "A_C is {}x{}, B is {}x{}",
            a_c.nrows(),
            a_c.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    let top_left = Mat::identity(n, n) - a_c * eta_x;
    let mut j = Mat::zeros(n + m, n + m);
    j.view_mut((0, 0), (n, n)).copy_from(&top_left);
    j.view_mut((0, n), (n, m)).copy_from(&(b.transpose() * -eta_x));
    j.view_mut((n, 0), (m, n)).copy_from(&(b * &top_left * eta_d));
    j.view_mut((n, n), (m, m))
        .copy_from(&(Mat::identity(m, m) - b * b.transpose() * (eta_x * eta_d)));
    Ok(j)
}

pub fn log_spaced(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => vec![],
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.log10(), hi.log10());
            (0..count)
                .map(|i| 10f64.powf(a + (b - a) * i as f64 / (count - 1) as f64))
                .collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepGrid {
    pub eta_x: Vec<f64>,
    pub eta_d: Vec<f64>,
}

impl Default for StepGrid {
    fn default() -> Self {
        Self::log(1e-8, 1.0, 40)
    }
}

impl StepGrid {
    pub fn log(lo: f64, hi: f64, count: usize) -> Self {
        let v = log_spaced(lo, hi, count);
        Self { eta_x: v.clone(), eta_d: v }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapPoint {
    pub eta_x: f64,
    pub eta_d: f64,
    pub rho: f64,
    pub gap: f64,
}

/// `ρ(J_AL)` at every grid point, ordered with `η_x` outer and `η_d` inner.
pub fn gap_surface(a_c: &Mat, b: &Mat, grid: &StepGrid) -> Result<Vec<GapPoint>, SpectralError> {
    if grid.eta_x.is_empty() || grid.eta_d.is_empty() {
        return Err(SpectralError::EmptyGrid);
    }
    build_jacobian_al(a_c, b, 0.0, 0.0)?;
    let pairs: Vec<(f64, f64)> = grid
        .eta_x
        .iter()
        .flat_map(|&ex| grid.eta_d.iter().map(move |&ed| (ex, ed)))
        .collect();
    pairs
        .par_iter()
        .map(|&(eta_x, eta_d)| {
            let j = build_jacobian_al(a_c, b, eta_x, eta_d)?;
            let rho = numerics::spectral_radius(&j)?;
            Ok(GapPoint { eta_x, eta_d, rho, gap: 1.0 - rho })
        })
        .collect()
}

/// Best stable grid point (`ρ < 1` strictly). Ties go to the larger `η_x`.
/// When no point is stable the result has `gap = −∞` and no steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapResult {
    pub gap: f64,
    pub best: Option<GapPoint>,
}

pub fn best_gap(points: &[GapPoint]) -> GapResult {
    let mut best: Option<GapPoint> = None;
    for p in points.iter().filter(|p| p.rho < 1.0) {
        let better = match best {
            None => true,
            Some(cur) => p.gap > cur.gap || (p.gap == cur.gap && p.eta_x > cur.eta_x),
        };
        if better {
            best = Some(*p);
        }
    }
    GapResult {
        gap: best.map_or(f64::NEG_INFINITY, |p| p.gap),
        best,
    }
}

pub fn contraction_gap(a_c: &Mat, b: &Mat, grid: &StepGrid) -> Result<GapResult, SpectralError> {
    Ok(best_gap(&gap_surface(a_c, b, grid)?))
}

/// Scalar-augmentation gap maximized jointly over `c` and the step grid.
pub fn scalar_augmentation_gap(a: &Mat, b: &Mat, c_grid: &[f64], grid: &StepGrid) -> Result<(f64, GapResult), SpectralError> {
    let mut best: Option<(f64, GapResult)> = None;
    for &c in c_grid {
        let a_c = a + b.transpose() * b * c;
        let r = contraction_gap(&a_c, b, grid)?;
        if best.as_ref().map_or(true, |(_, cur)| r.gap > cur.gap) {
            best = Some((c, r));
        }
    }
    best.ok_or(SpectralError::EmptyGrid)
}

/// Two-dimensional stiff example: one constraint direction a thousand
/// times stronger than the other.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StiffnessReport {
    #[serde(with = "crate::problem::serde_mat")]
    pub a: Mat,
    #[serde(with = "crate::problem::serde_mat")]
    pub b: Mat,
    /// `A + Bᵀ(1·I)B`.
    #[serde(with = "crate::problem::serde_mat")]
    pub unit_scalar_curvature: Mat,
    #[serde(with = "crate::problem::serde_mat")]
    pub c_matrix: Mat,
    /// `Bᵀ C_mat B`.
    #[serde(with = "crate::problem::serde_mat")]
    pub matrix_penalty: Mat,
    pub scalar_c_grid: Vec<f64>,
    pub scalar_best_c: f64,
    pub scalar: GapResult,
    pub matrix: GapResult,
    pub ratio: f64,
}

pub fn stiffness_data() -> (Mat, Mat, Mat) {
    let a = -Mat::identity(2, 2);
    let b = Mat::from_diagonal(&Vector::from_column_slice(&[1000.0, 1.0]));
    let c_mat = Mat::from_diagonal(&Vector::from_column_slice(&[8.96e-6, 8.96]));
    (a, b, c_mat)
}

/// Default scalar penalties searched: 13 log-spaced values in `[1, 1000]`.
pub fn default_scalar_grid() -> Vec<f64> {
    log_spaced(1.0, 1000.0, 13)
}

pub fn stiffness_example(grid: &StepGrid, c_grid: &[f64]) -> Result<StiffnessReport, SpectralError> {
    let (a, b, c_mat) = stiffness_data();
    let unit_scalar_curvature = &a + b.transpose() * &b;
    let matrix_penalty = b.transpose() * &c_mat * &b;
    let (scalar_best_c, scalar) = scalar_augmentation_gap(&a, &b, c_grid, grid)?;
    let matrix = contraction_gap(&(&a + &matrix_penalty), &b, grid)?;
    Ok(StiffnessReport {
        a,
        b,
        unit_scalar_curvature,
        c_matrix: c_mat,
        matrix_penalty,
        scalar_c_grid: c_grid.to_vec(),
        scalar_best_c,
        ratio: matrix.gap / scalar.gap,
        scalar,
        matrix,
    })
}

/// `α_M(r) = −max Re λ(S_M(r))` with `S_M(r) = [[−A_M, −Bᵀ], [rB, 0]]`.
pub fn margin_model(a_m: &Mat, b: &Mat, r: f64) -> Result<f64, SpectralError> {
    let n = a_m.nrows();
    let m = b.nrows();
    if a_m.ncols() != n || b.ncols() != n {
        return Err(SpectralError::Shape("A_M must be n x n and B m x n".into()));
    }
    let mut s = Mat::zeros(n + m, n + m);
    s.view_mut((0, 0), (n, n)).copy_from(&-a_m);
    s.view_mut((0, n), (n, m)).copy_from(&-b.transpose());
    s.view_mut((n, 0), (m, n)).copy_from(&(b * r));
    Ok(-numerics::spectrum(&s)?.max_real_part())
}

/// `min{(a/2)η_x, (b²/a)η_d}`.
pub fn scalar_margin_approx(a: f64, b: f64, eta_x: f64, eta_d: f64) -> f64 {
    (0.5 * a * eta_x).min(b * b / a * eta_d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginPoint {
    pub r: f64,
    pub eta_x: f64,
    pub eta_d: f64,
    pub rho: f64,
    pub gap: f64,
    pub approx: f64,
    pub rel_err: f64,
    pub alpha_m: f64,
}

/// Default step ratios: five log-spaced values in `[1e-3, 0.3]` and five in
/// `[2, 20]`.
pub fn default_ratios() -> Vec<f64> {
    let mut r = log_spaced(1e-3, 0.3, 5);
    r.extend(log_spaced(2.0, 20.0, 5));
    r
}

/// Compares `1 − ρ(J_AL)` against the scalar margin approximation for
/// `A_C = a`, `B = b` at `η_d = r η_x`.
pub fn margin_sweep(a: f64, b: f64, ratios: &[f64], eta_xs: &[f64]) -> Result<Vec<MarginPoint>, SpectralError> {
    let am = Mat::from_element(1, 1, a);
    let bm = Mat::from_element(1, 1, b);
    let mut out = Vec::with_capacity(ratios.len() * eta_xs.len());
    for &r in ratios {
        let alpha_m = margin_model(&am, &bm, r)?;
        for &eta_x in eta_xs {
            let eta_d = r * eta_x;
            let rho = numerics::spectral_radius(&build_jacobian_al(&am, &bm, eta_x, eta_d)?)?;
            let gap = 1.0 - rho;
            let approx = scalar_margin_approx(a, b, eta_x, eta_d);
            out.push(MarginPoint {
                r,
                eta_x,
                eta_d,
                rho,
                gap,
                approx,
                rel_err: (gap - approx).abs() / gap.abs(),
                alpha_m,
            });
        }
    }
    Ok(out)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), SpectralError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), SpectralError> {
    let mut f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}
