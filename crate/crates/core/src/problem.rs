//! Nonlinear equality-constrained test problems with a known KKT point.
//!
//! Each instance has the form `min f(x) s.t. h(x) = 0` with
//!
//! ```text
//! f(x) = ½ xᵀH₀x + qᵀx + c₁ sin(2x₁) − c₂ cos(x₂x₃) + c₃x₃⁴ − c₄ sin(x₁+x₃)
//! h(x) = B⋆ u + ε_nl A_nl φ(u),   u = x − x⋆
//! ```
//!
//! where `B⋆ = U Σ Vᵀ` has a prescribed condition number and `φ` collects
//! quadratic monomials of `u` (squares first, then products of coordinate
//! pairs), so `h(x⋆) = 0` and `J_h(x⋆) = B⋆` exactly. The linear term `q`
//! is chosen so that `∇f(x⋆) + B⋆ᵀμ⋆ = 0`.
//!
//! All randomness comes from a `ChaCha8Rng` seeded with the instance seed,
//! which is portable across platforms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

use crate::numerics::{self, Mat, Vector};

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("condition level must be >= 1, got {0}")]
    InvalidCondition(f64),
    #[error("constraint dimension m = {m} must be >= primal dimension n = {n} (and n >= 1)")]
    DimensionError { n: usize, m: usize },
    #[error("invalid generator setting: {0}")]
    InvalidConfig(String),
    #[error("malformed instance: {0}")]
    Malformed(String),
    #[error(transparent)]
    Numerics(#[from] numerics::NumericsError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Knobs of the random generator that the problem structure leaves open.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub n: usize,
    pub m: usize,
    pub eps_nl: f64,
    /// Range for the objective coefficients `c₁..c₄`.
    pub coef_range: (f64, f64),
    /// Largest magnitude of an eigenvalue of `H₀`.
    pub h0_eig_max: f64,
    /// Eigenvalues of `H₀` are kept out of `(−gap, gap)`.
    pub h0_eig_gap: f64,
    /// Standard deviation of the Gaussian draw of `x⋆`.
    pub x_star_scale: f64,
    /// Standard deviation of the Gaussian draw of `μ⋆`.
    pub mu_star_scale: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n: 3,
            m: 5,
            eps_nl: 0.1,
            coef_range: (0.2, 1.0),
            h0_eig_max: 2.0,
            h0_eig_gap: 0.1,
            x_star_scale: 1.0,
            mu_star_scale: 1.0,
        }
    }
}

/// A generated instance. Every field needed to evaluate the oracles is
/// stored, so a serialized instance replays without the RNG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemInstance {
    pub n: usize,
    pub m: usize,
    pub kappa_b: f64,
    pub seed: u64,
    #[serde(with = "serde_mat")]
    pub h0: Mat,
    #[serde(with = "serde_vec")]
    pub q: Vector,
    /// `c₁..c₄`.
    pub coef: [f64; 4],
    #[serde(with = "serde_mat")]
    pub u: Mat,
    pub sigma: Vec<f64>,
    #[serde(with = "serde_mat")]
    pub v: Mat,
    #[serde(with = "serde_mat")]
    pub b_star: Mat,
    #[serde(with = "serde_mat")]
    pub a_nl: Mat,
    pub eps_nl: f64,
    #[serde(with = "serde_vec")]
    pub x_star: Vector,
    #[serde(with = "serde_vec")]
    pub mu_star: Vector,
}

/// All oracle values at one point.
#[derive(Debug, Clone)]
pub struct OracleOutput {
    pub f_value: f64,
    pub grad_f: Vector,
    pub h_value: Vector,
    pub jacobian_h: Mat,
    pub hess_lagrangian: Mat,
}

/// Singular values `κ^{-i/(n-1)}`, i = 0..n−1; for n = 3 this is
/// `(1, κ^{-1/2}, κ^{-1})`.
pub fn singular_profile(kappa_b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| kappa_b.powf(-(i as f64) / (n as f64 - 1.0)))
        .collect()
}

/// Index pairs `(i, j)` of the monomials `u_i u_j` in `φ`: the `n` squares,
/// then `m − n` products ordered by index distance (`u₁u₂, u₂u₃, …,
/// u₁u₃, …`), cycling if more are needed.
pub fn phi_terms(n: usize, m: usize) -> Vec<(usize, usize)> {
    let mut terms: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
    let mut pairs = Vec::new();
    for d in 1..n {
        for i in 0..n - d {
            pairs.push((i, i + d));
        }
    }
    if pairs.is_empty() {
        pairs = terms.clone();
    }
    terms.extend(pairs.iter().cycle().take(m - n).copied());
    terms
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    // row-major fill so the stream order is explicit
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Mat::from_row_slice(rows, cols, &data)
}

fn gaussian_vector(rng: &mut ChaCha8Rng, len: usize) -> Vector {
    Vector::from_iterator(len, (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Orthonormal columns from the QR factor of a Gaussian matrix.
fn random_orthonormal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    let g = gaussian_matrix(rng, rows, cols);
    let q = g.qr().q();
    q.columns(0, cols).into_owned()
}

pub fn generate_instance(kappa_b: f64, seed: u64, cfg: &GeneratorConfig) -> Result<ProblemInstance, ProblemError> {
    if !(kappa_b >= 1.0) || !kappa_b.is_finite() {
        return Err(ProblemError::InvalidCondition(kappa_b));
    }
    let (n, m) = (cfg.n, cfg.m);
    if n == 0 || m < n {
        return Err(ProblemError::DimensionError { n, m });
    }
    let (lo, hi) = cfg.coef_range;
    if !(lo > 0.0 && hi >= lo) {
        return Err(ProblemError::InvalidConfig(format!("coef_range must satisfy 0 < lo <= hi, got ({lo}, {hi})")));
    }
    if !(cfg.h0_eig_gap > 0.0 && cfg.h0_eig_max > cfg.h0_eig_gap) {
        return Err(ProblemError::InvalidConfig("need 0 < h0_eig_gap < h0_eig_max".into()));
    }
    if !(cfg.x_star_scale >= 0.0 && cfg.x_star_scale.is_finite() && cfg.mu_star_scale >= 0.0 && cfg.mu_star_scale.is_finite()) {
        return Err(ProblemError::InvalidConfig("solution scales must be finite and >= 0".into()));
    }
    if !cfg.eps_nl.is_finite() || cfg.eps_nl < 0.0 {
        return Err(ProblemError::InvalidConfig(format!("eps_nl must be finite and >= 0, got {}", cfg.eps_nl)));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let u = random_orthonormal(&mut rng, m, n);
    let v = random_orthonormal(&mut rng, n, n);
    let sigma = singular_profile(kappa_b, n);
    let b_star = &u * Mat::from_diagonal(&Vector::from_column_slice(&sigma)) * v.transpose();

    let a_raw = gaussian_matrix(&mut rng, m, m);
    let a_nl = &a_raw / numerics::spectral_norm(&a_raw)?;

    let x_star = gaussian_vector(&mut rng, n) * cfg.x_star_scale;
    let mu_star = gaussian_vector(&mut rng, m) * cfg.mu_star_scale;

    // H₀ = Q diag(λ) Qᵀ with |λ| ∈ [gap, max]; first eigenvalue negative,
    // second positive, remaining signs random.
    let q_h = random_orthonormal(&mut rng, n, n);
    let eigs: Vec<f64> = (0..n)
        .map(|i| {
            let mag = rng.random_range(cfg.h0_eig_gap..=cfg.h0_eig_max);
            let negative = match i {
                0 => true,
                1 => false,
                _ => rng.random_bool(0.5),
            };
            if negative {
                -mag
            } else {
                mag
            }
        })
        .collect();
    let h0 = numerics::symmetrize(&(&q_h * Mat::from_diagonal(&Vector::from_vec(eigs)) * q_h.transpose()));

    let mut coef = [0.0; 4];
    for c in coef.iter_mut() {
        *c = rng.random_range(lo..=hi);
    }

    let mut inst = ProblemInstance {
        n,
        m,
        kappa_b,
        seed,
        h0,
        q: Vector::zeros(n),
        coef,
        u,
        sigma,
        v,
        b_star,
        a_nl,
        eps_nl: cfg.eps_nl,
        x_star,
        mu_star,
    };
    let grad_nl = inst.nonlinear_grad(&inst.x_star);
    inst.q = -(&inst.h0 * &inst.x_star) - grad_nl - inst.b_star.transpose() * &inst.mu_star;
    Ok(inst)
}

impl ProblemInstance {
    fn nonlinear_value(&self, x: &Vector) -> f64 {
        let [c1, c2, c3, c4] = self.coef;
        let mut val = c1 * (2.0 * x[0]).sin();
        if self.n >= 3 {
            val += -c2 * (x[1] * x[2]).cos() + c3 * x[2].powi(4) - c4 * (x[0] + x[2]).sin();
        }
        val
    }

    fn nonlinear_grad(&self, x: &Vector) -> Vector {
        let [c1, c2, c3, c4] = self.coef;
        let mut g = Vector::zeros(self.n);
        g[0] = 2.0 * c1 * (2.0 * x[0]).cos();
        if self.n >= 3 {
            let s23 = (x[1] * x[2]).sin();
            let c13 = (x[0] + x[2]).cos();
            g[0] -= c4 * c13;
            g[1] += c2 * s23 * x[2];
            g[2] += c2 * s23 * x[1] + 4.0 * c3 * x[2].powi(3) - c4 * c13;
        }
        g
    }

    fn nonlinear_hess(&self, x: &Vector) -> Mat {
        let [c1, c2, c3, c4] = self.coef;
        let mut hm = Mat::zeros(self.n, self.n);
        hm[(0, 0)] = -4.0 * c1 * (2.0 * x[0]).sin();
        if self.n >= 3 {
            let (x1, x2, x3) = (x[0], x[1], x[2]);
            let p = x2 * x3;
            let (sp, cp) = (p.sin(), p.cos());
            let s13 = (x1 + x3).sin();
            hm[(0, 0)] += c4 * s13;
            hm[(0, 2)] += c4 * s13;
            hm[(2, 0)] += c4 * s13;
            hm[(1, 1)] += c2 * cp * x3 * x3;
            let off = c2 * (cp * x2 * x3 + sp);
            hm[(1, 2)] += off;
            hm[(2, 1)] += off;
            hm[(2, 2)] += c2 * cp * x2 * x2 + 12.0 * c3 * x3 * x3 + c4 * s13;
        }
        hm
    }

    fn displacement(&self, x: &Vector) -> Vector {
        x - &self.x_star
    }

    fn phi(&self, u: &Vector) -> Vector {
        let terms = phi_terms(self.n, self.m);
        Vector::from_iterator(self.m, terms.iter().map(|&(i, j)| u[i] * u[j]))
    }

    fn phi_jacobian(&self, u: &Vector) -> Mat {
        let terms = phi_terms(self.n, self.m);
        let mut j = Mat::zeros(self.m, self.n);
        for (row, &(a, b)) in terms.iter().enumerate() {
            if a == b {
                j[(row, a)] = 2.0 * u[a];
            } else {
                j[(row, a)] += u[b];
                j[(row, b)] += u[a];
            }
        }
        j
    }

    pub fn eval_f(&self, x: &Vector) -> f64 {
        0.5 * x.dot(&(&self.h0 * x)) + self.q.dot(x) + self.nonlinear_value(x)
    }

    pub fn eval_grad_f(&self, x: &Vector) -> Vector {
        &self.h0 * x + &self.q + self.nonlinear_grad(x)
    }

    pub fn eval_hess_f(&self, x: &Vector) -> Mat {
        &self.h0 + self.nonlinear_hess(x)
    }

    pub fn eval_h(&self, x: &Vector) -> Vector {
        let u = self.displacement(x);
        &self.b_star * &u + (&self.a_nl * self.phi(&u)) * self.eps_nl
    }

    pub fn eval_jac_h(&self, x: &Vector) -> Mat {
        let u = self.displacement(x);
        &self.b_star + (&self.a_nl * self.phi_jacobian(&u)) * self.eps_nl
    }

    /// `∇²f(x) + Σ_k μ_k ∇²h_k(x)`, symmetrized.
    pub fn eval_hess_lagrangian(&self, x: &Vector, mu: &Vector) -> Mat {
        let mut hess = self.eval_hess_f(x);
        // Σ_k μ_k ∇²h_k = ε Σ_l (A_nlᵀμ)_l ∇²φ_l, and ∇²φ_l is constant.
        let w = self.a_nl.transpose() * mu;
        for (l, &(a, b)) in phi_terms(self.n, self.m).iter().enumerate() {
            let s = self.eps_nl * w[l];
            if a == b {
                hess[(a, a)] += 2.0 * s;
            } else {
                hess[(a, b)] += s;
                hess[(b, a)] += s;
            }
        }
        numerics::symmetrize(&hess)
    }

    pub fn oracle(&self, x: &Vector, mu: &Vector) -> OracleOutput {
        OracleOutput {
            f_value: self.eval_f(x),
            grad_f: self.eval_grad_f(x),
            h_value: self.eval_h(x),
            jacobian_h: self.eval_jac_h(x),
            hess_lagrangian: self.eval_hess_lagrangian(x, mu),
        }
    }

    /// `‖∇f(x) + J_h(x)ᵀμ‖`.
    pub fn stationarity(&self, x: &Vector, mu: &Vector) -> f64 {
        (self.eval_grad_f(x) + self.eval_jac_h(x).transpose() * mu).norm()
    }

    pub fn to_json(&self) -> Result<String, ProblemError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, ProblemError> {
        let inst: Self = serde_json::from_str(s)?;
        inst.validate()?;
        Ok(inst)
    }

    pub fn save(&self, path: &Path) -> Result<(), ProblemError> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ProblemError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    fn validate(&self) -> Result<(), ProblemError> {
        let (n, m) = (self.n, self.m);
        if n == 0 || m < n {
            return Err(ProblemError::DimensionError { n, m });
        }
        let shape_ok = self.h0.shape() == (n, n)
            && self.q.len() == n
            && self.u.shape() == (m, n)
            && self.sigma.len() == n
            && self.v.shape() == (n, n)
            && self.b_star.shape() == (m, n)
            && self.a_nl.shape() == (m, m)
            && self.x_star.len() == n
            && self.mu_star.len() == m;
        if !shape_ok {
            return Err(ProblemError::Malformed("field shapes disagree with (n, m)".into()));
        }
        let all_finite = [&self.h0, &self.u, &self.v, &self.b_star, &self.a_nl]
            .iter()
            .all(|a| a.iter().all(|v| v.is_finite()))
            && self.q.iter().chain(self.x_star.iter()).chain(self.mu_star.iter()).all(|v| v.is_finite());
        if !all_finite {
            return Err(ProblemError::Malformed("non-finite entries".into()));
        }
        Ok(())
    }
}

/// Matrices as nested row arrays.
pub mod serde_mat {
    use super::Mat;
    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};

    pub fn to_rows(m: &Mat) -> Vec<Vec<f64>> {
        m.row_iter().map(|r| r.iter().copied().collect()).collect()
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Option<Mat> {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != ncols) {
            return None;
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Some(Mat::from_row_slice(nrows, ncols, &flat))
    }

    pub fn serialize<S: Serializer>(m: &Mat, s: S) -> Result<S::Ok, S::Error> {
        to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Mat, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        from_rows(&rows).ok_or_else(|| D::Error::custom("ragged matrix rows"))
    }
}

pub mod serde_vec {
    use super::Vector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Vector, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vector, D::Error> {
        Ok(Vector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(kappa: f64, seed: u64) -> ProblemInstance {
        generate_instance(kappa, seed, &GeneratorConfig::default()).unwrap()
    }

    #[test]
    fn isotropic_singular_values() {
        assert_eq!(inst(1.0, 7).sigma, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn kappa_13_profile() {
        let s = inst(13.0, 1).sigma;
        assert_eq!(s[0], 1.0);
        assert!((s[1] - 0.277_350_098_112_614_5).abs() < 1e-12);
        assert!((s[2] - 1.0 / 13.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_condition_and_dims() {
        assert!(matches!(
            generate_instance(0.5, 1, &GeneratorConfig::default()),
            Err(ProblemError::InvalidCondition(_))
        ));
        let cfg = GeneratorConfig { n: 4, m: 3, ..Default::default() };
        assert!(matches!(generate_instance(2.0, 1, &cfg), Err(ProblemError::DimensionError { .. })));
    }

    #[test]
    fn kkt_point_is_feasible_and_stationary() {
        for seed in 0..10 {
            let p = inst(5.0, seed);
            assert!(p.eval_h(&p.x_star).norm() == 0.0);
            assert!((p.eval_jac_h(&p.x_star) - &p.b_star).amax() < 1e-12);
            assert!(p.stationarity(&p.x_star, &p.mu_star) <= 1e-10);
            let g = p.eval_grad_f(&p.x_star);
            assert!((g + p.b_star.transpose() * &p.mu_star).norm() <= 1e-10);
        }
    }

    #[test]
    fn h0_is_indefinite() {
        for seed in 0..10 {
            let p = inst(2.0, seed);
            let (vals, _) = numerics::symmetric_eigen(&p.h0).unwrap();
            assert!(vals[0] < 0.0 && *vals.last().unwrap() > 0.0);
        }
    }

    #[test]
    fn linear_case_moves_along_first_column() {
        let cfg = GeneratorConfig { eps_nl: 0.0, ..Default::default() };
        let p = generate_instance(3.0, 4, &cfg).unwrap();
        let mut x = p.x_star.clone();
        x[0] += 1.0;
        assert!((p.eval_h(&x) - p.b_star.column(0)).amax() < 1e-14);
    }

    #[test]
    fn phi_layout_matches_five_by_three() {
        assert_eq!(phi_terms(3, 5), vec![(0, 0), (1, 1), (2, 2), (0, 1), (1, 2)]);
        assert_eq!(phi_terms(2, 2), vec![(0, 0), (1, 1)]);
        assert_eq!(phi_terms(1, 3), vec![(0, 0), (0, 0), (0, 0)]);
        assert_eq!(phi_terms(3, 7).len(), 7);
    }

    #[test]
    fn same_seed_same_instance() {
        assert_eq!(inst(8.0, 42), inst(8.0, 42));
        assert_ne!(inst(8.0, 42), inst(8.0, 43));
    }

    #[test]
    fn json_round_trip_preserves_oracles() {
        let p = inst(3.0, 9);
        let back = ProblemInstance::from_json(&p.to_json().unwrap()).unwrap();
        let x = &p.x_star + Vector::from_element(3, 0.3);
        assert_eq!(p.eval_f(&x), back.eval_f(&x));
        assert_eq!(p.eval_h(&x), back.eval_h(&x));
    }

    #[test]
    fn small_dimensions_drop_missing_terms() {
        let cfg = GeneratorConfig { n: 2, m: 3, ..Default::default() };
        let p = generate_instance(2.0, 3, &cfg).unwrap();
        assert!(p.stationarity(&p.x_star, &p.mu_star) <= 1e-10);
        let cfg = GeneratorConfig { n: 1, m: 2, ..Default::default() };
        let p = generate_instance(1.0, 3, &cfg).unwrap();
        assert_eq!(p.eval_hess_lagrangian(&p.x_star, &p.mu_star).shape(), (1, 1));
    }
}
