//! Step-based first-order baselines on the Lagrangian saddle operator.
//!
//! Sign convention: `F(x, μ) = (∇f(x) + J_h(x)ᵀμ, −h(x))`, so a step
//! `z − γF(z)` descends in `x` and ascends in `μ`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    check_iterate, compare_runs, validate_thresholds, DynamicsError, FailureReason, Initialization, RunRecord, StepInfo,
    TrajectoryRecorder,
};
use crate::numerics::{self, Vector};
use crate::problem::ProblemInstance;

#[derive(Debug, Clone, Copy)]
pub struct SaddleOperator<'a> {
    pub inst: &'a ProblemInstance,
}

impl<'a> SaddleOperator<'a> {
    pub fn new(inst: &'a ProblemInstance) -> Self {
        Self { inst }
    }

    pub fn n(&self) -> usize {
        self.inst.n
    }

    pub fn eval(&self, x: &Vector, mu: &Vector) -> (Vector, Vector) {
        let b = self.inst.eval_jac_h(x);
        (self.inst.eval_grad_f(x) + b.transpose() * mu, -self.inst.eval_h(x))
    }

    /// `F` on the stacked point `z = (x, μ)`.
    pub fn eval_stacked(&self, z: &Vector) -> Vector {
        let (x, mu) = self.split(z);
        let (gx, gm) = self.eval(&x, &mu);
        stack(&gx, &gm)
    }

    pub fn split(&self, z: &Vector) -> (Vector, Vector) {
        let n = self.n();
        (z.rows(0, n).into_owned(), z.rows(n, z.len() - n).into_owned())
    }
}

pub fn stack(x: &Vector, mu: &Vector) -> Vector {
    let mut z = Vector::zeros(x.len() + mu.len());
    z.rows_mut(0, x.len()).copy_from(x);
    z.rows_mut(x.len(), mu.len()).copy_from(mu);
    z
}

fn checked(t: usize, op: &SaddleOperator, z: Vector) -> Result<Vector, DynamicsError> {
    let (x, mu) = op.split(&z);
    check_iterate(t, &x, &mu)?;
    Ok(z)
}

/// `z⁺ = z − 2γF(z_t) + γF(z_{t−1})`.
pub fn step_ogda(op: &SaddleOperator, t: usize, z: &Vector, z_prev: &Vector, gamma: f64) -> Result<Vector, DynamicsError> {
    let next = z - op.eval_stacked(z) * (2.0 * gamma) + op.eval_stacked(z_prev) * gamma;
    checked(t + 1, op, next)
}

/// `z̄ = z − γF(z)`, `z⁺ = z − γF(z̄)`.
pub fn step_eg(op: &SaddleOperator, t: usize, z: &Vector, gamma: f64) -> Result<Vector, DynamicsError> {
    let half = z - op.eval_stacked(z) * gamma;
    let next = z - op.eval_stacked(&half) * gamma;
    checked(t + 1, op, next)
}

/// Simultaneous `z⁺ = z − γF(z)`.
pub fn step_gda(op: &SaddleOperator, t: usize, z: &Vector, gamma: f64) -> Result<Vector, DynamicsError> {
    let next = z - op.eval_stacked(z) * gamma;
    checked(t + 1, op, next)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PdhgState {
    pub x: Vector,
    pub x_bar: Vector,
    pub mu: Vector,
}

/// `μ⁺ = μ + σh(x̄)`, `x⁺ = x − τ(∇f(x) + J_h(x)ᵀμ⁺)`, `x̄⁺ = 2x⁺ − x`.
pub fn step_pdhg(inst: &ProblemInstance, t: usize, s: &PdhgState, tau: f64, sigma: f64) -> Result<PdhgState, DynamicsError> {
    let mu = &s.mu + inst.eval_h(&s.x_bar) * sigma;
    let b = inst.eval_jac_h(&s.x);
    let x = &s.x - (inst.eval_grad_f(&s.x) + b.transpose() * &mu) * tau;
    let x_bar = &x * 2.0 - &s.x;
    check_iterate(t + 1, &x, &mu)?;
    Ok(PdhgState { x, x_bar, mu })
}

/// Gradient step on `f + μᵀh + (ρ/2)‖h‖²`, then `μ⁺ = μ + ρh(x⁺)`.
pub fn step_lin_al(
    inst: &ProblemInstance,
    t: usize,
    x: &Vector,
    mu: &Vector,
    tau: f64,
    rho: f64,
) -> Result<(Vector, Vector), DynamicsError> {
    let h = inst.eval_h(x);
    let b = inst.eval_jac_h(x);
    let x_next = x - (inst.eval_grad_f(x) + b.transpose() * (mu + &h * rho)) * tau;
    let mu_next = mu + inst.eval_h(&x_next) * rho;
    check_iterate(t + 1, &x_next, &mu_next)?;
    Ok((x_next, mu_next))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum BaselineStep {
    Ogda { gamma: f64 },
    Eg { gamma: f64 },
    Gda { gamma: f64 },
    Pdhg { tau: f64, sigma: f64 },
    LinAl { tau: f64, rho: f64 },
}

impl BaselineStep {
    fn info(&self) -> StepInfo {
        let (eta_x, eta_d) = match *self {
            Self::Ogda { gamma } | Self::Eg { gamma } | Self::Gda { gamma } => (gamma, gamma),
            Self::Pdhg { tau, sigma } => (tau, sigma),
            Self::LinAl { tau, rho } => (tau, rho),
        };
        StepInfo { eta_x, eta_d, ..Default::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    Ogda,
    Eg,
    Gda,
    Pdhg,
    LinAl,
}

impl BaselineKind {
    pub fn id(self) -> &'static str {
        match self {
            Self::Ogda => "ogda",
            Self::Eg => "eg",
            Self::Gda => "gda",
            Self::Pdhg => "pdhg",
            Self::LinAl => "lin-al",
        }
    }
}

/// Runs one baseline from `init` (OGDA uses `(x₋₁, μ₀)` as its previous point).
pub fn run_baseline(
    inst: &ProblemInstance,
    method: &str,
    instance_id: &str,
    step: BaselineStep,
    init: &Initialization,
    budget: usize,
    thresholds: &[f64],
) -> Result<RunRecord, DynamicsError> {
    if budget == 0 {
        return Err(DynamicsError::InvalidBudget);
    }
    validate_thresholds(thresholds)?;
    let op = SaddleOperator::new(inst);
    let mut rec = TrajectoryRecorder::new(inst, thresholds);
    let mut x = init.x0.clone();
    let mut mu = init.mu0.clone();
    let mut z_prev = stack(&init.x_prev, &init.mu0);
    let mut x_bar = init.x0.clone();
    let mut t = 0;

    let failure = loop {
        if rec.observe(t, &x, &mu) {
            break None;
        }
        if t >= budget {
            break Some(FailureReason::BudgetExhausted);
        }
        rec.annotate(step.info());
        let out = match step {
            BaselineStep::Ogda { gamma } => {
                let z = stack(&x, &mu);
                step_ogda(&op, t, &z, &z_prev, gamma).map(|next| {
                    z_prev = z;
                    op.split(&next)
                })
            }
            BaselineStep::Eg { gamma } => step_eg(&op, t, &stack(&x, &mu), gamma).map(|z| op.split(&z)),
            BaselineStep::Gda { gamma } => step_gda(&op, t, &stack(&x, &mu), gamma).map(|z| op.split(&z)),
            BaselineStep::Pdhg { tau, sigma } => {
                let s = PdhgState { x: x.clone(), x_bar: x_bar.clone(), mu: mu.clone() };
                step_pdhg(inst, t, &s, tau, sigma).map(|s| {
                    x_bar = s.x_bar;
                    (s.x, s.mu)
                })
            }
            BaselineStep::LinAl { tau, rho } => step_lin_al(inst, t, &x, &mu, tau, rho),
        };
        match out {
            Ok((xn, mn)) => {
                x = xn;
                mu = mn;
                t += 1;
            }
            Err(DynamicsError::Diverged { t, quantity }) => break Some(FailureReason::Diverged { t, quantity }),
            Err(e) => return Err(e),
        }
    };
    Ok(rec.finish(method, instance_id, failure))
}

/// Step-parameter grids used to tune each baseline per instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineGrid {
    /// Values for `γ`, `τ` and `σ`.
    pub steps: Vec<f64>,
    /// Penalty values `ρ` for the linearized augmented Lagrangian.
    pub penalties: Vec<f64>,
}

impl Default for BaselineGrid {
    fn default() -> Self {
        Self {
            steps: [-3.0, -2.5, -2.0, -1.5, -1.0].iter().map(|e| 10f64.powf(*e)).collect(),
            penalties: [-1.0, -0.5, 0.0, 0.5, 1.0].iter().map(|e| 10f64.powf(*e)).collect(),
        }
    }
}

impl BaselineGrid {
    /// Candidate steps for `kind`. PDHG pairs violating `τσ‖J_h(x₀)‖² < 1`
    /// are dropped.
    pub fn candidates(&self, kind: BaselineKind, inst: &ProblemInstance, x0: &Vector) -> Vec<BaselineStep> {
        match kind {
            BaselineKind::Ogda => self.steps.iter().map(|&gamma| BaselineStep::Ogda { gamma }).collect(),
            BaselineKind::Eg => self.steps.iter().map(|&gamma| BaselineStep::Eg { gamma }).collect(),
            BaselineKind::Gda => self.steps.iter().map(|&gamma| BaselineStep::Gda { gamma }).collect(),
            BaselineKind::Pdhg => {
                let j_sq = numerics::spectral_norm(&inst.eval_jac_h(x0)).map_or(f64::INFINITY, |v| v * v);
                self.steps
                    .iter()
                    .flat_map(|&tau| self.steps.iter().map(move |&sigma| (tau, sigma)))
                    .filter(|(tau, sigma)| tau * sigma * j_sq < 1.0)
                    .map(|(tau, sigma)| BaselineStep::Pdhg { tau, sigma })
                    .collect()
            }
            BaselineKind::LinAl => self
                .steps
                .iter()
                .flat_map(|&tau| self.penalties.iter().map(move |&rho| BaselineStep::LinAl { tau, rho }))
                .collect(),
        }
    }
}

/// Runs every grid candidate and keeps the best run (see
/// [`compare_runs`]); ties go to the earlier candidate.
pub fn tune_baseline(
    inst: &ProblemInstance,
    kind: BaselineKind,
    instance_id: &str,
    init: &Initialization,
    budget: usize,
    thresholds: &[f64],
    grid: &BaselineGrid,
) -> Result<(RunRecord, BaselineStep), DynamicsError> {
    let candidates = grid.candidates(kind, inst, &init.x0);
    if candidates.is_empty() {
        return Err(DynamicsError::InvalidSteps { eta_x: 0.0, eta_d: 0.0 });
    }
    let runs: Vec<Result<RunRecord, DynamicsError>> = candidates
        .par_iter()
        .map(|&step| run_baseline(inst, kind.id(), instance_id, step, init, budget, thresholds))
        .collect();
    let mut best: Option<(usize, RunRecord)> = None;
    for (idx, run) in runs.into_iter().enumerate() {
        let run = run?;
        if best.as_ref().map_or(true, |(_, cur)| compare_runs(&run, cur).is_lt()) {
            best = Some((idx, run));
        }
    }
    let (idx, rec) = best.expect("non-empty candidates");
    Ok((rec, candidates[idx]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Mat;
    use crate::problem::{generate_instance, GeneratorConfig};

    fn instance() -> ProblemInstance {
        generate_instance(2.0, 5, &GeneratorConfig::default()).unwrap()
    }

    #[test]
    fn kkt_point_is_a_zero_of_the_operator() {
        let inst = instance();
        let op = SaddleOperator::new(&inst);
        let (gx, gm) = op.eval(&inst.x_star, &inst.mu_star);
        assert!(gx.norm() < 1e-10 && gm.norm() < 1e-10);
    }

    #[test]
    fn every_baseline_fixes_the_kkt_point() {
        let inst = instance();
        let op = SaddleOperator::new(&inst);
        let z = stack(&inst.x_star, &inst.mu_star);
        for next in [
            step_ogda(&op, 0, &z, &z, 0.1).unwrap(),
            step_eg(&op, 0, &z, 0.1).unwrap(),
            step_gda(&op, 0, &z, 0.1).unwrap(),
        ] {
            assert!((next - &z).norm() < 1e-10);
        }
        let s = PdhgState { x: inst.x_star.clone(), x_bar: inst.x_star.clone(), mu: inst.mu_star.clone() };
        let p = step_pdhg(&inst, 0, &s, 0.05, 0.05).unwrap();
        assert!((p.x - &inst.x_star).norm() < 1e-10 && (p.mu - &inst.mu_star).norm() < 1e-10);
        let (x, mu) = step_lin_al(&inst, 0, &inst.x_star, &inst.mu_star, 0.05, 1.0).unwrap();
        assert!((x - &inst.x_star).norm() < 1e-10 && (mu - &inst.mu_star).norm() < 1e-10);
    }

    #[test]
    fn zero_steps_are_identity() {
        let inst = instance();
        let op = SaddleOperator::new(&inst);
        let z = stack(&(&inst.x_star + Vector::from_element(3, 0.3)), &Vector::from_element(5, 0.2));
        let z_prev = &z * 0.5;
        assert_eq!(step_ogda(&op, 0, &z, &z_prev, 0.0).unwrap(), z);
        assert_eq!(step_eg(&op, 0, &z, 0.0).unwrap(), z);
        let (x, mu) = op.split(&z);
        let s = PdhgState { x: x.clone(), x_bar: x.clone(), mu: mu.clone() };
        let p = step_pdhg(&inst, 0, &s, 0.0, 0.0).unwrap();
        assert_eq!((p.x, p.mu), (x.clone(), mu.clone()));
    }

    #[test]
    fn lin_al_without_penalty_is_gda_in_x() {
        let inst = instance();
        let x = &inst.x_star + Vector::from_element(3, -0.2);
        let mu = Vector::from_element(5, 0.1);
        let (xl, mul) = step_lin_al(&inst, 0, &x, &mu, 0.03, 0.0).unwrap();
        let z = step_gda(&SaddleOperator::new(&inst), 0, &stack(&x, &mu), 0.03).unwrap();
        assert!((xl - z.rows(0, 3)).norm() < 1e-15);
        assert_eq!(mul, mu);
    }

    // Bilinear saddle min_x max_y xy: F(x, y) = (y, −x) = K z with K = [[0,1],[-1,0]].
    fn bilinear_matrix(kind: &str, g: f64) -> Mat {
        let k = Mat::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        let i = Mat::identity(2, 2);
        match kind {
            "gda" => &i - &k * g,
            "eg" => &i - &k * g + &k * &k * (g * g),
            "ogda" => {
                // state (z_t, z_{t−1}) → (z_t − 2gKz_t + gKz_{t−1}, z_t)
                let mut m = Mat::zeros(4, 4);
                m.view_mut((0, 0), (2, 2)).copy_from(&(&i - &k * (2.0 * g)));
                m.view_mut((0, 2), (2, 2)).copy_from(&(&k * g));
                m.view_mut((2, 0), (2, 2)).copy_from(&i);
                m
            }
            _ => unreachable!(),
        }
    }

    fn bilinear_run(kind: &str, g: f64, iters: usize) -> Vec<f64> {
        let f = |z: &Vector| Vector::from_column_slice(&[z[1], -z[0]]);
        let mut z = Vector::from_column_slice(&[1.0, 1.0]);
        let mut zp = z.clone();
        let mut norms = vec![z.norm()];
        for _ in 0..iters {
            let next = match kind {
                "gda" => &z - f(&z) * g,
                "eg" => {
                    let half = &z - f(&z) * g;
                    &z - f(&half) * g
                }
                "ogda" => &z - f(&z) * (2.0 * g) + f(&zp) * g,
                _ => unreachable!(),
            };
            zp = z;
            z = next;
            norms.push(z.norm());
        }
        norms
    }

    #[test]
    fn bilinear_separation() {
        let g = 0.1;
        let rho = |k| numerics::spectral_radius(&bilinear_matrix(k, g)).unwrap();
        assert!(rho("gda") > 1.0);
        assert!(rho("eg") < 1.0);
        assert!(rho("ogda") < 1.0);

        let gda = bilinear_run("gda", g, 500);
        assert!(gda[500] > 2.0 * gda[0]);
        for k in ["eg", "ogda"] {
            let n = bilinear_run(k, g, 500);
            assert!(n[500] < 0.5 * n[0], "{k}");
            // monotone decay after a short burn-in
            assert!(n[50..].windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)), "{k}");
        }
    }

    #[test]
    fn pdhg_matches_hand_rolled_linear_case() {
        // eps_nl = 0 makes h affine: h(x) = B⋆(x − x⋆).
        let cfg = GeneratorConfig { eps_nl: 0.0, ..Default::default() };
        let inst = generate_instance(3.0, 2, &cfg).unwrap();
        let b = inst.b_star.clone();
        let (tau, sigma) = (0.02, 0.03);
        let mut x = &inst.x_star + Vector::from_element(3, 0.5);
        let mut xb = x.clone();
        let mut mu = Vector::zeros(5);
        let mut s = PdhgState { x: x.clone(), x_bar: x.clone(), mu: mu.clone() };
        for t in 0..25 {
            let mu_n = &mu + &b * (&xb - &inst.x_star) * sigma;
            let x_n = &x - (inst.eval_grad_f(&x) + b.transpose() * &mu_n) * tau;
            xb = &x_n * 2.0 - &x;
            x = x_n;
            mu = mu_n;
            s = step_pdhg(&inst, t, &s, tau, sigma).unwrap();
        }
        assert!((s.x - x).norm() < 1e-12 && (s.mu - mu).norm() < 1e-12 && (s.x_bar - xb).norm() < 1e-12);
    }

    #[test]
    fn lin_al_matches_scalar_hand_computation() {
        // One constraint coordinate suffices: n = 1, m = 1 has f = ½h₀x² + qx (+ nonlinear
        // terms only for n ≥ 3); compare to finite-precision closed form.
        let cfg = GeneratorConfig { n: 1, m: 1, eps_nl: 0.0, ..Default::default() };
        let inst = generate_instance(1.0, 9, &cfg).unwrap();
        let x = Vector::from_element(1, inst.x_star[0] + 0.4);
        let mu = Vector::from_element(1, 0.3);
        let (tau, rho) = (0.1, 2.0);
        let bb = inst.b_star[(0, 0)];
        let h = |v: f64| bb * (v - inst.x_star[0]);
        let g = inst.eval_grad_f(&x)[0];
        let x1 = x[0] - tau * (g + bb * (mu[0] + rho * h(x[0])));
        let mu1 = mu[0] + rho * h(x1);
        let (xn, mn) = step_lin_al(&inst, 0, &x, &mu, tau, rho).unwrap();
        assert!((xn[0] - x1).abs() < 1e-14 && (mn[0] - mu1).abs() < 1e-14);
    }

    #[test]
    fn run_from_kkt_hits_immediately_and_tuning_picks_a_candidate() {
        let inst = instance();
        let init = Initialization::at_rest(inst.x_star.clone(), inst.mu_star.clone());
        let r = run_baseline(&inst, "eg", "i", BaselineStep::Eg { gamma: 0.01 }, &init, 10, &[1e-2, 1e-3]).unwrap();
        assert_eq!(r.hitting_times, vec![Some(0), Some(0)]);

        let x0 = &inst.x_star + Vector::from_element(3, 0.05);
        let init = Initialization::at_rest(x0, Vector::zeros(5));
        let (rec, step) = tune_baseline(&inst, BaselineKind::LinAl, "i", &init, 300, &[1e-2], &BaselineGrid::default()).unwrap();
        assert_eq!(rec.method, "lin-al");
        assert!(matches!(step, BaselineStep::LinAl { .. }));
    }

    #[test]
    fn pdhg_grid_respects_step_product() {
        let inst = generate_instance(13.0, 1, &GeneratorConfig::default()).unwrap();
        assert_eq!(BaselineGrid::default().candidates(BaselineKind::Pdhg, &inst, &inst.x_star).len(), 25);
        let grid = BaselineGrid { steps: vec![0.1, 0.5, 1.0, 2.0], ..Default::default() };
        let cands = grid.candidates(BaselineKind::Pdhg, &inst, &inst.x_star);
        let j = numerics::spectral_norm(&inst.eval_jac_h(&inst.x_star)).unwrap();
        assert!(!cands.is_empty() && cands.len() < 16);
        for c in cands {
            if let BaselineStep::Pdhg { tau, sigma } = c {
                assert!(tau * sigma * j * j < 1.0);
            }
        }
    }
}
