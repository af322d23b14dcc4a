//! Matrix-valued primal–dual updates.
//!
//! Three families share one state layout:
//!
//! ```text
//! AUG  μ⁺ = μ + η_d h_t
//!      x⁺ = x − η_x [∇f(x) + B_tᵀ(μ⁺ + C h_t)]
//! OPT  μ⁺ = μ + η_d h_t + Ω (h_t − h_{t−1})
//!      x⁺ = x − η_x [∇f(x) + B_tᵀ μ⁺]
//! HYB  μ⁺ = μ + η_d h_t + C_opt,t h_t − C_opt,t−1 h_{t−1}
//!      x⁺ = x − η_x [∇f(x) + B_tᵀ(μ⁺ + C_aug,t h_t)]
//! ```
//!
//! With a constant optimistic matrix the hybrid memory term is
//! `Ω (h_t − h_{t−1})`. Residuals and gradients pass through a
//! [`NoiseModel`]; noise sequences are recorded up front so two runs can
//! replay the same realization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{self, Mat, Vector};
use crate::problem::ProblemInstance;

/// Iterates with a larger norm are treated as numerically diverged.
pub const DIVERGENCE_NORM: f64 = 1e8;

/// Default hitting-time thresholds on `‖x_t − x⋆‖`.
pub const DEFAULT_THRESHOLDS: [f64; 3] = [1e-2, 1e-3, 1e-4];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DynamicsError {
    #[error("iterate diverged at t = {t}: {quantity}")]
    Diverged { t: usize, quantity: String },
    #[error("invalid correction split: {0}")]
    InvalidSplit(String),
    #[error("invalid step sizes ({eta_x}, {eta_d})")]
    InvalidSteps { eta_x: f64, eta_d: f64 },
    #[error("iteration budget must be at least 1")]
    InvalidBudget,
    #[error("thresholds must be positive and strictly decreasing")]
    InvalidThresholds,
}

/// Why a per-iteration matrix design could not be formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InfeasibleReason {
    /// `‖M_t‖₂` exceeded the correction budget.
    NormCap,
    /// The constraint Jacobian lost full column rank.
    Rank,
    /// `BᵀRB` (or the augmented curvature) was not positive definite.
    Curvature,
}

impl std::fmt::Display for InfeasibleReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::NormCap => "norm-cap",
            Self::Rank => "rank",
            Self::Curvature => "curvature",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FailureReason {
    Diverged { t: usize, quantity: String },
    DesignInfeasible { t: usize, reason: InfeasibleReason },
    BudgetExhausted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSizes {
    pub eta_x: f64,
    pub eta_d: f64,
}

impl StepSizes {
    pub fn new(eta_x: f64, eta_d: f64) -> Result<Self, DynamicsError> {
        if eta_x > 0.0 && eta_d > 0.0 && eta_x.is_finite() && eta_d.is_finite() {
            Ok(Self { eta_x, eta_d })
        } else {
            Err(DynamicsError::InvalidSteps { eta_x, eta_d })
        }
    }
}

/// `total = c_aug + c_opt`, with a symmetric augmented part.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionSplit {
    pub c_aug: Mat,
    pub c_opt: Mat,
    pub total: Mat,
}

impl CorrectionSplit {
    pub fn new(c_aug: Mat, c_opt: Mat) -> Result<Self, DynamicsError> {
        if !c_aug.is_square() || c_aug.shape() != c_opt.shape() {
            return Err(DynamicsError::InvalidSplit(format!(
                "shapes {:?} and {:?}",
                c_aug.shape(),
                c_opt.shape()
            )));
        }
        let tol = 1e-12 * c_aug.amax().max(1.0);
        if !numerics::is_symmetric(&c_aug, tol) {
            return Err(DynamicsError::InvalidSplit("augmented matrix is not symmetric".into()));
        }
        let total = &c_aug + &c_opt;
        Ok(Self { c_aug, c_opt, total })
    }

    pub fn pure_augmented(c: Mat) -> Result<Self, DynamicsError> {
        let zero = Mat::zeros(c.nrows(), c.ncols());
        Self::new(c, zero)
    }

    pub fn pure_optimistic(omega: Mat) -> Result<Self, DynamicsError> {
        let zero = Mat::zeros(omega.nrows(), omega.ncols());
        Self::new(zero, omega)
    }
}

/// Per-run noise realization.
///
/// Sequences are indexed from `t = −1`: entry `k` holds the draw for
/// iteration `k − 1`. Iterations past the recorded horizon are noise-free.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum NoiseModel {
    #[default]
    Exact,
    /// `G_t = ∇f + ξ_t`, `Y_t = h + ζ_t`; every residual use (dual step,
    /// memory and augmented term) sees `Y_t`.
    SharedOracle { xi: Vec<Vector>, zeta: Vec<Vector> },
    /// `ĥ_t = h + ε_t` with `ε_t` supported on `noisy` coordinates. The dual
    /// channel sees `ĥ_t`; the augmented term uses the exact residual.
    PartialResidual { eps: Vec<Vector>, noisy: Vec<usize> },
}

fn draw_sequence(rng: &mut ChaCha8Rng, len: usize, dim: usize, dist: &Normal<f64>) -> Vec<Vector> {
    (0..len)
        .map(|_| Vector::from_iterator(dim, (0..dim).map(|_| dist.sample(rng))))
        .collect()
}

impl NoiseModel {
    /// Gaussian shared-oracle noise for iterations `−1..horizon`.
    pub fn shared_gaussian(seed: u64, horizon: usize, n: usize, m: usize, grad_scale: f64, residual_scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Normal::new(0.0, grad_scale).expect("finite scale");
        let r = Normal::new(0.0, residual_scale).expect("finite scale");
        let xi = draw_sequence(&mut rng, horizon + 1, n, &g);
        let zeta = draw_sequence(&mut rng, horizon + 1, m, &r);
        Self::SharedOracle { xi, zeta }
    }

    /// Gaussian residual noise on the `noisy` coordinates only.
    pub fn partial_gaussian(seed: u64, horizon: usize, m: usize, noisy: Vec<usize>, scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, scale).expect("finite scale");
        let p = projection(m, &noisy);
        let eps = draw_sequence(&mut rng, horizon + 1, m, &dist)
            .into_iter()
            .map(|e| &p * e)
            .collect();
        Self::PartialResidual { eps, noisy }
    }

    /// Coordinate projection onto the noisy residual coordinates (`0` for
    /// noise-free models).
    pub fn noisy_projection(&self, m: usize) -> Mat {
        match self {
            Self::PartialResidual { noisy, .. } => projection(m, noisy),
            Self::SharedOracle { .. } => Mat::identity(m, m),
            Self::Exact => Mat::zeros(m, m),
        }
    }

    fn at(seq: &[Vector], t: isize) -> Option<&Vector> {
        usize::try_from(t + 1).ok().and_then(|k| seq.get(k))
    }

    /// Residual value fed to the dual step and stored as memory.
    pub fn residual_memory(&self, t: isize, h: &Vector) -> Vector {
        match self {
            Self::Exact => h.clone(),
            Self::SharedOracle { zeta, .. } => Self::at(zeta, t).map_or_else(|| h.clone(), |z| h + z),
            Self::PartialResidual { eps, .. } => Self::at(eps, t).map_or_else(|| h.clone(), |e| h + e),
        }
    }

    /// Residual value multiplied by the augmented matrix.
    pub fn residual_augmented(&self, t: isize, h: &Vector) -> Vector {
        match self {
            Self::SharedOracle { .. } => self.residual_memory(t, h),
            Self::Exact | Self::PartialResidual { .. } => h.clone(),
        }
    }

    pub fn gradient(&self, t: isize, g: &Vector) -> Vector {
        match self {
            Self::SharedOracle { xi, .. } => Self::at(xi, t).map_or_else(|| g.clone(), |e| g + e),
            _ => g.clone(),
        }
    }
}

/// Diagonal 0/1 projection onto the given coordinates.
pub fn projection(m: usize, coords: &[usize]) -> Mat {
    let mut p = Mat::zeros(m, m);
    for &i in coords {
        p[(i, i)] = 1.0;
    }
    p
}

/// One iterate: `x_t`, `μ_t`, the stored residual `h_{t−1}` (as seen by the
/// dual channel) and the previous optimistic matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverState {
    pub x: Vector,
    pub mu: Vector,
    pub h_prev: Vector,
    /// `None` before the first step; the first memory term then uses the
    /// current optimistic matrix.
    pub c_opt_prev: Option<Mat>,
    pub t: usize,
}

impl SolverState {
    /// State at `t = 0` with memory `h_{−1}` evaluated at `x_prev`.
    pub fn new(inst: &ProblemInstance, x_prev: &Vector, x0: Vector, mu0: Vector, noise: &NoiseModel) -> Self {
        let h_prev = noise.residual_memory(-1, &inst.eval_h(x_prev));
        Self {
            x: x0,
            mu: mu0,
            h_prev,
            c_opt_prev: None,
            t: 0,
        }
    }
}

/// `ν = μ + C h_prev`.
pub fn effective_dual(mu: &Vector, c: &Mat, h_prev: &Vector) -> Vector {
    mu + c * h_prev
}

/// Rejects non-finite iterates and `‖x‖ > DIVERGENCE_NORM`.
pub fn check_iterate(t: usize, x: &Vector, mu: &Vector) -> Result<(), DynamicsError> {
    if !x.iter().all(|v| v.is_finite()) {
        return Err(DynamicsError::Diverged { t, quantity: "x has non-finite entries".into() });
    }
    if !mu.iter().all(|v| v.is_finite()) {
        return Err(DynamicsError::Diverged { t, quantity: "mu has non-finite entries".into() });
    }
    let nx = x.norm();
    if nx > DIVERGENCE_NORM {
        return Err(DynamicsError::Diverged { t, quantity: format!("|x| = {nx:e}") });
    }
    Ok(())
}

fn finish_step(state: &SolverState, x: Vector, mu: Vector, h_mem: Vector, c_opt: Mat) -> Result<SolverState, DynamicsError> {
    check_iterate(state.t + 1, &x, &mu)?;
    Ok(SolverState {
        x,
        mu,
        h_prev: h_mem,
        c_opt_prev: Some(c_opt),
        t: state.t + 1,
    })
}

/// Hybrid step with `split = (C_aug, C_opt)`.
pub fn step_hybrid(
    inst: &ProblemInstance,
    state: &SolverState,
    split: &CorrectionSplit,
    steps: StepSizes,
    noise: &NoiseModel,
) -> Result<SolverState, DynamicsError> {
    let t = state.t as isize;
    let h = inst.eval_h(&state.x);
    let h_mem = noise.residual_memory(t, &h);
    let h_aug = noise.residual_augmented(t, &h);
    let c_opt_prev = state.c_opt_prev.as_ref().unwrap_or(&split.c_opt);

    let mu = &state.mu + &h_mem * steps.eta_d + &split.c_opt * &h_mem - c_opt_prev * &state.h_prev;
    let b = inst.eval_jac_h(&state.x);
    let grad = noise.gradient(t, &inst.eval_grad_f(&state.x));
    let x = &state.x - (grad + b.transpose() * (&mu + &split.c_aug * &h_aug)) * steps.eta_x;
    finish_step(state, x, mu, h_mem, split.c_opt.clone())
}

/// Pure augmented step (`Ω = 0`).
pub fn step_aug(
    inst: &ProblemInstance,
    state: &SolverState,
    c: &Mat,
    steps: StepSizes,
    noise: &NoiseModel,
) -> Result<SolverState, DynamicsError> {
    let t = state.t as isize;
    let h = inst.eval_h(&state.x);
    let h_mem = noise.residual_memory(t, &h);
    let h_aug = noise.residual_augmented(t, &h);

    let mu = &state.mu + &h_mem * steps.eta_d;
    let b = inst.eval_jac_h(&state.x);
    let grad = noise.gradient(t, &inst.eval_grad_f(&state.x));
    let x = &state.x - (grad + b.transpose() * (&mu + c * &h_aug)) * steps.eta_x;
    let m = c.nrows();
    finish_step(state, x, mu, h_mem, Mat::zeros(m, m))
}

/// Pure optimistic step (`C = 0`) with memory matrix `Ω`.
pub fn step_opt(
    inst: &ProblemInstance,
    state: &SolverState,
    omega: &Mat,
    steps: StepSizes,
    noise: &NoiseModel,
) -> Result<SolverState, DynamicsError> {
    let t = state.t as isize;
    let h = inst.eval_h(&state.x);
    let h_mem = noise.residual_memory(t, &h);
    let omega_prev = state.c_opt_prev.as_ref().unwrap_or(omega);

    let mu = &state.mu + &h_mem * steps.eta_d + omega * &h_mem - omega_prev * &state.h_prev;
    let b = inst.eval_jac_h(&state.x);
    let grad = noise.gradient(t, &inst.eval_grad_f(&state.x));
    let x = &state.x - (grad + b.transpose() * &mu) * steps.eta_x;
    finish_step(state, x, mu, h_mem, omega.clone())
}

/// Runs a fixed split for `iterations` steps and returns states `0..=iterations`.
pub fn simulate(
    inst: &ProblemInstance,
    initial: SolverState,
    split: &CorrectionSplit,
    steps: StepSizes,
    noise: &NoiseModel,
    iterations: usize,
) -> Result<Vec<SolverState>, DynamicsError> {
    let mut states = Vec::with_capacity(iterations + 1);
    states.push(initial);
    for _ in 0..iterations {
        let next = step_hybrid(inst, states.last().expect("non-empty"), split, steps, noise)?;
        states.push(next);
    }
    Ok(states)
}

/// Diagnostics attached to one iteration of a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub eta_x: f64,
    pub eta_d: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub m_norm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub theta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub a_x: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub a_d: Option<f64>,
    /// `‖B_t‖₂²`.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub b_norm_sq: Option<f64>,
    /// `‖H_t + B_tᵀ C_aug B_t‖₂`.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub aug_curvature_norm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub c_opt_norm: Option<f64>,
    #[serde(skip_serializing_if = "std::ops::Not::not", default)]
    pub weights_fallback: bool,
}

/// Correction and steps to apply at one iteration.
#[derive(Debug, Clone)]
pub struct Plan {
    pub split: CorrectionSplit,
    pub steps: StepSizes,
    pub info: StepInfo,
}

/// Supplies the correction for each iteration of [`run_trajectory`].
pub trait CorrectionSchedule {
    fn plan(&mut self, inst: &ProblemInstance, state: &SolverState) -> Result<Plan, InfeasibleReason>;

    /// `‖M‖₂` of a correction formed and then rejected by the last `plan` call.
    fn rejected_m_norm(&self) -> Option<f64> {
        None
    }
}

/// Same split and steps at every iteration.
#[derive(Debug, Clone)]
pub struct FixedSchedule {
    pub split: CorrectionSplit,
    pub steps: StepSizes,
}

impl CorrectionSchedule for FixedSchedule {
    fn plan(&mut self, _inst: &ProblemInstance, _state: &SolverState) -> Result<Plan, InfeasibleReason> {
        Ok(Plan {
            split: self.split.clone(),
            steps: self.steps,
            info: StepInfo {
                eta_x: self.steps.eta_x,
                eta_d: self.steps.eta_d,
                m_norm: numerics::spectral_norm(&self.split.total).ok(),
                ..Default::default()
            },
        })
    }
}

/// `(x_{−1}, x_0, μ_0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Initialization {
    pub x_prev: Vector,
    pub x0: Vector,
    pub mu0: Vector,
}

impl Initialization {
    /// `x_{−1} = x_0`, so the first memory term vanishes.
    pub fn at_rest(x0: Vector, mu0: Vector) -> Self {
        Self { x_prev: x0.clone(), x0, mu0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub t: usize,
    /// `‖x_t − x⋆‖`.
    pub dist: f64,
    /// `‖h(x_t)‖`.
    pub feasibility: f64,
    /// `‖∇f(x_t) + J_h(x_t)ᵀμ_t‖`.
    pub stationarity: f64,
    pub x: Vec<f64>,
    pub mu: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub step: Option<StepInfo>,
}

/// Outcome of one (method, instance) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: String,
    pub instance: String,
    pub kappa_b: f64,
    pub thresholds: Vec<f64>,
    /// First `t` with `‖x_t − x⋆‖ ≤ thresholds[k]`.
    pub hitting_times: Vec<Option<usize>>,
    pub failure: Option<FailureReason>,
    pub iterations: usize,
    pub final_dist: f64,
    pub final_feasibility: f64,
    pub final_stationarity: f64,
    /// `max_t ‖M_t‖₂` over every design formed, including one rejected by
    /// the norm cap.
    pub max_m_norm: Option<f64>,
    pub weight_fallbacks: usize,
    #[serde(skip)]
    pub log: Vec<IterationLog>,
}

impl RunRecord {
    pub fn hit_time(&self, threshold: f64) -> Option<usize> {
        self.thresholds
            .iter()
            .position(|&t| t == threshold)
            .and_then(|k| self.hitting_times[k])
    }

    pub fn succeeded(&self, threshold: f64) -> bool {
        self.hit_time(threshold).is_some()
    }

    pub fn hits_all(&self) -> bool {
        self.hitting_times.iter().all(Option::is_some)
    }

    pub fn thresholds_reached(&self) -> usize {
        self.hitting_times.iter().filter(|h| h.is_some()).count()
    }
}

/// Orders runs best first: more thresholds reached, then an earlier hit of
/// the tightest threshold reached, then smaller `max‖M_t‖₂`.
pub fn compare_runs(a: &RunRecord, b: &RunRecord) -> std::cmp::Ordering {
    let tightest = |r: &RunRecord| r.hitting_times.iter().rev().find_map(|h| *h).unwrap_or(usize::MAX);
    b.thresholds_reached()
        .cmp(&a.thresholds_reached())
        .then(tightest(a).cmp(&tightest(b)))
        .then(
            a.max_m_norm
                .unwrap_or(f64::INFINITY)
                .total_cmp(&b.max_m_norm.unwrap_or(f64::INFINITY)),
        )
}

pub fn validate_thresholds(thresholds: &[f64]) -> Result<(), DynamicsError> {
    let positive = thresholds.iter().all(|&t| t > 0.0 && t.is_finite());
    let decreasing = thresholds.windows(2).all(|w| w[0] > w[1]);
    if thresholds.is_empty() || !positive || !decreasing {
        return Err(DynamicsError::InvalidThresholds);
    }
    Ok(())
}

/// Collects per-iteration metrics and hitting times for any method.
pub struct TrajectoryRecorder<'a> {
    inst: &'a ProblemInstance,
    thresholds: Vec<f64>,
    hits: Vec<Option<usize>>,
    log: Vec<IterationLog>,
    max_m_norm: Option<f64>,
    fallbacks: usize,
}

impl<'a> TrajectoryRecorder<'a> {
    pub fn new(inst: &'a ProblemInstance, thresholds: &[f64]) -> Self {
        Self {
            inst,
            thresholds: thresholds.to_vec(),
            hits: vec![None; thresholds.len()],
            log: Vec::new(),
            max_m_norm: None,
            fallbacks: 0,
        }
    }

    /// Logs iterate `t`; returns `true` once every threshold has been hit.
    pub fn observe(&mut self, t: usize, x: &Vector, mu: &Vector) -> bool {
        let dist = (x - &self.inst.x_star).norm();
        for (k, &thr) in self.thresholds.iter().enumerate() {
            if self.hits[k].is_none() && dist <= thr {
                self.hits[k] = Some(t);
            }
        }
        self.log.push(IterationLog {
            t,
            dist,
            feasibility: self.inst.eval_h(x).norm(),
            stationarity: self.inst.stationarity(x, mu),
            x: x.as_slice().to_vec(),
            mu: mu.as_slice().to_vec(),
            step: None,
        });
        self.hits.iter().all(Option::is_some)
    }

    /// Attaches step diagnostics to the latest logged iterate.
    pub fn annotate(&mut self, info: StepInfo) {
        self.note_m_norm(info.m_norm);
        if info.weights_fallback {
            self.fallbacks += 1;
        }
        if let Some(last) = self.log.last_mut() {
            last.step = Some(info);
        }
    }

    pub fn note_m_norm(&mut self, m_norm: Option<f64>) {
        if let Some(v) = m_norm {
            self.max_m_norm = Some(self.max_m_norm.map_or(v, |cur| cur.max(v)));
        }
    }

    pub fn finish(self, method: &str, instance: &str, failure: Option<FailureReason>) -> RunRecord {
        let last = self.log.last().cloned();
        RunRecord {
            method: method.to_string(),
            instance: instance.to_string(),
            kappa_b: self.inst.kappa_b,
            thresholds: self.thresholds,
            hitting_times: self.hits,
            failure,
            iterations: last.as_ref().map_or(0, |l| l.t),
            final_dist: last.as_ref().map_or(f64::NAN, |l| l.dist),
            final_feasibility: last.as_ref().map_or(f64::NAN, |l| l.feasibility),
            final_stationarity: last.as_ref().map_or(f64::NAN, |l| l.stationarity),
            max_m_norm: self.max_m_norm,
            weight_fallbacks: self.fallbacks,
            log: self.log,
        }
    }
}

/// Drives a schedule for at most `budget` steps. Stops early once the
/// tightest threshold is reached, on divergence, or when the schedule
/// reports an infeasible design; those outcomes are recorded, not returned
/// as errors.
#[allow(clippy::too_many_arguments)]
pub fn run_trajectory(
    inst: &ProblemInstance,
    method: &str,
    instance_id: &str,
    schedule: &mut dyn CorrectionSchedule,
    init: &Initialization,
    budget: usize,
    noise: &NoiseModel,
    thresholds: &[f64],
) -> Result<RunRecord, DynamicsError> {
    if budget == 0 {
        return Err(DynamicsError::InvalidBudget);
    }
    validate_thresholds(thresholds)?;
    let mut recorder = TrajectoryRecorder::new(inst, thresholds);
    let mut state = SolverState::new(inst, &init.x_prev, init.x0.clone(), init.mu0.clone(), noise);

    let failure = loop {
        if recorder.observe(state.t, &state.x, &state.mu) {
            break None;
        }
        if state.t >= budget {
            break Some(FailureReason::BudgetExhausted);
        }
        let plan = match schedule.plan(inst, &state) {
            Ok(plan) => plan,
            Err(reason) => {
                recorder.note_m_norm(schedule.rejected_m_norm());
                break Some(FailureReason::DesignInfeasible { t: state.t, reason });
            }
        };
        recorder.annotate(plan.info);
        match step_hybrid(inst, &state, &plan.split, plan.steps, noise) {
            Ok(next) => state = next,
            Err(DynamicsError::Diverged { t, quantity }) => {
                break Some(FailureReason::Diverged { t, quantity });
            }
            Err(e) => return Err(e),
        }
    };
    Ok(recorder.finish(method, instance_id, failure))
}
