//! Closed-form hybrid correction design.
//!
//! At iterate `(x_t, μ_t)` with `H = ∇²ₓₓL` and `B = J_h`:
//!
//! ```text
//! C_can = −B†ᵀ H B†                      (H + Bᵀ C_can B = 0)
//! α     = δ / λ_min(BᵀRB),  M = C_can + αR   (H + BᵀMB = αBᵀRB ⪰ δI)
//! θ     = κ_x‖R‖‖B‖² / (κ_x‖R‖‖B‖² + κ_pκ_ω‖BᵀRB‖)
//! C_aug = C_can + θαR,  C_opt = (1−θ)αR
//! η_x   = min{ √(a_d κ_p / (a_x‖B‖²)), κ_x/‖H + BᵀC_aug B‖, κ_pκ_ω/(‖C_opt‖‖B‖²) }
//! η_d   = κ_p / (η_x ‖B‖²)
//! ```
//!
//! The step rule satisfies `η_x ≤ κ_x/‖H + BᵀC_aug B‖` (S1),
//! `η_x η_d ‖B‖² ≤ κ_p` (S2, saturated) and `‖C_opt‖ ≤ κ_ω η_d` (S3).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{
    compare_runs, run_trajectory, CorrectionSchedule, CorrectionSplit, DynamicsError, InfeasibleReason, Initialization, NoiseModel,
    Plan, RunRecord, SolverState, StepInfo, StepSizes,
};
use crate::numerics::{self, Mat, DEFAULT_RANK_TOL, DEFAULT_ZERO_TOL};
use crate::problem::{serde_mat, ProblemInstance};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DesignError {
    #[error("design infeasible ({reason})")]
    Infeasible {
        reason: InfeasibleReason,
        /// `‖M‖₂` when the correction was formed before being rejected.
        m_norm: Option<f64>,
    },
    #[error("augmented curvature is not positive definite; spectral weights undefined")]
    WeightsUndefined,
    #[error("invalid design constants: {0}")]
    InvalidConstants(String),
}

impl DesignError {
    fn infeasible(reason: InfeasibleReason) -> Self {
        Self::Infeasible { reason, m_norm: None }
    }
}

/// Residual metric `R ≻ 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ResidualMetric {
    #[default]
    Identity,
    Diagonal(Vec<f64>),
    Full(#[serde(with = "serde_mat")] Mat),
}

impl ResidualMetric {
    pub fn matrix(&self, m: usize) -> Mat {
        match self {
            Self::Identity => Mat::identity(m, m),
            Self::Diagonal(d) => Mat::from_diagonal(&numerics::Vector::from_column_slice(d)),
            Self::Full(r) => r.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DesignConstants {
    /// Target curvature margin `δ`.
    pub delta: f64,
    pub kappa_x: f64,
    pub kappa_p: f64,
    pub kappa_omega: f64,
    /// Cap on `‖M_t‖₂`.
    pub m_max: f64,
    pub residual_metric: ResidualMetric,
}

impl Default for DesignConstants {
    fn default() -> Self {
        Self {
            delta: 0.35,
            kappa_x: 0.08,
            kappa_p: 0.20,
            kappa_omega: 8.0,
            m_max: 300.0,
            residual_metric: ResidualMetric::Identity,
        }
    }
}

impl DesignConstants {
    /// Checks positivity of all constants and that `R` is symmetric positive
    /// definite of size `m`. `m_max = 0` is allowed (every design fails).
    pub fn validate(&self, m: usize) -> Result<(), DesignError> {
        let named = [
            ("delta", self.delta),
            ("kappa_x", self.kappa_x),
            ("kappa_p", self.kappa_p),
            ("kappa_omega", self.kappa_omega),
        ];
        for (name, v) in named {
            if !(v > 0.0 && v.is_finite()) {
                return Err(DesignError::InvalidConstants(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.m_max >= 0.0) {
            return Err(DesignError::InvalidConstants(format!("m_max must be >= 0, got {}", self.m_max)));
        }
        let r = self.residual_metric.matrix(m);
        if r.shape() != (m, m) || !numerics::is_symmetric(&r, 1e-12 * r.amax().max(1.0)) {
            return Err(DesignError::InvalidConstants("residual metric must be symmetric m x m".into()));
        }
        match numerics::lambda_min(&r) {
            Ok(l) if l > 0.0 => Ok(()),
            _ => Err(DesignError::InvalidConstants("residual metric must be positive definite".into())),
        }
    }
}

/// Step weights: unit (`a_x = a_d = 1`) or spectral.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Unit,
    Weighted,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Unit => "unit",
            Self::Weighted => "weighted",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "unit" => Ok(Self::Unit),
            "weighted" => Ok(Self::Weighted),
            other => Err(format!("unknown variant `{other}` (expected unit|weighted)")),
        }
    }
}

/// How the target correction is distributed between the two channels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "value")]
pub enum Realization {
    /// `θ_t` from the balancing rule.
    ClosedForm,
    /// Fixed `θ ∈ [0, 1]` within the cancellation family.
    Theta(f64),
    /// `C_aug = M`, `C_opt = 0`.
    PureAugmented,
    /// `C_aug = 0`, `C_opt = M`.
    PureOptimistic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignOutput {
    pub split: CorrectionSplit,
    pub steps: StepSizes,
    pub theta: f64,
    pub alpha: f64,
    pub a_x: f64,
    pub a_d: f64,
    pub m_norm: f64,
    pub weights_fallback: bool,
    pub b_norm_sq: f64,
    pub aug_curvature_norm: f64,
    pub c_opt_norm: f64,
}

impl DesignOutput {
    /// Weighted synchronized margin `min{a_x η_x, a_d η_d}`.
    pub fn margin(&self) -> f64 {
        (self.a_x * self.steps.eta_x).min(self.a_d * self.steps.eta_d)
    }

    pub fn step_info(&self) -> StepInfo {
        StepInfo {
            eta_x: self.steps.eta_x,
            eta_d: self.steps.eta_d,
            m_norm: Some(self.m_norm),
            theta: Some(self.theta),
            alpha: Some(self.alpha),
            a_x: Some(self.a_x),
            a_d: Some(self.a_d),
            b_norm_sq: Some(self.b_norm_sq),
            aug_curvature_norm: Some(self.aug_curvature_norm),
            c_opt_norm: Some(self.c_opt_norm),
            weights_fallback: self.weights_fallback,
        }
    }

    pub fn plan(&self) -> Plan {
        Plan {
            split: self.split.clone(),
            steps: self.steps,
            info: self.step_info(),
        }
    }
}

fn norm2(a: &Mat) -> f64 {
    numerics::spectral_norm(a).unwrap_or(f64::INFINITY)
}

/// `C_can = −B†ᵀ H B†`, symmetrized. Requires full column rank.
pub fn cancellation_matrix(h: &Mat, b: &Mat) -> Result<Mat, DesignError> {
    let rank = numerics::numerical_rank(b, DEFAULT_RANK_TOL).map_err(|_| DesignError::infeasible(InfeasibleReason::Rank))?;
    if rank < b.ncols() {
        return Err(DesignError::infeasible(InfeasibleReason::Rank));
    }
    let pinv = numerics::pseudoinverse(b, DEFAULT_RANK_TOL).map_err(|_| DesignError::infeasible(InfeasibleReason::Rank))?;
    let c = -(pinv.transpose() * h * &pinv);
    Ok(numerics::symmetrize(&c))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetCorrection {
    pub c_can: Mat,
    pub m: Mat,
    pub alpha: f64,
}

/// Minimum-strength `M = C_can + αR` with `H + BᵀMB ⪰ δI`.
pub fn target_correction(h: &Mat, b: &Mat, r: &Mat, delta: f64) -> Result<TargetCorrection, DesignError> {
    let c_can = cancellation_matrix(h, b)?;
    let brb = b.transpose() * r * b;
    let lam = numerics::lambda_min(&brb).map_err(|_| DesignError::infeasible(InfeasibleReason::Curvature))?;
    if !(lam > 0.0) {
        return Err(DesignError::infeasible(InfeasibleReason::Curvature));
    }
    let alpha = delta / lam;
    let m = numerics::symmetrize(&(&c_can + r * alpha));
    Ok(TargetCorrection { c_can, m, alpha })
}

/// The channel-balancing split parameter `θ`.
pub fn balancing_theta(b: &Mat, r: &Mat, constants: &DesignConstants) -> f64 {
    let aug_cost = constants.kappa_x * norm2(r) * norm2(b).powi(2);
    let opt_cost = constants.kappa_p * constants.kappa_omega * norm2(&(b.transpose() * r * b));
    aug_cost / (aug_cost + opt_cost)
}

/// `C_aug = C_can + θαR`, `C_opt = (1 − θ)αR` with `θ` from the balancing rule.
pub fn split_theta(
    c_can: &Mat,
    b: &Mat,
    r: &Mat,
    alpha: f64,
    constants: &DesignConstants,
) -> Result<(f64, CorrectionSplit), DesignError> {
    let theta = balancing_theta(b, r, constants);
    Ok((theta, split_at(c_can, r, alpha, theta)?))
}

pub fn split_at(c_can: &Mat, r: &Mat, alpha: f64, theta: f64) -> Result<CorrectionSplit, DesignError> {
    let c_aug = numerics::symmetrize(&(c_can + r * (theta * alpha)));
    let c_opt = r * ((1.0 - theta) * alpha);
    CorrectionSplit::new(c_aug, c_opt).map_err(|_| DesignError::infeasible(InfeasibleReason::Curvature))
}

/// `a_x = ½λ_min(A_M)`, `a_d = λ_min⁺(B A_M⁻¹ Bᵀ)` with `A_M = H + BᵀMB`.
pub fn spectral_weights(h: &Mat, b: &Mat, m: &Mat) -> Result<(f64, f64), DesignError> {
    let a_m = numerics::symmetrize(&(h + b.transpose() * m * b));
    let lam = numerics::lambda_min(&a_m).map_err(|_| DesignError::WeightsUndefined)?;
    if !(lam > 0.0) {
        return Err(DesignError::WeightsUndefined);
    }
    let chol = a_m.cholesky().ok_or(DesignError::WeightsUndefined)?;
    let a_inv = chol.inverse();
    let dual = numerics::symmetrize(&(b * a_inv * b.transpose()));
    let a_d = numerics::lambda_min_positive(&dual, DEFAULT_ZERO_TOL).map_err(|_| DesignError::WeightsUndefined)?;
    Ok((0.5 * lam, a_d))
}

/// Closed-form steps maximizing `min{a_x η_x, a_d η_d}` under S1–S3.
pub fn step_rule(h: &Mat, b: &Mat, split: &CorrectionSplit, constants: &DesignConstants, weights: (f64, f64)) -> StepSizes {
    let (a_x, a_d) = weights;
    let b_sq = norm2(b).powi(2);
    let curv = norm2(&(h + b.transpose() * &split.c_aug * b));
    let c_opt_norm = norm2(&split.c_opt);
    eta_from_norms(b_sq, curv, c_opt_norm, constants, a_x, a_d)
}

fn eta_from_norms(b_sq: f64, curv: f64, c_opt_norm: f64, k: &DesignConstants, a_x: f64, a_d: f64) -> StepSizes {
    let balance = (a_d * k.kappa_p / (a_x * b_sq)).sqrt();
    let curvature_cap = if curv > 0.0 { k.kappa_x / curv } else { f64::INFINITY };
    let optimism_cap = if c_opt_norm > 0.0 {
        k.kappa_p * k.kappa_omega / (c_opt_norm * b_sq)
    } else {
        f64::INFINITY
    };
    let eta_x = balance.min(curvature_cap).min(optimism_cap);
    StepSizes {
        eta_x,
        eta_d: k.kappa_p / (eta_x * b_sq),
    }
}

/// Local curvature and Jacobian at a solver state.
fn local_model(inst: &ProblemInstance, state: &SolverState) -> (Mat, Mat) {
    (inst.eval_hess_lagrangian(&state.x, &state.mu), inst.eval_jac_h(&state.x))
}

/// Member of the cancellation family `M = C_can + (mult·α)R` with the given
/// realization, plus its step sizes.
pub fn design_at(
    h: &Mat,
    b: &Mat,
    constants: &DesignConstants,
    variant: Variant,
    alpha_mult: f64,
    realization: Realization,
) -> Result<DesignOutput, DesignError> {
    let r = constants.residual_metric.matrix(b.nrows());
    let target = target_correction(h, b, &r, constants.delta)?;
    let alpha = target.alpha * alpha_mult;
    let m = if alpha_mult == 1.0 {
        target.m
    } else {
        numerics::symmetrize(&(&target.c_can + &r * alpha))
    };
    let m_norm = norm2(&m);
    if !(m_norm <= constants.m_max) {
        return Err(DesignError::Infeasible {
            reason: InfeasibleReason::NormCap,
            m_norm: Some(m_norm),
        });
    }

    let (theta, split) = match realization {
        Realization::ClosedForm => {
            let theta = balancing_theta(b, &r, constants);
            (theta, split_at(&target.c_can, &r, alpha, theta)?)
        }
        Realization::Theta(theta) => (theta, split_at(&target.c_can, &r, alpha, theta)?),
        Realization::PureAugmented => (
            1.0,
            CorrectionSplit::pure_augmented(m.clone()).map_err(|_| DesignError::infeasible(InfeasibleReason::Curvature))?,
        ),
        Realization::PureOptimistic => (
            0.0,
            CorrectionSplit::pure_optimistic(m.clone()).map_err(|_| DesignError::infeasible(InfeasibleReason::Curvature))?,
        ),
    };

    let (weights, weights_fallback) = match variant {
        Variant::Unit => ((1.0, 1.0), false),
        Variant::Weighted => match spectral_weights(h, b, &split.total) {
            Ok(w) => (w, false),
            Err(_) => ((1.0, 1.0), true),
        },
    };

    let b_sq = norm2(b).powi(2);
    let aug_curvature_norm = norm2(&(h + b.transpose() * &split.c_aug * b));
    let c_opt_norm = norm2(&split.c_opt);
    let steps = eta_from_norms(b_sq, aug_curvature_norm, c_opt_norm, constants, weights.0, weights.1);
    if !(steps.eta_x > 0.0 && steps.eta_x.is_finite() && steps.eta_d > 0.0 && steps.eta_d.is_finite()) {
        return Err(DesignError::infeasible(InfeasibleReason::Curvature));
    }
    Ok(DesignOutput {
        split,
        steps,
        theta,
        alpha,
        a_x: weights.0,
        a_d: weights.1,
        m_norm,
        weights_fallback,
        b_norm_sq: b_sq,
        aug_curvature_norm,
        c_opt_norm,
    })
}

/// Algorithm: cancellation, minimum-strength target, balancing split and
/// closed-form steps at `(x_t, μ_t)`.
pub fn closed_form_design(
    inst: &ProblemInstance,
    state: &SolverState,
    constants: &DesignConstants,
    variant: Variant,
) -> Result<DesignOutput, DesignError> {
    let (h, b) = local_model(inst, state);
    design_at(&h, &b, constants, variant, 1.0, Realization::ClosedForm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Endpoint {
    Augmented,
    Optimistic,
}

/// Same `M_t` as the closed form, realized entirely in one channel.
pub fn pure_endpoint_design(
    inst: &ProblemInstance,
    state: &SolverState,
    constants: &DesignConstants,
    which: Endpoint,
    variant: Variant,
) -> Result<DesignOutput, DesignError> {
    let (h, b) = local_model(inst, state);
    let realization = match which {
        Endpoint::Augmented => Realization::PureAugmented,
        Endpoint::Optimistic => Realization::PureOptimistic,
    };
    design_at(&h, &b, constants, variant, 1.0, realization)
}

/// Split parameter candidates for the grid oracle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ThetaChoice {
    Fixed(f64),
    /// The balancing-rule value at the current iterate.
    #[serde(with = "closed_form_tag")]
    ClosedForm,
}

mod closed_form_tag {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str("closed-form")
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<(), D::Error> {
        let s = String::deserialize(d)?;
        if s == "closed-form" {
            Ok(())
        } else {
            Err(D::Error::custom(format!("expected \"closed-form\", got {s:?}")))
        }
    }
}

impl ThetaChoice {
    fn realization(self) -> Realization {
        match self {
            Self::Fixed(t) => Realization::Theta(t),
            Self::ClosedForm => Realization::ClosedForm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleGrid {
    pub alpha_multipliers: Vec<f64>,
    pub thetas: Vec<ThetaChoice>,
}

impl Default for OracleGrid {
    fn default() -> Self {
        Self {
            alpha_multipliers: vec![0.5, 1.0, 2.0, 4.0, 8.0],
            thetas: vec![
                ThetaChoice::Fixed(0.0),
                ThetaChoice::Fixed(0.25),
                ThetaChoice::Fixed(0.5),
                ThetaChoice::Fixed(0.75),
                ThetaChoice::Fixed(1.0),
                ThetaChoice::ClosedForm,
            ],
        }
    }
}

impl OracleGrid {
    pub fn candidates(&self) -> Vec<(f64, ThetaChoice)> {
        self.alpha_multipliers
            .iter()
            .flat_map(|&a| self.thetas.iter().map(move |&t| (a, t)))
            .collect()
    }
}

/// Per-iteration grid search over `(mult, θ)`: maximizes the weighted
/// margin, ties broken by smaller `‖M‖₂`, then smaller `θ`.
pub fn grid_oracle_design(
    inst: &ProblemInstance,
    state: &SolverState,
    constants: &DesignConstants,
    variant: Variant,
    grid: &OracleGrid,
) -> Result<DesignOutput, DesignError> {
    if grid.alpha_multipliers.is_empty() || grid.thetas.is_empty() {
        return Err(DesignError::InvalidConstants("oracle grid must be non-empty".into()));
    }
    let (h, b) = local_model(inst, state);
    let mut best: Option<DesignOutput> = None;
    let mut first_err = None;
    for (mult, theta) in grid.candidates() {
        match design_at(&h, &b, constants, variant, mult, theta.realization()) {
            Ok(d) => {
                let better = match &best {
                    None => true,
                    Some(cur) => {
                        let (mn, mc) = (d.margin(), cur.margin());
                        mn > mc || (mn == mc && (d.m_norm < cur.m_norm || (d.m_norm == cur.m_norm && d.theta < cur.theta)))
                    }
                };
                if better {
                    best = Some(d);
                }
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    best.ok_or_else(|| first_err.unwrap_or(DesignError::infeasible(InfeasibleReason::NormCap)))
}

fn to_schedule_error(e: DesignError) -> InfeasibleReason {
    match e {
        DesignError::Infeasible { reason, .. } => reason,
        DesignError::WeightsUndefined => InfeasibleReason::Curvature,
        DesignError::InvalidConstants(_) => InfeasibleReason::Curvature,
    }
}

/// Redesigns the correction at every iterate (or once, when frozen).
#[derive(Debug, Clone)]
pub struct DesignSchedule {
    pub constants: DesignConstants,
    pub variant: Variant,
    pub alpha_mult: f64,
    pub realization: Realization,
    /// Reuse the iteration-0 design for the whole run.
    pub frozen: bool,
    cached: Option<Plan>,
    last_rejected_norm: Option<f64>,
}

impl DesignSchedule {
    pub fn new(constants: DesignConstants, variant: Variant, alpha_mult: f64, realization: Realization) -> Self {
        Self {
            constants,
            variant,
            alpha_mult,
            realization,
            frozen: false,
            cached: None,
            last_rejected_norm: None,
        }
    }

    pub fn closed_form(constants: DesignConstants, variant: Variant) -> Self {
        Self::new(constants, variant, 1.0, Realization::ClosedForm)
    }

    pub fn endpoint(constants: DesignConstants, variant: Variant, which: Endpoint) -> Self {
        let realization = match which {
            Endpoint::Augmented => Realization::PureAugmented,
            Endpoint::Optimistic => Realization::PureOptimistic,
        };
        Self::new(constants, variant, 1.0, realization)
    }

    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    /// `‖M‖₂` of the most recent design rejected by the norm cap.
    pub fn last_rejected_norm(&self) -> Option<f64> {
        self.last_rejected_norm
    }
}

impl CorrectionSchedule for DesignSchedule {
    fn plan(&mut self, inst: &ProblemInstance, state: &SolverState) -> Result<Plan, InfeasibleReason> {
        if let (true, Some(plan)) = (self.frozen, &self.cached) {
            return Ok(plan.clone());
        }
        let (h, b) = local_model(inst, state);
        match design_at(&h, &b, &self.constants, self.variant, self.alpha_mult, self.realization) {
            Ok(d) => {
                let plan = d.plan();
                if self.frozen {
                    self.cached = Some(plan.clone());
                }
                Ok(plan)
            }
            Err(e) => {
                if let DesignError::Infeasible { m_norm, .. } = &e {
                    self.last_rejected_norm = *m_norm;
                }
                Err(to_schedule_error(e))
            }
        }
    }

    fn rejected_m_norm(&self) -> Option<f64> {
        self.last_rejected_norm
    }
}

/// Grid search repeated at every iterate.
#[derive(Debug, Clone)]
pub struct GridIterationSchedule {
    pub constants: DesignConstants,
    pub variant: Variant,
    pub grid: OracleGrid,
}

impl CorrectionSchedule for GridIterationSchedule {
    fn plan(&mut self, inst: &ProblemInstance, state: &SolverState) -> Result<Plan, InfeasibleReason> {
        grid_oracle_design(inst, state, &self.constants, self.variant, &self.grid)
            .map(|d| d.plan())
            .map_err(to_schedule_error)
    }
}

/// Grid-oracle candidate chosen for a whole run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleChoice {
    pub alpha_mult: f64,
    pub theta: ThetaChoice,
}

/// Per-run grid oracle: every `(mult, θ)` candidate is simulated over the
/// run budget and the best outcome is kept. Candidates are ranked by number
/// of thresholds reached, then hitting time of the tightest threshold
/// reached, then smaller `max‖M_t‖₂`, then grid order.
#[allow(clippy::too_many_arguments)]
pub fn grid_oracle_run(
    inst: &ProblemInstance,
    method: &str,
    instance_id: &str,
    init: &Initialization,
    budget: usize,
    noise: &NoiseModel,
    thresholds: &[f64],
    constants: &DesignConstants,
    variant: Variant,
    grid: &OracleGrid,
) -> Result<(RunRecord, OracleChoice), DynamicsError> {
    let candidates = grid.candidates();
    if candidates.is_empty() {
        return Err(DynamicsError::InvalidSplit("oracle grid must be non-empty".into()));
    }
    let runs: Vec<Result<RunRecord, DynamicsError>> = candidates
        .par_iter()
        .map(|&(mult, theta)| {
            let mut sched = DesignSchedule::new(constants.clone(), variant, mult, theta.realization());
            run_trajectory(inst, method, instance_id, &mut sched, init, budget, noise, thresholds)
        })
        .collect();
    let mut best: Option<(usize, RunRecord)> = None;
    for (idx, run) in runs.into_iter().enumerate() {
        let run = run?;
        let better = match &best {
            None => true,
            Some((_, cur)) => compare_runs(&run, cur).is_lt(),
        };
        if better {
            best = Some((idx, run));
        }
    }
    let (idx, record) = best.expect("non-empty grid");
    let (alpha_mult, theta) = candidates[idx];
    Ok((record, OracleChoice { alpha_mult, theta }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Vector;
    use crate::problem::{generate_instance, GeneratorConfig};

    fn diag(v: &[f64]) -> Mat {
        Mat::from_diagonal(&Vector::from_column_slice(v))
    }

    #[test]
    fn cancellation_with_identity_jacobian() {
        let h = Mat::from_row_slice(2, 2, &[1.0, 0.3, 0.3, -2.0]);
        let c = cancellation_matrix(&h, &Mat::identity(2, 2)).unwrap();
        assert!((c + &h).amax() < 1e-14);
        let zero = cancellation_matrix(&Mat::zeros(2, 2), &diag(&[3.0, 4.0])).unwrap();
        assert_eq!(zero.amax(), 0.0);
    }

    #[test]
    fn cancellation_on_stiff_example() {
        let h = -Mat::identity(2, 2);
        let b = diag(&[1000.0, 1.0]);
        let c = cancellation_matrix(&h, &b).unwrap();
        assert!((c[(0, 0)] - 1e-6).abs() < 1e-18);
        assert!((c[(1, 1)] - 1.0).abs() < 1e-14);
        assert!((&h + b.transpose() * &c * &b).amax() < 1e-12);
    }

    #[test]
    fn rank_deficient_jacobian_is_infeasible() {
        let b = Mat::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        let err = cancellation_matrix(&Mat::identity(2, 2), &b).unwrap_err();
        assert_eq!(err, DesignError::Infeasible { reason: InfeasibleReason::Rank, m_norm: None });
    }

    #[test]
    fn target_with_orthonormal_jacobian() {
        let h = diag(&[0.5, -1.0]);
        let t = target_correction(&h, &Mat::identity(2, 2), &Mat::identity(2, 2), 0.35).unwrap();
        assert!((t.alpha - 0.35).abs() < 1e-15);
        let a_m = &h + &t.m;
        assert!((numerics::lambda_min(&a_m).unwrap() - 0.35).abs() < 1e-12);
    }

    #[test]
    fn target_on_stiff_example() {
        let h = -Mat::identity(2, 2);
        let b = diag(&[1000.0, 1.0]);
        let t = target_correction(&h, &b, &Mat::identity(2, 2), 0.35).unwrap();
        assert!((t.alpha - 0.35).abs() < 1e-12);
        let a_m = &h + b.transpose() * &t.m * &b;
        assert!((numerics::lambda_min(&a_m).unwrap() - 0.35).abs() < 1e-8);
    }

    #[test]
    fn theta_is_half_at_balance() {
        // κ_x‖R‖‖B‖² = κ_pκ_ω‖BᵀRB‖ with B = I, R = I when κ_x = κ_pκ_ω.
        let k = DesignConstants { kappa_x: 1.6, kappa_p: 0.2, kappa_omega: 8.0, ..Default::default() };
        let theta = balancing_theta(&Mat::identity(3, 3), &Mat::identity(3, 3), &k);
        assert!((theta - 0.5).abs() < 1e-15);
    }

    #[test]
    fn theta_vanishes_as_optimism_budget_grows() {
        let b = diag(&[2.0, 0.5]);
        let r = Mat::identity(2, 2);
        let big = DesignConstants { kappa_omega: 1e12, ..Default::default() };
        assert!(balancing_theta(&b, &r, &big) < 1e-10);
    }

    #[test]
    fn split_sums_to_target_on_stiff_example() {
        let k = DesignConstants::default();
        let h = -Mat::identity(2, 2);
        let b = diag(&[1000.0, 1.0]);
        let r = Mat::identity(2, 2);
        let t = target_correction(&h, &b, &r, k.delta).unwrap();
        let (theta, split) = split_theta(&t.c_can, &b, &r, t.alpha, &k).unwrap();
        // ‖B‖ = 1000, ‖BᵀB‖ = 1e6: θ = 0.08e6 / (0.08e6 + 1.6e6)
        assert!((theta - 0.08e6 / (0.08e6 + 1.6e6)).abs() < 1e-15);
        assert!((&split.c_aug + &split.c_opt - &t.m).amax() < 1e-12);
    }

    #[test]
    fn weights_for_isotropic_curvature() {
        // A_M = δI with B having orthonormal columns: a_x = δ/2, a_d = 1/δ.
        let delta = 0.35;
        let b = Mat::from_row_slice(5, 3, &[1., 0., 0., 0., 1., 0., 0., 0., 1., 0., 0., 0., 0., 0., 0.]);
        let h = Mat::identity(3, 3) * delta;
        let (a_x, a_d) = spectral_weights(&h, &b, &Mat::zeros(5, 5)).unwrap();
        assert!((a_x - delta / 2.0).abs() < 1e-14);
        assert!((a_d - 1.0 / delta).abs() < 1e-12);

        let (a_x, a_d) = spectral_weights(&Mat::identity(2, 2), &Mat::identity(2, 2), &Mat::zeros(2, 2)).unwrap();
        assert!((a_x - 0.5).abs() < 1e-15 && (a_d - 1.0).abs() < 1e-14);
        assert_eq!(
            spectral_weights(&-Mat::identity(2, 2), &Mat::identity(2, 2), &Mat::zeros(2, 2)),
            Err(DesignError::WeightsUndefined)
        );
    }

    #[test]
    fn dual_step_from_product_rule() {
        let k = DesignConstants::default();
        // η_x = 0.1, ‖B‖² = 4, κ_p = 0.2 → η_d = 0.5
        let s = eta_from_norms(4.0, 0.8, 0.0, &k, 1.0, 1e9);
        assert!((s.eta_x - 0.1).abs() < 1e-15);
        assert!((s.eta_d - 0.5).abs() < 1e-15);
    }

    #[test]
    fn balancing_step_when_other_caps_are_loose() {
        let k = DesignConstants { kappa_x: 1e9, ..Default::default() };
        let b = diag(&[2.0, 1.0]);
        let split = CorrectionSplit::pure_augmented(Mat::zeros(2, 2)).unwrap();
        let s = step_rule(&Mat::identity(2, 2), &b, &split, &k, (0.5, 0.3));
        let expected = (0.3f64 * 0.2 / (0.5 * 4.0)).sqrt();
        assert!((s.eta_x - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_cap_is_always_infeasible() {
        let inst = generate_instance(1.0, 3, &GeneratorConfig::default()).unwrap();
        let state = SolverState::new(&inst, &inst.x_star, inst.x_star.clone(), inst.mu_star.clone(), &NoiseModel::Exact);
        let k = DesignConstants { m_max: 0.0, ..Default::default() };
        let err = closed_form_design(&inst, &state, &k, Variant::Weighted).unwrap_err();
        assert!(matches!(err, DesignError::Infeasible { reason: InfeasibleReason::NormCap, .. }));
    }

    #[test]
    fn endpoints_place_all_correction_in_one_channel() {
        let inst = generate_instance(3.0, 4, &GeneratorConfig::default()).unwrap();
        let state = SolverState::new(&inst, &inst.x_star, inst.x_star.clone(), inst.mu_star.clone(), &NoiseModel::Exact);
        let k = DesignConstants::default();
        let closed = closed_form_design(&inst, &state, &k, Variant::Weighted).unwrap();
        let aug = pure_endpoint_design(&inst, &state, &k, Endpoint::Augmented, Variant::Weighted).unwrap();
        let opt = pure_endpoint_design(&inst, &state, &k, Endpoint::Optimistic, Variant::Weighted).unwrap();
        assert_eq!(aug.split.c_opt.amax(), 0.0);
        assert_eq!(opt.split.c_aug.amax(), 0.0);
        assert!((&aug.split.total - &closed.split.total).amax() < 1e-12);
        assert!((&opt.split.total - &closed.split.total).amax() < 1e-12);
        assert!(aug.steps != closed.steps && opt.steps != closed.steps);
    }

    #[test]
    fn singleton_grid_reproduces_closed_form() {
        let inst = generate_instance(2.0, 8, &GeneratorConfig::default()).unwrap();
        let x0 = &inst.x_star + Vector::from_element(3, 0.1);
        let state = SolverState::new(&inst, &x0, x0.clone(), Vector::zeros(5), &NoiseModel::Exact);
        let k = DesignConstants::default();
        let grid = OracleGrid { alpha_multipliers: vec![1.0], thetas: vec![ThetaChoice::ClosedForm] };
        let g = grid_oracle_design(&inst, &state, &k, Variant::Weighted, &grid).unwrap();
        let c = closed_form_design(&inst, &state, &k, Variant::Weighted).unwrap();
        assert_eq!(g, c);
        let full = grid_oracle_design(&inst, &state, &k, Variant::Weighted, &OracleGrid::default()).unwrap();
        assert!(full.margin() >= c.margin());
    }

    #[test]
    fn theta_choice_serde() {
        let grid = OracleGrid::default();
        let s = serde_json::to_string(&grid).unwrap();
        assert!(s.contains("\"closed-form\""));
        let back: OracleGrid = serde_json::from_str(&s).unwrap();
        assert_eq!(back, grid);
    }

    #[test]
    fn constants_validation() {
        assert!(DesignConstants::default().validate(5).is_ok());
        let bad = DesignConstants { delta: 0.0, ..Default::default() };
        assert!(bad.validate(5).is_err());
        let bad = DesignConstants { residual_metric: ResidualMetric::Diagonal(vec![1.0, -1.0]), ..Default::default() };
        assert!(bad.validate(2).is_err());
    }
}
