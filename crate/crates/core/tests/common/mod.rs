//! Shared oracles for the integration and acceptance tests.
#![allow(dead_code)]

use matcorr::bench::{ExperimentConfig, RunOutcome, SummaryTable};
use matcorr::design::{design_at, target_correction, DesignConstants, Realization, Variant};
use matcorr::dynamics::{
    step_aug, step_hybrid, step_opt, CorrectionSplit, NoiseModel, SolverState, StepSizes,
};
use matcorr::numerics::{self, Mat, Vector};
use matcorr::problem::{generate_instance, GeneratorConfig, ProblemInstance};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const LEVELS: [f64; 6] = [1.0, 2.0, 3.0, 5.0, 8.0, 13.0];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Mat {
    Mat::from_fn(r, c, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

pub fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vector {
    Vector::from_fn(n, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

pub fn random_sym(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Mat {
    numerics::symmetrize(&gaussian(rng, n, n, scale))
}

pub fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> Mat {
    let g = gaussian(rng, n, n, 1.0);
    numerics::symmetrize(&(&g * g.transpose() + Mat::identity(n, n) * 0.1))
}

pub fn random_instance(rng: &mut ChaCha8Rng) -> ProblemInstance {
    let level = LEVELS[rng.random_range(0..LEVELS.len())];
    generate_instance(level, rng.random(), &GeneratorConfig::default()).expect("valid generator config")
}

/// Starting history near the solution. `lambda0` is the dual start of the
/// equivalent pure augmented run; a realization with optimistic part `Ω`
/// starts from `μ₀ = λ₀ + Ω h₋₁`.
pub struct Start {
    pub x_prev: Vector,
    pub x0: Vector,
    pub lambda0: Vector,
}

pub fn random_start(rng: &mut ChaCha8Rng, inst: &ProblemInstance) -> Start {
    let x0 = &inst.x_star + gaussian_vec(rng, inst.n, 0.01);
    Start {
        x_prev: &x0 + gaussian_vec(rng, inst.n, 0.002),
        x0,
        lambda0: &inst.mu_star + gaussian_vec(rng, inst.m, 0.01),
    }
}

/// Target correction at the KKT point and conservative steps for it, so
/// random perturbations of it give bounded 200-step trajectories.
pub fn stable_base(rng: &mut ChaCha8Rng, inst: &ProblemInstance) -> (Mat, StepSizes) {
    let h = inst.eval_hess_lagrangian(&inst.x_star, &inst.mu_star);
    let b = inst.eval_jac_h(&inst.x_star);
    let k = DesignConstants { m_max: f64::INFINITY, ..Default::default() };
    let d = design_at(&h, &b, &k, Variant::Unit, 1.0, Realization::ClosedForm).expect("feasible at the solution");
    let shrink = rng.random_range(0.1..0.5);
    let steps = StepSizes::new(d.steps.eta_x * shrink, d.steps.eta_d * shrink).expect("positive");
    (d.split.total, steps)
}

fn max_gap(a: &[SolverState], b: &[SolverState]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (&p.x - &q.x).norm()).fold(0.0, f64::max)
}

/// `None` if the trajectory leaves the finite range.
fn run<F, E>(first: SolverState, iterations: usize, mut step: F) -> Option<Vec<SolverState>>
where
    F: FnMut(&SolverState) -> Result<SolverState, E>,
{
    let mut out = vec![first];
    for _ in 0..iterations {
        let next = step(out.last().expect("non-empty")).ok()?;
        out.push(next);
    }
    Some(out)
}

/// Hybrid `(C, Ω)` against optimistic `C + Ω` started from `ν₀ = μ₀ + C h₋₁`.
/// Returns the largest primal gap and the largest `‖ν_t − (μ_t + C h_{t−1})‖`,
/// or `None` if the sampled system diverges.
pub fn hybrid_vs_optimistic(seed: u64, noise_kind: NoiseKind, iterations: usize) -> Option<(f64, f64)> {
    let mut r = rng(seed);
    let inst = random_instance(&mut r);
    let s = random_start(&mut r, &inst);
    let (m, steps) = stable_base(&mut r, &inst);
    let theta = r.random_range(0.0..1.0);
    let c = &m * theta + random_sym(&mut r, inst.m, 0.05);
    let omega = &m - &c + gaussian(&mut r, inst.m, inst.m, 0.05);
    let noise = noise_kind.model(&mut r, &inst, iterations);

    let h_prev = noise.residual_memory(-1, &inst.eval_h(&s.x_prev));
    let mu0 = &s.lambda0 + &omega * &h_prev;
    let h_state = SolverState::new(&inst, &s.x_prev, s.x0.clone(), mu0.clone(), &noise);
    let nu0 = &mu0 + &c * &h_state.h_prev;
    let o_state = SolverState::new(&inst, &s.x_prev, s.x0.clone(), nu0, &noise);
    let split = CorrectionSplit::new(c.clone(), omega.clone()).expect("symmetric C");
    let total = &c + &omega;
    let hyb = run(h_state, iterations, |st| step_hybrid(&inst, st, &split, steps, &noise))?;
    let opt = run(o_state, iterations, |st| step_opt(&inst, st, &total, steps, &noise))?;
    let dual = hyb
        .iter()
        .zip(&opt)
        .map(|(h, o)| (&o.mu - (&h.mu + &c * &h.h_prev)).norm())
        .fold(0.0, f64::max);
    Some((max_gap(&hyb, &opt), dual))
}

/// Two splits with the same total and consistent effective duals.
pub fn split_additivity(seed: u64, noise_kind: NoiseKind, iterations: usize) -> Option<f64> {
    let mut r = rng(seed);
    let inst = random_instance(&mut r);
    let s = random_start(&mut r, &inst);
    let (m, steps) = stable_base(&mut r, &inst);
    let total = &m + gaussian(&mut r, inst.m, inst.m, 0.05);
    let c1 = &m * r.random_range(0.0..1.0) + random_sym(&mut r, inst.m, 0.05);
    let c2 = &m * r.random_range(0.0..1.0) + random_sym(&mut r, inst.m, 0.05);
    let noise = noise_kind.model(&mut r, &inst, iterations);

    let h_prev = noise.residual_memory(-1, &inst.eval_h(&s.x_prev));
    let mu1 = &s.lambda0 + (&total - &c1) * &h_prev;
    let mu2 = &s.lambda0 + (&total - &c2) * &h_prev;
    assert!((&mu2 - &mu1 - (&c1 - &c2) * &h_prev).amax() < 1e-9);
    let s1 = SolverState::new(&inst, &s.x_prev, s.x0.clone(), mu1, &noise);
    let s2 = SolverState::new(&inst, &s.x_prev, s.x0.clone(), mu2, &noise);
    let sp1 = CorrectionSplit::new(c1.clone(), &total - &c1).expect("symmetric");
    let sp2 = CorrectionSplit::new(c2.clone(), &total - &c2).expect("symmetric");
    let a = run(s1, iterations, |st| step_hybrid(&inst, st, &sp1, steps, &noise))?;
    let b = run(s2, iterations, |st| step_hybrid(&inst, st, &sp2, steps, &noise))?;
    Some(max_gap(&a, &b))
}

/// Hybrid `(C₁, C₂)` with `C₂P_n = 0` under partial residual noise against
/// full augmentation with `M = C₁ + C₂`, started from `μ₀ = λ₀ + C₂h(x₋₁)`.
pub fn partial_noise_equivalence(seed: u64, iterations: usize) -> Option<f64> {
    let mut r = rng(seed);
    let inst = random_instance(&mut r);
    let s = random_start(&mut r, &inst);
    let (base, steps) = stable_base(&mut r, &inst);
    let mut noisy: Vec<usize> = (0..inst.m).filter(|_| r.random_bool(0.5)).collect();
    if noisy.is_empty() {
        noisy.push(0);
    }
    let noise = NoiseModel::partial_gaussian(r.random(), iterations, inst.m, noisy.clone(), 1e-4);
    let p = noise.noisy_projection(inst.m);
    let c1 = &base + random_sym(&mut r, inst.m, 0.05);
    let c2 = gaussian(&mut r, inst.m, inst.m, 0.05) * (Mat::identity(inst.m, inst.m) - &p);
    assert!((&c2 * &p).amax() == 0.0);
    let m = &c1 + &c2;

    let mu0 = &s.lambda0 + &c2 * inst.eval_h(&s.x_prev);
    let hs = SolverState::new(&inst, &s.x_prev, s.x0.clone(), mu0, &noise);
    let aus = SolverState::new(&inst, &s.x_prev, s.x0.clone(), s.lambda0.clone(), &noise);
    let split = CorrectionSplit::new(c1, c2).expect("symmetric");
    let hyb = run(hs, iterations, |st| step_hybrid(&inst, st, &split, steps, &noise))?;
    let aug = run(aus, iterations, |st| step_aug(&inst, st, &m, steps, &noise))?;
    Some(max_gap(&hyb, &aug))
}

#[derive(Debug, Clone, Copy)]
pub enum NoiseKind {
    Exact,
    Shared,
}

impl NoiseKind {
    fn model(self, r: &mut ChaCha8Rng, inst: &ProblemInstance, iterations: usize) -> NoiseModel {
        match self {
            Self::Exact => NoiseModel::Exact,
            Self::Shared => NoiseModel::shared_gaussian(r.random(), iterations, inst.n, inst.m, 1e-3, 1e-4),
        }
    }
}

/// Cancellation residual (relative to `max(1, ‖H‖)`) and target-curvature
/// slack `λ_min(H + BᵀMB) − δ` for a random `(H, B, R, δ)`.
pub fn cancellation_case(seed: u64) -> (f64, f64) {
    let mut r = rng(seed);
    let n = r.random_range(1..=4);
    let m = n + r.random_range(0..=3);
    let h = random_sym(&mut r, n, 2.0);
    let b = gaussian(&mut r, m, n, 1.0);
    let res = random_spd(&mut r, m);
    let delta = r.random_range(0.01..2.0);
    let t = target_correction(&h, &b, &res, delta).expect("full column rank");
    let h_norm = numerics::spectral_norm(&h).expect("finite");
    let cancel = numerics::spectral_norm(&(&h + b.transpose() * &t.c_can * &b)).expect("finite") / h_norm.max(1.0);
    let curv = numerics::lambda_min(&(&h + b.transpose() * &t.m * &b)).expect("finite") - delta;
    (cancel, curv)
}

/// Worst relative central-difference errors of `∇f`, `J_h` and `∇²ₓₓL` at
/// `points` random points of `inst`.
pub fn derivative_errors(inst: &ProblemInstance, r: &mut ChaCha8Rng, points: usize) -> (f64, f64, f64) {
    let rel = |a: &Mat, b: &Mat| (a - b).norm() / b.norm().max(1.0);
    let (mut eg, mut ej, mut eh) = (0.0f64, 0.0f64, 0.0f64);
    let step = 1e-5;
    for _ in 0..points {
        let x = &inst.x_star + gaussian_vec(r, inst.n, 0.5);
        let mu = &inst.mu_star + gaussian_vec(r, inst.m, 0.5);
        let mut g_fd = Mat::zeros(inst.n, 1);
        let mut j_fd = Mat::zeros(inst.m, inst.n);
        let mut h_fd = Mat::zeros(inst.n, inst.n);
        let grad_l = |x: &Vector| inst.eval_grad_f(x) + inst.eval_jac_h(x).transpose() * &mu;
        for i in 0..inst.n {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += step;
            xm[i] -= step;
            g_fd[(i, 0)] = (inst.eval_f(&xp) - inst.eval_f(&xm)) / (2.0 * step);
            j_fd.set_column(i, &((inst.eval_h(&xp) - inst.eval_h(&xm)) / (2.0 * step)));
            h_fd.set_column(i, &((grad_l(&xp) - grad_l(&xm)) / (2.0 * step)));
        }
        let g = Mat::from_column_slice(inst.n, 1, inst.eval_grad_f(&x).as_slice());
        eg = eg.max(rel(&g_fd, &g));
        ej = ej.max(rel(&j_fd, &inst.eval_jac_h(&x)));
        eh = eh.max(rel(&numerics::symmetrize(&h_fd), &inst.eval_hess_lagrangian(&x, &mu)));
    }
    (eg, ej, eh)
}

/// Worst violations of S1, S3 and product saturation over every logged
/// iteration of the matrix-design runs, recomputed from the logged iterates.
/// Each entry is `(max relative excess of S1, of S3, max |η_xη_d‖B‖² − κ_p|, iterations checked)`.
pub fn step_rule_violations(outcomes: &[RunOutcome], cfg: &ExperimentConfig) -> (f64, f64, f64, usize) {
    let k = &cfg.constants;
    let (mut s1, mut s3, mut sat, mut count) = (f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0f64, 0usize);
    for o in outcomes {
        let pure_opt = o.label.starts_with("pure-opt");
        let matrix = ["closed-hybrid", "grid-hybrid", "pure-aug", "pure-opt"].iter().any(|p| o.label.starts_with(p));
        if !matrix {
            continue;
        }
        let li = cfg.cond_levels.iter().position(|&l| l == o.level).expect("known level");
        let inst = generate_instance(o.level, cfg.instance_seed(li, o.index), &cfg.generator).expect("valid");
        for l in &o.record.log {
            let Some(info) = &l.step else { continue };
            count += 1;
            let x = Vector::from_column_slice(&l.x);
            let mu = Vector::from_column_slice(&l.mu);
            let (h, b) = (inst.eval_hess_lagrangian(&x, &mu), inst.eval_jac_h(&x));
            let r = k.residual_metric.matrix(b.nrows());
            let c_can = matcorr::design::cancellation_matrix(&h, &b).expect("full rank at logged iterate");
            let alpha = info.alpha.expect("alpha logged");
            let theta = info.theta.expect("theta logged");
            let (c_aug, c_opt) = if pure_opt {
                (Mat::zeros(b.nrows(), b.nrows()), &c_can + &r * alpha)
            } else {
                (&c_can + &r * (theta * alpha), &r * ((1.0 - theta) * alpha))
            };
            let b_sq = numerics::spectral_norm(&b).expect("finite").powi(2);
            let curv = numerics::spectral_norm(&(&h + b.transpose() * &c_aug * &b)).expect("finite");
            let c_opt_norm = numerics::spectral_norm(&c_opt).expect("finite");
            s1 = s1.max((info.eta_x * curv - k.kappa_x) / k.kappa_x);
            s3 = s3.max((info.eta_x * c_opt_norm * b_sq - k.kappa_p * k.kappa_omega) / (k.kappa_p * k.kappa_omega));
            sat = sat.max((info.eta_x * info.eta_d * b_sq - k.kappa_p).abs());
        }
    }
    (s1, s3, sat, count)
}

/// Longest run of strictly increasing consecutive values.
pub fn longest_increasing_run(values: &[Option<f64>]) -> usize {
    let mut best = 0;
    let mut run = 0;
    let mut prev: Option<f64> = None;
    for v in values {
        match (prev, v) {
            (Some(p), Some(c)) if *c > p => run += 1,
            (_, Some(_)) => run = 1,
            (_, None) => run = 0,
        }
        best = best.max(run);
        prev = *v;
    }
    best
}

pub fn successes(t: &SummaryTable, level: f64, method: &str) -> usize {
    t.row(level, method).map_or(0, |r| r.successes)
}
