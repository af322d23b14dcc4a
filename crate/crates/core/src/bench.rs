//! Benchmark harness: condition levels × instances × methods.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{tune_baseline, BaselineGrid, BaselineKind};
use crate::design::{grid_oracle_run, DesignConstants, DesignSchedule, Endpoint, OracleGrid, Variant};
use crate::dynamics::{
    run_trajectory, validate_thresholds, DynamicsError, FailureReason, InfeasibleReason, Initialization, NoiseModel,
    RunRecord, DEFAULT_THRESHOLDS,
};
use crate::numerics::{self, Vector};
use crate::problem::{generate_instance, GeneratorConfig, ProblemError, ProblemInstance};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("toml error: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("toml error: {0}")]
    TomlSer(#[from] toml::ser::Error),
    #[error("thread pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    ClosedHybrid,
    GridHybrid,
    PureAug,
    PureOpt,
    Ogda,
    Eg,
    Pdhg,
    LinAl,
    Gda,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::ClosedHybrid,
        Method::GridHybrid,
        Method::PureAug,
        Method::PureOpt,
        Method::Ogda,
        Method::Eg,
        Method::Pdhg,
        Method::LinAl,
        Method::Gda,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Self::ClosedHybrid => "closed-hybrid",
            Self::GridHybrid => "grid-hybrid",
            Self::PureAug => "pure-aug",
            Self::PureOpt => "pure-opt",
            Self::Ogda => "ogda",
            Self::Eg => "eg",
            Self::Pdhg => "pdhg",
            Self::LinAl => "lin-al",
            Self::Gda => "gda",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Self::ClosedHybrid => "closed-form hybrid correction (per-iteration design)",
            Self::GridHybrid => "grid-searched hybrid oracle over residual strength and split",
            Self::PureAug => "target correction placed entirely in the augmented channel",
            Self::PureOpt => "target correction placed entirely in the optimistic channel",
            Self::Ogda => "optimistic gradient descent-ascent on the saddle operator",
            Self::Eg => "extragradient on the saddle operator",
            Self::Pdhg => "primal-dual extrapolated update",
            Self::LinAl => "linearized augmented Lagrangian",
            Self::Gda => "plain simultaneous gradient descent-ascent",
        }
    }

    pub fn is_matrix_design(self) -> bool {
        matches!(self, Self::ClosedHybrid | Self::GridHybrid | Self::PureAug | Self::PureOpt)
    }

    fn baseline(self) -> Option<BaselineKind> {
        match self {
            Self::Ogda => Some(BaselineKind::Ogda),
            Self::Eg => Some(BaselineKind::Eg),
            Self::Pdhg => Some(BaselineKind::Pdhg),
            Self::LinAl => Some(BaselineKind::LinAl),
            Self::Gda => Some(BaselineKind::Gda),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|m| m.id() == s)
            .ok_or_else(|| format!("unknown method `{s}`"))
    }
}

/// A method plus its step-weight variant (matrix-design methods only).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MethodChoice {
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<Variant>,
}

impl MethodChoice {
    pub fn new(method: Method, variant: Variant) -> Self {
        Self {
            method,
            variant: method.is_matrix_design().then_some(variant),
        }
    }

    fn variant_or_default(&self) -> Variant {
        self.variant.unwrap_or(Variant::Weighted)
    }

    /// `closed-hybrid-weighted`, `pdhg`, ...
    pub fn label(&self) -> String {
        if self.method.is_matrix_design() {
            format!("{}-{}", self.method.id(), self.variant_or_default().as_str())
        } else {
            self.method.id().to_string()
        }
    }
}

/// How the multiplier is started.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DualStart {
    Zero,
    /// The instance's `μ⋆`.
    Solution,
    /// `argmin_μ ‖∇f(x₀) + J_h(x₀)ᵀμ‖`.
    LeastSquares,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    /// `‖x₀ − x⋆‖` (random Gaussian direction).
    pub primal_radius: f64,
    pub dual: DualStart,
    /// Norm of a random Gaussian offset added to the dual start.
    pub dual_radius: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            primal_radius: 0.1,
            dual: DualStart::Solution,
            dual_radius: 0.0,
        }
    }
}

/// Starting point with `x₋₁ = x₀`; the random directions come from `seed`.
pub fn initialize(inst: &ProblemInstance, cfg: &InitConfig, seed: u64) -> Initialization {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut unit = |len: usize| {
        let v = Vector::from_fn(len, |_, _| StandardNormal.sample(&mut rng));
        let norm = v.norm();
        if norm > 0.0 {
            v / norm
        } else {
            v
        }
    };
    let x0 = &inst.x_star + unit(inst.n) * cfg.primal_radius;
    let base = match cfg.dual {
        DualStart::Zero => Vector::zeros(inst.m),
        DualStart::Solution => inst.mu_star.clone(),
        DualStart::LeastSquares => {
            let b = inst.eval_jac_h(&x0);
            match numerics::pseudoinverse(&b, numerics::DEFAULT_RANK_TOL) {
                Ok(p) => -(p.transpose() * inst.eval_grad_f(&x0)),
                Err(_) => Vector::zeros(inst.m),
            }
        }
    };
    let mu0 = base + unit(inst.m) * cfg.dual_radius;
    Initialization::at_rest(x0, mu0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub cond_levels: Vec<f64>,
    pub instances_per_level: usize,
    pub seed: u64,
    pub budget: usize,
    pub thresholds: Vec<f64>,
    /// Threshold used for success counts and median hitting times.
    pub success_threshold: f64,
    /// Reuse the same instance seeds at every condition level, so only
    /// the singular values of `B⋆` change across levels.
    pub pair_levels: bool,
    pub methods: Vec<MethodChoice>,
    pub constants: DesignConstants,
    pub generator: GeneratorConfig,
    pub init: InitConfig,
    pub oracle_grid: OracleGrid,
    pub baseline_grid: BaselineGrid,
    /// Write one JSON-lines log per run.
    pub write_logs: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut methods = Vec::new();
        for m in [Method::ClosedHybrid, Method::GridHybrid, Method::PureAug, Method::PureOpt] {
            methods.push(MethodChoice::new(m, Variant::Weighted));
            methods.push(MethodChoice::new(m, Variant::Unit));
        }
        for m in [Method::Ogda, Method::Eg, Method::Pdhg, Method::LinAl, Method::Gda] {
            methods.push(MethodChoice { method: m, variant: None });
        }
        Self {
            cond_levels: vec![1.0, 2.0, 3.0, 5.0, 8.0, 13.0],
            instances_per_level: 5,
            seed: 20240,
            budget: 2000,
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            success_threshold: 1e-3,
            pair_levels: true,
            methods,
            constants: DesignConstants::default(),
            generator: GeneratorConfig::default(),
            init: InitConfig::default(),
            oracle_grid: OracleGrid::default(),
            baseline_grid: BaselineGrid::default(),
            write_logs: true,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, BenchError> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, BenchError> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String, BenchError> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: &str| Err(BenchError::InvalidConfig(m.to_string()));
        if self.cond_levels.is_empty() || self.cond_levels.iter().any(|&k| !(k >= 1.0 && k.is_finite())) {
            return bad("cond_levels must be non-empty and each >= 1");
        }
        if self.instances_per_level == 0 {
            return bad("instances_per_level must be >= 1");
        }
        if self.budget == 0 {
            return bad("budget must be >= 1");
        }
        validate_thresholds(&self.thresholds).map_err(|e| BenchError::InvalidConfig(e.to_string()))?;
        if !self.thresholds.contains(&self.success_threshold) {
            return bad("success_threshold must be one of thresholds");
        }
        if self.methods.is_empty() {
            return bad("methods must be non-empty");
        }
        if !(self.init.primal_radius >= 0.0 && self.init.dual_radius >= 0.0) {
            return bad("init radii must be >= 0");
        }
        self.constants
            .validate(self.generator.m)
            .map_err(|e| BenchError::InvalidConfig(e.to_string()))?;
        Ok(())
    }

    /// Seed of instance `idx` at level index `level`.
    pub fn instance_seed(&self, level: usize, idx: usize) -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let stream = if self.pair_levels {
            idx as u64
        } else {
            ((level as u64) << 32) | idx as u64
        };
        rng.set_stream(stream);
        rng.next_u64()
    }
}

/// Result of one (method, instance) run plus the tuned parameters, if any.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub level: f64,
    pub index: usize,
    pub label: String,
    pub record: RunRecord,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tuned: Option<serde_json::Value>,
}

/// Runs one method from `init` on `inst`.
pub fn run_method(
    inst: &ProblemInstance,
    choice: &MethodChoice,
    instance_id: &str,
    init: &Initialization,
    cfg: &ExperimentConfig,
) -> Result<(RunRecord, Option<serde_json::Value>), DynamicsError> {
    let label = choice.label();
    let variant = choice.variant_or_default();
    let k = cfg.constants.clone();
    let run = |mut sched: DesignSchedule| {
        run_trajectory(inst, &label, instance_id, &mut sched, init, cfg.budget, &NoiseModel::Exact, &cfg.thresholds)
    };
    match choice.method {
        Method::ClosedHybrid => Ok((run(DesignSchedule::closed_form(k, variant))?, None)),
        Method::PureAug => Ok((run(DesignSchedule::endpoint(k, variant, Endpoint::Augmented))?, None)),
        Method::PureOpt => Ok((run(DesignSchedule::endpoint(k, variant, Endpoint::Optimistic))?, None)),
        Method::GridHybrid => {
            let (rec, choice) = grid_oracle_run(
                inst,
                &label,
                instance_id,
                init,
                cfg.budget,
                &NoiseModel::Exact,
                &cfg.thresholds,
                &k,
                variant,
                &cfg.oracle_grid,
            )?;
            Ok((rec, serde_json::to_value(choice).ok()))
        }
        other => {
            let kind = other.baseline().expect("baseline method");
            let (mut rec, step) =
                tune_baseline(inst, kind, instance_id, init, cfg.budget, &cfg.thresholds, &cfg.baseline_grid)?;
            rec.method = label;
            Ok((rec, serde_json::to_value(step).ok()))
        }
    }
}

pub fn instance_id(level: f64, idx: usize) -> String {
    format!("{level}_{idx}")
}

/// Generates every instance, then runs every method on it. Output order is
/// level, then instance, then method, regardless of `jobs`.
pub fn run_experiment(cfg: &ExperimentConfig, jobs: usize) -> Result<Vec<RunOutcome>, BenchError> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?;
    pool.install(|| {
        let mut instances = Vec::new();
        for (li, &level) in cfg.cond_levels.iter().enumerate() {
            for idx in 0..cfg.instances_per_level {
                let seed = cfg.instance_seed(li, idx);
                let inst = generate_instance(level, seed, &cfg.generator)?;
                let init = initialize(&inst, &cfg.init, seed);
                instances.push((level, idx, inst, init));
            }
        }
        let tasks: Vec<(usize, MethodChoice)> = (0..instances.len())
            .flat_map(|i| cfg.methods.iter().map(move |m| (i, *m)))
            .collect();
        tasks
            .par_iter()
            .map(|(i, choice)| {
                let (level, idx, inst, init) = &instances[*i];
                let id = instance_id(*level, *idx);
                let (record, tuned) = run_method(inst, choice, &id, init, cfg)?;
                Ok(RunOutcome {
                    level: *level,
                    index: *idx,
                    label: choice.label(),
                    record,
                    tuned,
                })
            })
            .collect()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub level: f64,
    pub method: String,
    pub runs: usize,
    pub successes: usize,
    /// Median hitting time among successes; absent when fewer than half
    /// of the runs succeed.
    pub median_hit: Option<f64>,
    /// Median of `max_t ‖M_t‖₂` over runs that formed a design.
    pub median_max_m_norm: Option<f64>,
    pub norm_cap_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SummaryTable {
    pub threshold: f64,
    pub rows: Vec<SummaryRow>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[mid] } else { 0.5 * (v[mid - 1] + v[mid]) })
}

/// Aggregates per (level, method) in order of first appearance.
pub fn summarize(outcomes: &[RunOutcome], threshold: f64) -> SummaryTable {
    let mut keys: Vec<(f64, String)> = Vec::new();
    for o in outcomes {
        if !keys.iter().any(|(l, m)| *l == o.level && *m == o.label) {
            keys.push((o.level, o.label.clone()));
        }
    }
    let rows = keys
        .into_iter()
        .map(|(level, method)| {
            let group: Vec<&RunRecord> = outcomes
                .iter()
                .filter(|o| o.level == level && o.label == method)
                .map(|o| &o.record)
                .collect();
            let hits: Vec<f64> = group.iter().filter_map(|r| r.hit_time(threshold)).map(|t| t as f64).collect();
            let norms: Vec<f64> = group.iter().filter_map(|r| r.max_m_norm).collect();
            let runs = group.len();
            let successes = hits.len();
            SummaryRow {
                level,
                method,
                runs,
                successes,
                median_hit: if 2 * successes < runs { None } else { median(&hits) },
                median_max_m_norm: median(&norms),
                norm_cap_failures: group
                    .iter()
                    .filter(|r| {
                        matches!(
                            r.failure,
                            Some(FailureReason::DesignInfeasible { reason: InfeasibleReason::NormCap, .. })
                        )
                    })
                    .count(),
            }
        })
        .collect();
    SummaryTable { threshold, rows }
}

impl SummaryTable {
    pub fn row(&self, level: f64, method: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.level == level && r.method == method)
    }
}

pub const SUCCESS_CSV: &str = "success.csv";
pub const HITTING_CSV: &str = "hitting_time.csv";
pub const MNORM_CSV: &str = "m_norm.csv";

#[derive(Debug, Serialize, Deserialize)]
struct SuccessCsvRow {
    level: f64,
    method: String,
    threshold: f64,
    runs: usize,
    successes: usize,
    norm_cap_failures: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct HittingCsvRow {
    level: f64,
    method: String,
    threshold: f64,
    median_hit: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MNormCsvRow {
    level: f64,
    method: String,
    median_max_m_norm: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub seed: u64,
    pub config: ExperimentConfig,
}

fn write_rows<T: Serialize>(path: &Path, rows: impl Iterator<Item = T>) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, BenchError> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|x| x.map_err(BenchError::from)).collect()
}

/// File name of a run log.
pub fn log_file_name(label: &str, level: f64, idx: usize) -> String {
    format!("{label}_{level}_{idx}.jsonl")
}

/// Writes the three table CSVs, `records.jsonl`, `manifest.json` and,
/// when enabled, per-run logs under `logs/`.
pub fn export(out_dir: &Path, cfg: &ExperimentConfig, table: &SummaryTable, outcomes: &[RunOutcome]) -> Result<(), BenchError> {
    fs::create_dir_all(out_dir)?;
    let th = table.threshold;
    write_rows(
        &out_dir.join(SUCCESS_CSV),
        table.rows.iter().map(|r| SuccessCsvRow {
            level: r.level,
            method: r.method.clone(),
            threshold: th,
            runs: r.runs,
            successes: r.successes,
            norm_cap_failures: r.norm_cap_failures,
        }),
    )?;
    write_rows(
        &out_dir.join(HITTING_CSV),
        table.rows.iter().map(|r| HittingCsvRow {
            level: r.level,
            method: r.method.clone(),
            threshold: th,
            median_hit: r.median_hit,
        }),
    )?;
    write_rows(
        &out_dir.join(MNORM_CSV),
        table.rows.iter().map(|r| MNormCsvRow {
            level: r.level,
            method: r.method.clone(),
            median_max_m_norm: r.median_max_m_norm,
        }),
    )?;

    let mut w = BufWriter::new(fs::File::create(out_dir.join("records.jsonl"))?);
    for o in outcomes {
        serde_json::to_writer(&mut w, o)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;

    if cfg.write_logs {
        let dir = out_dir.join("logs");
        fs::create_dir_all(&dir)?;
        for o in outcomes {
            write_run_log(&dir.join(log_file_name(&o.label, o.level, o.index)), &o.record)?;
        }
    }

    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        config: cfg.clone(),
    };
    let mut f = fs::File::create(out_dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    f.write_all(b"\n")?;
    Ok(())
}

/// One JSON object per iteration, then `{"summary": <record>}`.
pub fn write_run_log(path: &Path, record: &RunRecord) -> Result<(), BenchError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for l in &record.log {
        serde_json::to_writer(&mut w, l)?;
        w.write_all(b"\n")?;
    }
    serde_json::to_writer(&mut w, &serde_json::json!({ "summary": record }))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Reads the three CSVs back into a table.
pub fn read_tables(dir: &Path) -> Result<SummaryTable, BenchError> {
    let success: Vec<SuccessCsvRow> = read_rows(&dir.join(SUCCESS_CSV))?;
    let hitting: Vec<HittingCsvRow> = read_rows(&dir.join(HITTING_CSV))?;
    let mnorm: Vec<MNormCsvRow> = read_rows(&dir.join(MNORM_CSV))?;
    if success.len() != hitting.len() || success.len() != mnorm.len() {
        return Err(BenchError::InvalidConfig("table files have different row counts".into()));
    }
    let threshold = success.first().map_or(0.0, |r| r.threshold);
    let rows = success
        .into_iter()
        .zip(hitting)
        .zip(mnorm)
        .map(|((s, h), m)| SummaryRow {
            level: s.level,
            method: s.method,
            runs: s.runs,
            successes: s.successes,
            median_hit: h.median_hit,
            median_max_m_norm: m.median_max_m_norm,
            norm_cap_failures: s.norm_cap_failures,
        })
        .collect();
    Ok(SummaryTable { threshold, rows })
}

/// Reruns the experiment recorded in a manifest.
pub fn replay(manifest_path: &Path, jobs: usize) -> Result<Vec<RunOutcome>, BenchError> {
    let m: Manifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
    run_experiment(&m.config, jobs)
}

/// Runs, summarizes and exports; returns the table and outcomes.
pub fn run_and_export(cfg: &ExperimentConfig, out_dir: &Path, jobs: usize) -> Result<(SummaryTable, Vec<RunOutcome>), BenchError> {
    let outcomes = run_experiment(cfg, jobs)?;
    let table = summarize(&outcomes, cfg.success_threshold);
    export(out_dir, cfg, &table, &outcomes)?;
    Ok((table, outcomes))
}

pub fn table_paths(out_dir: &Path) -> [PathBuf; 3] {
    [out_dir.join(SUCCESS_CSV), out_dir.join(HITTING_CSV), out_dir.join(MNORM_CSV)]
}
