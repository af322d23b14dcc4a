//! Command-line entry points.
//!
//! Exit codes: 0 success, 1 run-level failure (outputs are still written),
//! 2 usage or configuration error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::bench::{self, BenchError, DualStart, ExperimentConfig, InitConfig, Method, MethodChoice};
use crate::design::Variant;
use crate::problem::{generate_instance, GeneratorConfig, ProblemInstance};
use crate::spectral::{self, StepGrid};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUN_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "matcorr", version, about = "Matrix-corrected primal-dual methods for equality-constrained optimization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a random instance with a prescribed Jacobian condition number.
    Generate(GenerateArgs),
    /// Run one method on one instance.
    Run(RunArgs),
    /// Run the benchmark over condition levels, instances and methods.
    Bench(BenchArgs),
    /// Local spectral analyses.
    Spectral(SpectralArgs),
    /// Print a JSON description of every command and flag.
    HelpJson,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Condition number of the constraint Jacobian at the solution (>= 1).
    #[arg(long)]
    pub cond: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Strength of the constraint nonlinearity.
    #[arg(long, default_value_t = 0.1)]
    pub eps_nl: f64,
    /// Output JSON path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum VariantArg {
    Unit,
    Weighted,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Unit => Variant::Unit,
            VariantArg::Weighted => Variant::Weighted,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DualArg {
    Zero,
    Solution,
    LeastSquares,
}

impl From<DualArg> for DualStart {
    fn from(d: DualArg) -> Self {
        match d {
            DualArg::Zero => DualStart::Zero,
            DualArg::Solution => DualStart::Solution,
            DualArg::LeastSquares => DualStart::LeastSquares,
        }
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Instance JSON written by `generate`.
    #[arg(long)]
    pub instance: Option<PathBuf>,
    /// Method id, or `list` to print the available ids.
    #[arg(long)]
    pub method: String,
    #[arg(long, value_enum, default_value_t = VariantArg::Weighted)]
    pub variant: VariantArg,
    #[arg(long, default_value_t = 2000)]
    pub budget: usize,
    /// Output directory for the run log.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Index used in the log file name.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Seed of the starting-point perturbation (defaults to the instance seed).
    #[arg(long)]
    pub init_seed: Option<u64>,
    #[arg(long, default_value_t = 0.1)]
    pub primal_radius: f64,
    #[arg(long, value_enum, default_value_t = DualArg::Solution)]
    pub dual: DualArg,
    #[arg(long, default_value_t = 0.0)]
    pub dual_radius: f64,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// TOML config; unspecified fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "bench_out")]
    pub out_dir: PathBuf,
    /// Worker threads (defaults to the available parallelism).
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long)]
    pub instances: Option<usize>,
    /// Comma-separated condition levels.
    #[arg(long, value_delimiter = ',')]
    pub levels: Option<Vec<f64>>,
    /// Skip the per-run JSON-lines logs.
    #[arg(long)]
    pub no_logs: bool,
    /// Print the effective config as TOML and exit.
    #[arg(long)]
    pub print_config: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SpectralMode {
    /// Scalar versus matrix augmentation on the stiff two-dimensional example.
    Stiffness,
    /// Contraction gap surface for a scalar problem with penalty `c`.
    Gap,
    /// Margin model sweep over step ratios for a scalar problem.
    Margin,
}

#[derive(Debug, Args)]
pub struct SpectralArgs {
    #[arg(long, value_enum)]
    pub mode: SpectralMode,
    #[arg(long, default_value = "spectral_out")]
    pub out_dir: PathBuf,
    /// Scalar curvature.
    #[arg(long, default_value_t = 2.0, allow_negative_numbers = true)]
    pub a: f64,
    /// Scalar constraint Jacobian.
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub b: f64,
    /// Scalar penalty (gap mode).
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub c: f64,
    /// Points per axis of the log-spaced step grid over [1e-8, 1].
    #[arg(long, default_value_t = 40)]
    pub grid_points: usize,
    /// Comma-separated primal steps (margin mode).
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.02, 0.01, 0.005])]
    pub eta_x: Vec<f64>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Run(String),
}

impl From<BenchError> for CliError {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::Dynamics(d) => CliError::Run(d.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

fn usage<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Usage(e.to_string())
}

/// Parses `args` (including the program name) and executes the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Run(a) => cmd_run(&a),
        Command::Bench(a) => cmd_bench(&a),
        Command::Spectral(a) => cmd_spectral(&a),
        Command::HelpJson => {
            println!("{}", serde_json::to_string_pretty(&help_json()).expect("json"));
            Ok(EXIT_OK)
        }
    };
    match result {
        Ok(code) => code,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            EXIT_USAGE
        }
        Err(CliError::Run(m)) => {
            eprintln!("run failed: {m}");
            EXIT_RUN_FAILURE
        }
    }
}

fn cmd_generate(a: &GenerateArgs) -> Result<i32, CliError> {
    let cfg = GeneratorConfig {
        eps_nl: a.eps_nl,
        ..Default::default()
    };
    let inst = generate_instance(a.cond, a.seed, &cfg).map_err(usage)?;
    inst.save(&a.out).map_err(usage)?;
    println!("{}", a.out.display());
    Ok(EXIT_OK)
}

fn cmd_run(a: &RunArgs) -> Result<i32, CliError> {
    if a.method == "list" {
        for m in Method::ALL {
            println!("{}\t{}", m.id(), m.description());
        }
        return Ok(EXIT_OK);
    }
    let method: Method = a.method.parse().map_err(CliError::Usage)?;
    let path = a.instance.as_ref().ok_or_else(|| usage("--instance is required"))?;
    let inst = ProblemInstance::load(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let cfg = ExperimentConfig {
        budget: a.budget,
        cond_levels: vec![inst.kappa_b],
        init: InitConfig {
            primal_radius: a.primal_radius,
            dual: a.dual.into(),
            dual_radius: a.dual_radius,
        },
        generator: GeneratorConfig {
            n: inst.n,
            m: inst.m,
            ..Default::default()
        },
        ..Default::default()
    };
    cfg.validate()?;
    let choice = MethodChoice::new(method, a.variant.into());
    let init = bench::initialize(&inst, &cfg.init, a.init_seed.unwrap_or(inst.seed));
    let id = bench::instance_id(inst.kappa_b, a.index);
    let (record, tuned) = bench::run_method(&inst, &choice, &id, &init, &cfg).map_err(|e| CliError::Run(e.to_string()))?;
    fs::create_dir_all(&a.out).map_err(usage)?;
    let log = a.out.join(bench::log_file_name(&choice.label(), inst.kappa_b, a.index));
    bench::write_run_log(&log, &record)?;
    let summary = json!({
        "method": record.method,
        "instance": record.instance,
        "thresholds": record.thresholds,
        "hitting_times": record.hitting_times,
        "iterations": record.iterations,
        "final_dist": record.final_dist,
        "failure": record.failure,
        "max_m_norm": record.max_m_norm,
        "tuned": tuned,
        "log": log,
    });
    println!("{}", serde_json::to_string_pretty(&summary).expect("json"));
    Ok(if record.failure.is_some() { EXIT_RUN_FAILURE } else { EXIT_OK })
}

fn bench_config(a: &BenchArgs) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p).map_err(|e| usage(format!("{}: {e}", p.display())))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(b) = a.budget {
        cfg.budget = b;
    }
    if let Some(n) = a.instances {
        cfg.instances_per_level = n;
    }
    if let Some(l) = &a.levels {
        cfg.cond_levels = l.clone();
    }
    if a.no_logs {
        cfg.write_logs = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_bench(a: &BenchArgs) -> Result<i32, CliError> {
    let cfg = bench_config(a)?;
    if a.print_config {
        print!("{}", cfg.to_toml_string()?);
        return Ok(EXIT_OK);
    }
    let jobs = match a.jobs {
        Some(0) => return Err(usage("--jobs must be >= 1")),
        Some(j) => j,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let (table, _) = bench::run_and_export(&cfg, &a.out_dir, jobs)?;
    for r in &table.rows {
        let hit = r.median_hit.map_or("-".to_string(), |h| h.to_string());
        let m = r.median_max_m_norm.map_or("-".to_string(), |m| format!("{m:.3}"));
        println!("{:>6} {:<24} {}/{}  median_hit={hit}  median_max_M={m}", r.level, r.method, r.successes, r.runs);
    }
    Ok(EXIT_OK)
}

fn spectral_out(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(usage)
}

fn cmd_spectral(a: &SpectralArgs) -> Result<i32, CliError> {
    if a.grid_points == 0 {
        return Err(usage("--grid-points must be >= 1"));
    }
    let grid = StepGrid::log(1e-8, 1.0, a.grid_points);
    spectral_out(&a.out_dir)?;
    let run = |e: spectral::SpectralError| CliError::Run(e.to_string());
    match a.mode {
        SpectralMode::Stiffness => {
            let report = spectral::stiffness_example(&grid, &spectral::default_scalar_grid()).map_err(run)?;
            spectral::write_json(&a.out_dir.join("stiffness.json"), &report).map_err(run)?;
            println!(
                "scalar gap {:.3e} (c = {:.4}), matrix gap {:.3e}, ratio {:.1}",
                report.scalar.gap, report.scalar_best_c, report.matrix.gap, report.ratio
            );
        }
        SpectralMode::Gap => {
            let a_c = nalgebra::DMatrix::from_element(1, 1, a.a + a.c * a.b * a.b);
            let b = nalgebra::DMatrix::from_element(1, 1, a.b);
            let surface = spectral::gap_surface(&a_c, &b, &grid).map_err(run)?;
            spectral::write_csv(&a.out_dir.join("gap_surface.csv"), &surface).map_err(run)?;
            let best = spectral::best_gap(&surface);
            spectral::write_json(&a.out_dir.join("gap_best.json"), &best).map_err(run)?;
            println!("best gap {:.6e}", best.gap);
        }
        SpectralMode::Margin => {
            let rows = spectral::margin_sweep(a.a, a.b, &spectral::default_ratios(), &a.eta_x).map_err(run)?;
            spectral::write_csv(&a.out_dir.join("margin_sweep.csv"), &rows).map_err(run)?;
            let worst = rows.iter().map(|r| r.rel_err).fold(0.0, f64::max);
            println!("{} points, max relative error {:.4}", rows.len(), worst);
        }
    }
    Ok(EXIT_OK)
}

/// Commands and flags derived from the parser definition.
pub fn help_json() -> serde_json::Value {
    let cmd = Cli::command();
    let describe = |c: &clap::Command| {
        let args: Vec<_> = c
            .get_arguments()
            .filter(|a| a.get_id() != "help" && a.get_id() != "version")
            .map(|a| {
                json!({
                    "name": a.get_long().map(|l| format!("--{l}")).unwrap_or_else(|| a.get_id().to_string()),
                    "help": a.get_help().map(|h| h.to_string()),
                    "required": a.is_required_set(),
                    "default": a.get_default_values().iter().map(|v| v.to_string_lossy().into_owned()).collect::<Vec<_>>(),
                    "values": a.get_possible_values().iter().map(|v| v.get_name().to_string()).collect::<Vec<_>>(),
                })
            })
            .collect();
        json!({ "name": c.get_name(), "about": c.get_about().map(|s| s.to_string()), "args": args })
    };
    json!({
        "name": cmd.get_name(),
        "version": env!("CARGO_PKG_VERSION"),
        "exit_codes": { "0": "success", "1": "run-level failure", "2": "usage or configuration error" },
        "commands": cmd.get_subcommands().map(describe).collect::<Vec<_>>(),
    })
}
