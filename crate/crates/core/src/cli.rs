//! Subcommand dispatch and deterministic output artifacts. Exit codes:
//! 0 success, 1 numeric or validation failure, 2 usage/config errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{ConfigError, RunConfig};
use crate::deviation::{self, GridDeviationSpec};
use crate::equilibrium::{self, EquilibriumSolution};
use crate::error::Error;
use crate::market::{self, Policy};
use crate::validate;

/// Residual pass threshold for `hjb-check`, per unit of wealth.
pub const HJB_PASS_TOL: f64 = 1e-6;

#[derive(Parser)]
#[command(
    name = "meandev",
    version,
    about = "Dynamic deviation measures and mean-deviation portfolio equilibria"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Deviation integral of the configured pair plus the grid-CVaR convergence table
    Deviation(RunArgs),
    /// Solve the equilibrium fixed point and write the policy table
    Policy(RunArgs),
    /// Simulate wealth paths under the configured or equilibrium policy
    Simulate(RunArgs),
    /// Monte Carlo check that the estimated objective matches V(0, x0)
    Validate(RunArgs),
    /// Extended-HJB residual table over the (t, x) grid
    HjbCheck(RunArgs),
    /// Grid-deviation convergence table against the scaling limit
    Convergence(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Path to the TOML run configuration
    #[arg(long)]
    config: PathBuf,
    /// Dotted-key override, e.g. --set numerics.seed=7 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (defaults to the config's output.dir)
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Entry point used by the binary; returns the process exit code.
pub fn run() -> i32 {
    // clap itself exits with code 2 on usage errors
    let cli = Cli::parse();
    let (args, runner): (&RunArgs, Runner) = match &cli.command {
        Command::Deviation(a) => (a, run_deviation),
        Command::Policy(a) => (a, run_policy),
        Command::Simulate(a) => (a, run_simulate),
        Command::Validate(a) => (a, run_validate),
        Command::HjbCheck(a) => (a, run_hjb_check),
        Command::Convergence(a) => (a, run_convergence),
    };
    match execute(args, runner) {
        Ok(code) => code,
        Err(RunError::Config(e)) => {
            eprintln!("error: {e}");
            2
        }
        Err(RunError::Numeric(e)) => {
            eprintln!("error: {e}");
            1
        }
        Err(RunError::Io(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

type Runner = fn(&RunConfig, &Path) -> Result<i32, RunError>;

enum RunError {
    Config(ConfigError),
    Numeric(Error),
    Io(std::io::Error),
}

impl From<ConfigError> for RunError {
    fn from(e: ConfigError) -> Self {
        RunError::Config(e)
    }
}

impl From<Error> for RunError {
    fn from(e: Error) -> Self {
        RunError::Numeric(e)
    }
}

impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> Self {
        RunError::Io(e)
    }
}

fn execute(args: &RunArgs, runner: Runner) -> Result<i32, RunError> {
    let config = RunConfig::load(&args.config, &args.set)?;
    config.validate_problem()?;
    configure_workers(&config);
    let out_dir = args.out.clone().unwrap_or_else(|| config.output.dir.clone());
    std::fs::create_dir_all(&out_dir)?;
    runner(&config, &out_dir)
}

/// Worker count: MEANDEV_WORKERS env var wins, then numerics.workers,
/// otherwise the rayon default. Building the global pool can only happen
/// once per process; later calls keep the first pool.
fn configure_workers(config: &RunConfig) {
    let from_env = std::env::var("MEANDEV_WORKERS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok());
    if let Some(workers) = from_env.or(config.numerics.workers) {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build_global();
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), RunError> {
    std::fs::write(path, contents)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RunError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable report");
    text.push('\n');
    write_file(path, &text)
}

fn solve(config: &RunConfig) -> Result<(crate::MarketModel, crate::Driver, EquilibriumSolution), RunError> {
    let model = config.build_model()?;
    let driver = config.build_driver(model.measure())?;
    let solution = equilibrium::fixed_point(
        &model,
        &driver,
        config.problem.gamma,
        config.problem.horizon,
        &config.fixed_point_options(),
    )?;
    Ok((model, driver, solution))
}

#[derive(Serialize)]
struct PolicySummary<'a> {
    a_minus: f64,
    t_star: Option<f64>,
    s_gamma_inv: f64,
    iterations: usize,
    residual: f64,
    degenerate: bool,
    seed: u64,
    config: &'a RunConfig,
}

fn run_policy(config: &RunConfig, out_dir: &Path) -> Result<i32, RunError> {
    let (_, _, solution) = solve(config)?;
    let n = solution.c_star()[0].len();
    let mut csv = String::from("t,a_star");
    for i in 1..=n {
        let _ = write!(csv, ",c_{i}");
    }
    csv.push_str(",b,d,v\n");
    for (i, t) in solution.grid().iter().enumerate() {
        let _ = write!(csv, "{t},{}", solution.a_star()[i]);
        for c in &solution.c_star()[i] {
            let _ = write!(csv, ",{c}");
        }
        let _ = writeln!(
            csv,
            ",{},{},{}",
            solution.b()[i],
            solution.d()[i],
            solution.value_coeff()[i]
        );
    }
    write_file(&out_dir.join("policy.csv"), &csv)?;
    let summary = PolicySummary {
        a_minus: solution.a_minus(),
        t_star: solution.t_star().is_finite().then(|| solution.t_star()),
        s_gamma_inv: solution.s_at_gamma_inv(),
        iterations: solution.iterations(),
        residual: solution.residual(),
        degenerate: solution.degenerate(),
        seed: config.numerics.seed,
        config,
    };
    write_json(&out_dir.join("policy_summary.json"), &summary)?;
    println!(
        "policy: a_minus = {:.6}, t_star = {:.6}, {} iterations, residual {:.3e} -> {}",
        solution.a_minus(),
        solution.t_star(),
        solution.iterations(),
        solution.residual(),
        out_dir.display()
    );
    Ok(0)
}

fn resolve_policy(
    config: &RunConfig,
    model: &crate::MarketModel,
    driver: &crate::Driver,
) -> Result<Policy, RunError> {
    if let Some(policy) = config.build_policy()? {
        return Ok(policy);
    }
    let solution = equilibrium::fixed_point(
        model,
        driver,
        config.problem.gamma,
        config.problem.horizon,
        &config.fixed_point_options(),
    )?;
    Ok(equilibrium::equilibrium_policy(model, driver, &solution)?)
}

#[derive(Serialize)]
struct SimulateSummary<'a> {
    n_paths: usize,
    seed: u64,
    mean: f64,
    std_error: f64,
    min: f64,
    quantiles: Vec<(f64, f64)>,
    config: &'a RunConfig,
}

fn run_simulate(config: &RunConfig, out_dir: &Path) -> Result<i32, RunError> {
    let model = config.build_model()?;
    let driver = config.build_driver(model.measure())?;
    let policy = resolve_policy(config, &model, &driver)?;
    let paths = market::simulate(
        &model,
        &policy,
        config.problem.x0,
        policy.grid(),
        config.numerics.n_paths,
        config.numerics.seed,
    )?;
    let terminal = paths.terminal();
    let mut csv = String::from("path,terminal_wealth\n");
    for (i, w) in terminal.iter().enumerate() {
        let _ = writeln!(csv, "{i},{w}");
    }
    write_file(&out_dir.join("terminal_wealth.csv"), &csv)?;

    let n = terminal.len() as f64;
    let mean = terminal.iter().sum::<f64>() / n;
    let var = terminal.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    let mut sorted = terminal.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let quantiles = [0.01, 0.05, 0.25, 0.5, 0.75, 0.95, 0.99]
        .iter()
        .map(|q| {
            let idx = ((q * n) as usize).min(sorted.len() - 1);
            (*q, sorted[idx])
        })
        .collect();
    let summary = SimulateSummary {
        n_paths: terminal.len(),
        seed: paths.seed(),
        mean,
        std_error: (var / n).sqrt(),
        min: paths.min_wealth(),
        quantiles,
        config,
    };
    write_json(&out_dir.join("simulate_summary.json"), &summary)?;
    println!(
        "simulate: {} paths, mean terminal wealth {:.6} (se {:.3e}) -> {}",
        terminal.len(),
        mean,
        (var / n).sqrt(),
        out_dir.display()
    );
    Ok(0)
}

#[derive(Serialize)]
struct ValidateEnvelope<'a> {
    report: &'a validate::ValidationReport,
    config: &'a RunConfig,
}

fn run_validate(config: &RunConfig, out_dir: &Path) -> Result<i32, RunError> {
    let model = config.build_model()?;
    let driver = config.build_driver(model.measure())?;
    let policy = resolve_policy(config, &model, &driver)?;
    let report = validate::estimate_objective(
        &model,
        &driver,
        config.problem.gamma,
        &policy,
        config.problem.x0,
        config.numerics.n_paths,
        config.numerics.seed,
    )?;
    write_json(
        &out_dir.join("validate_report.json"),
        &ValidateEnvelope {
            report: &report,
            config,
        },
    )?;
    println!(
        "validate: J = {:.6} (se {:.3e}) vs V = {:.6}, z = {:+.2}, {} in {:.2}s -> {}",
        report.objective,
        report.objective_se,
        report.target_value,
        report.z_objective,
        if report.passed() { "PASS" } else { "FAIL" },
        report.runtime_seconds,
        out_dir.display()
    );
    Ok(if report.passed() { 0 } else { 1 })
}

fn run_hjb_check(config: &RunConfig, out_dir: &Path) -> Result<i32, RunError> {
    let (model, driver, solution) = solve(config)?;
    let x0 = config.problem.x0;
    let grid = solution.grid().to_vec();
    let mut csv = String::from("t,x,value_residual,mean_residual,near_kink\n");
    let mut worst: f64 = 0.0;
    for i in 1..grid.len() - 1 {
        for scale in [0.5, 1.0, 2.0] {
            let x = scale * x0;
            let res = equilibrium::hjb_residual(
                &model,
                &driver,
                config.problem.gamma,
                &solution,
                grid[i],
                x,
            )?;
            let _ = writeln!(
                csv,
                "{},{},{},{},{}",
                grid[i], x, res.value_residual, res.mean_residual, res.near_kink
            );
            if !res.near_kink {
                worst = worst
                    .max(res.value_residual.abs() / x)
                    .max(res.mean_residual.abs() / x);
            }
        }
    }
    write_file(&out_dir.join("hjb_check.csv"), &csv)?;
    let pass = worst <= HJB_PASS_TOL;
    println!(
        "hjb-check: max off-kink residual {worst:.3e} per unit wealth, {} -> {}",
        if pass { "PASS" } else { "FAIL" },
        out_dir.display()
    );
    Ok(if pass { 0 } else { 1 })
}

fn pair_and_measure(
    config: &RunConfig,
) -> Result<(crate::RepresentingPair, crate::LevyMeasure), RunError> {
    let measure = config.build_measure()?;
    let pair = config.build_pair()?.ok_or_else(|| {
        ConfigError::Invalid("this subcommand needs a [pair] section".into())
    })?;
    Ok((pair, measure))
}

fn convergence_table(config: &RunConfig) -> Result<String, RunError> {
    let (pair, measure) = pair_and_measure(config)?;
    let section = &config.grid_deviation;
    let mc_samples = section.mc_samples.unwrap_or(config.numerics.mc_samples);
    let limit = deviation::ddrm_limit(&pair, &measure, section.alpha)?;
    let mut csv = String::from("level,cells,grid_deviation,std_error,limit,abs_error\n");
    for level in &section.levels {
        let spec = GridDeviationSpec::new(*level, section.alpha, mc_samples, config.numerics.seed)?;
        let value = deviation::grid_deviation(&pair, &measure, &spec)?;
        let _ = writeln!(
            csv,
            "{level},{},{},{},{limit},{}",
            1u64 << level,
            value.value,
            value.std_error,
            (value.value - limit).abs()
        );
    }
    Ok(csv)
}

#[derive(Serialize)]
struct DeviationSummary<'a> {
    deviation_at_0: f64,
    ddrm_limit: f64,
    alpha: f64,
    c_alpha: f64,
    seed: u64,
    config: &'a RunConfig,
}

fn run_deviation(config: &RunConfig, out_dir: &Path) -> Result<i32, RunError> {
    let (pair, measure) = pair_and_measure(config)?;
    let driver = config.build_driver(&measure)?;
    let alpha = config.grid_deviation.alpha;

    let mut csv = String::from("t,deviation\n");
    for t in pair.grid() {
        let _ = writeln!(
            csv,
            "{t},{}",
            deviation::deviation_integral(&driver, &pair, *t)?
        );
    }
    write_file(&out_dir.join("deviation_profile.csv"), &csv)?;
    write_file(&out_dir.join("convergence.csv"), &convergence_table(config)?)?;

    let value = deviation::deviation_integral(&driver, &pair, 0.0)?;
    let summary = DeviationSummary {
        deviation_at_0: value,
        ddrm_limit: deviation::ddrm_limit(&pair, &measure, alpha)?,
        alpha,
        c_alpha: deviation::c_alpha(alpha)?,
        seed: config.numerics.seed,
        config,
    };
    write_json(&out_dir.join("deviation_summary.json"), &summary)?;
    println!(
        "deviation: D_0 = {value:.6}, limit = {:.6} -> {}",
        summary.ddrm_limit,
        out_dir.display()
    );
    Ok(0)
}

fn run_convergence(config: &RunConfig, out_dir: &Path) -> Result<i32, RunError> {
    let csv = convergence_table(config)?;
    write_file(&out_dir.join("convergence.csv"), &csv)?;
    println!(
        "convergence: {} levels -> {}",
        config.grid_deviation.levels.len(),
        out_dir.display()
    );
    Ok(0)
}
