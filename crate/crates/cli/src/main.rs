//! `fwq`: solve, sweep, simulate, fit and verify from TOML configs.
//!
//! Exit codes: 0 success (feasible), 2 infeasible, 1 error.

mod config;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use fwq::convergence::{fit_coeffs, FitResult, FitTrace};
use fwq::flsim::{run_fwq_fl, Precision};
use fwq::harness::{run_strategy, sweep, StrategyKind};
use fwq::solver::{brute_force, iterate, Allocation, BruteForceGrid, Scenario};
use fwq::FwqError;

use config::ConfigFile;
use output::{manifest_path_for, now_rfc3339, sha256_hex, Outputs, RunManifest};

const THREADS_ENV: &str = "FWQ_THREADS";

#[derive(Parser)]
#[command(name = "fwq", version, about = "Energy-aware quantized federated learning toolkit")]
struct Cli {
    /// Root seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize bit-widths, bandwidth and local steps for one scenario.
    Solve {
        #[command(flatten)]
        config: ConfigArg,
        /// Allocation record (JSON).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "fwq")]
        strategy: StrategyKind,
    },
    /// Run every sweep point and strategy; writes results.csv and summary.csv.
    Sweep {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out_dir: PathBuf,
        /// Restrict to these strategies (comma separated).
        #[arg(long, value_delimiter = ',')]
        strategy: Vec<StrategyKind>,
    },
    /// Train with the simulator; writes the per-round trace CSV and a fit trace.
    Simulate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit convergence coefficients to the `*.fit.json` traces in a directory.
    Fit {
        traces: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        eps: f64,
        #[arg(long, default_value_t = 1.0)]
        s_scale: f64,
        /// Target levels (comma separated); default is ten log-spaced levels
        /// every trace crosses.
        #[arg(long, value_delimiter = ',')]
        targets: Vec<f64>,
    },
    /// Compare the solver against exhaustive search and print the gap.
    Verify {
        #[command(flatten)]
        config: ConfigArg,
        /// Largest local step count searched.
        #[arg(long, default_value_t = BruteForceGrid::default().h_max)]
        grid_h: u32,
        /// Bandwidth grid resolution (shares of b_max).
        #[arg(long, default_value_t = BruteForceGrid::default().b_resolution)]
        grid_b: u32,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Ok,
    Infeasible,
}

impl Status {
    fn label(self) -> &'static str {
        match self {
            Status::Ok => "ok",
            Status::Infeasible => "infeasible",
        }
    }
}

struct Loaded {
    path: PathBuf,
    digest: String,
    file: ConfigFile,
}

fn load(path: &Path) -> Result<Loaded> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let text = std::str::from_utf8(&bytes).context("config is not UTF-8")?;
    Ok(Loaded {
        path: path.to_owned(),
        digest: sha256_hex(&bytes),
        file: config::parse(text)?,
    })
}

impl Loaded {
    fn manifest(&self, command: &str, started: String, seed: u64) -> RunManifest {
        let mut m = RunManifest::new(command, started);
        m.config_path = Some(self.path.display().to_string());
        m.config_sha256 = Some(self.digest.clone());
        m.seed = Some(seed);
        m
    }
}

fn finish(mut m: RunManifest, mut outs: Outputs, manifest_path: PathBuf, status: Status) -> Result<Status> {
    m.outputs = outs.paths();
    m.status = status.label().into();
    m.finished_at = now_rfc3339();
    outs.add_json(manifest_path, &m)?;
    outs.commit()?;
    Ok(status)
}

fn is_infeasibility(e: &FwqError) -> bool {
    matches!(
        e,
        FwqError::TargetInfeasible { .. }
            | FwqError::DeadlineInfeasible(_)
            | FwqError::BandwidthInfeasible { .. }
            | FwqError::QuantErrorInfeasible { .. }
            | FwqError::NoFeasibleAllocation(_)
            | FwqError::MemoryInfeasible { .. }
    )
}

#[derive(Serialize)]
struct SolveRecord<'a> {
    strategy: &'static str,
    seed: u64,
    feasible: bool,
    objective_j: Option<f64>,
    error: Option<String>,
    scenario: &'a Scenario<f64>,
    allocation: Option<&'a Allocation<f64>>,
}

fn cmd_solve(cfg: &ConfigArg, out: &Path, strategy: StrategyKind, seed: Option<u64>) -> Result<Status> {
    let started = now_rfc3339();
    let l = load(&cfg.config)?;
    let seed = seed.unwrap_or(l.file.seed);
    let sc = l.file.scenario_section()?.scenario(seed)?;
    let outcome = match sc.validate() {
        Ok(()) => run_strategy(strategy, &sc, seed),
        Err(e) if is_infeasibility(&e) => fwq::harness::StrategyOutcome {
            strategy,
            allocation: None,
            error: Some(e.to_string()),
        },
        Err(e) => return Err(e).context("invalid scenario"),
    };
    let feasible = outcome.feasible();
    let record = SolveRecord {
        strategy: strategy.name(),
        seed,
        feasible,
        objective_j: outcome.objective(),
        error: outcome.error.clone(),
        scenario: &sc,
        allocation: outcome.allocation.as_ref(),
    };
    match (&outcome.allocation, &outcome.error) {
        (Some(a), _) if feasible => println!(
            "{}: {:.6e} J, H = {}, K = {:.1}, q = {:?}",
            strategy.name(),
            a.objective,
            a.h,
            a.k_rounds,
            a.q
        ),
        (_, Some(e)) => println!("{}: infeasible: {e}", strategy.name()),
        _ => println!("{}: infeasible", strategy.name()),
    }
    let mut outs = Outputs::default();
    outs.add_json(out, &record)?;
    let mut m = l.manifest("solve", started, seed);
    m.resolved = serde_json::to_value(&sc)?;
    let status = if feasible { Status::Ok } else { Status::Infeasible };
    finish(m, outs, manifest_path_for(out), status)
}

fn cmd_sweep(cfg: &ConfigArg, out_dir: &Path, strategies: &[StrategyKind], seed: Option<u64>) -> Result<Status> {
    let started = now_rfc3339();
    let l = load(&cfg.config)?;
    let seed = seed.unwrap_or(l.file.seed);
    let spec = l.file.sweep_spec(seed, strategies)?;
    let res = sweep(&spec)?;
    for p in res.summary() {
        let fmt = |x: Option<f64>| x.map_or_else(|| "-".to_owned(), |v| format!("{v:.6e}"));
        println!(
            "{:>12} {:<15} {}/{} feasible  mean {} J  sd {}",
            p.sweep_value,
            p.strategy.name(),
            p.feasible,
            p.total,
            fmt(p.mean_objective_j),
            fmt(p.std_objective_j)
        );
    }
    let mut outs = Outputs::default();
    outs.add(out_dir.join("results.csv"), res.to_csv());
    outs.add(out_dir.join("summary.csv"), res.summary_csv());
    let mut m = l.manifest("sweep", started, seed);
    m.resolved = serde_json::to_value(&spec)?;
    finish(m, outs, out_dir.join("manifest.json"), Status::Ok)
}

/// `trace.csv` -> `trace.fit.json`.
fn fit_trace_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.fit.json"))
}

fn cmd_simulate(cfg: &ConfigArg, out: &Path, seed: Option<u64>) -> Result<Status> {
    let started = now_rfc3339();
    let l = load(&cfg.config)?;
    let seed = seed.unwrap_or(l.file.seed);
    let base = cfg.config.parent().unwrap_or(Path::new("."));
    let sim = l.file.sim_config(seed, base)?;
    let trace = run_fwq_fl(&sim)?;
    if let Some(r) = trace.records.last() {
        println!(
            "round {}: loss {:.6}, grad norm^2 {:.6e}, accuracy {:.4}, energy {:.6e} J",
            r.round, r.loss, r.grad_norm_sq, r.accuracy, r.energy_j
        );
    } else {
        println!("no rounds run");
    }
    let bits = sim
        .q_per_device
        .iter()
        .map(|p| match p {
            Precision::Full => None,
            Precision::Bits(q) => Some(*q),
        })
        .collect();
    let batch = u32::try_from(sim.batch).context("batch too large")?;
    let h = u32::try_from(sim.h_steps).context("h_steps too large")?;
    let mut outs = Outputs::default();
    outs.add(out, trace.to_csv());
    outs.add_json(fit_trace_path(out), &trace.fit_trace(h, batch, bits))?;
    let mut m = l.manifest("simulate", started, seed);
    m.resolved = serde_json::to_value(&sim)?;
    finish(m, outs, manifest_path_for(out), Status::Ok)
}

#[derive(Serialize)]
struct FitRecord<'a> {
    fit: &'a FitResult<f64>,
    targets: &'a [f64],
    traces: &'a [String],
}

/// Ten log-spaced levels strictly between the highest final value and the
/// lowest initial value, so every level is crossed by every trace.
fn auto_targets(traces: &[FitTrace<f64>]) -> Result<Vec<f64>> {
    let top = traces.iter().filter_map(|t| t.grad_norm_sq.first()).fold(f64::INFINITY, |a, &b| a.min(b));
    let bottom = traces.iter().filter_map(|t| t.grad_norm_sq.last()).fold(0.0f64, |a, &b| a.max(b));
    if !(bottom > 0.0 && top > bottom && top.is_finite()) {
        bail!("traces share no decreasing range; pass --targets");
    }
    Ok((1..=10).map(|i| bottom * (top / bottom).powf(i as f64 / 11.0)).collect())
}

fn cmd_fit(dir: &Path, out: &Path, eps: f64, s_scale: f64, targets: &[f64]) -> Result<Status> {
    let started = now_rfc3339();
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.to_string_lossy().ends_with(".fit.json"));
    files.sort();
    if files.is_empty() {
        bail!("no *.fit.json traces in {}", dir.display());
    }
    let mut traces = Vec::new();
    let mut digests = Vec::new();
    for f in &files {
        let bytes = std::fs::read(f).with_context(|| format!("reading {}", f.display()))?;
        let mut de = serde_json::Deserializer::from_slice(&bytes);
        let t: FitTrace<f64> = serde_path_to_error::deserialize(&mut de)
            .map_err(|e| anyhow::anyhow!("{}: schema error at `{}`: {}", f.display(), e.path(), e.inner()))?;
        traces.push(t);
        digests.push(format!("{}:{}", f.display(), sha256_hex(&bytes)));
    }
    let targets = if targets.is_empty() { auto_targets(&traces)? } else { targets.to_vec() };
    let fit = fit_coeffs(&traces, &targets, eps, s_scale)?;
    println!(
        "a1 = {:.6}, a2 = {:.6}, a3 = {:.6}, R^2 = {:.4} ({} equations)",
        fit.coeffs.a1, fit.coeffs.a2, fit.coeffs.a3, fit.r_squared, fit.n_equations
    );
    let names: Vec<String> = files.iter().map(|f| f.display().to_string()).collect();
    let mut outs = Outputs::default();
    outs.add_json(
        out,
        &FitRecord {
            fit: &fit,
            targets: &targets,
            traces: &names,
        },
    )?;
    let mut m = RunManifest::new("fit", started);
    m.resolved = serde_json::json!({ "eps": eps, "s_scale": s_scale, "targets": targets, "trace_sha256": digests });
    finish(m, outs, manifest_path_for(out), Status::Ok)
}

#[derive(Serialize)]
struct VerifyRecord {
    grid: BruteForceGrid,
    iterate_objective_j: Option<f64>,
    brute_force_objective_j: Option<f64>,
    /// `iterate / brute_force - 1`.
    gap: Option<f64>,
    iterate: Option<Allocation<f64>>,
    brute_force: Option<Allocation<f64>>,
    error: Option<String>,
}

fn cmd_verify(cfg: &ConfigArg, grid: BruteForceGrid, out: Option<&Path>, seed: Option<u64>) -> Result<Status> {
    let started = now_rfc3339();
    let l = load(&cfg.config)?;
    let seed = seed.unwrap_or(l.file.seed);
    let sc = l.file.scenario_section()?.scenario(seed)?;
    sc.validate().context("invalid scenario")?;
    let it = iterate(&sc, None);
    let bf = brute_force(&sc, grid);
    let mut errors = Vec::new();
    for r in [&it, &bf] {
        match r {
            Err(e) if is_infeasibility(e) => errors.push(e.to_string()),
            Err(e) => bail!("{e}"),
            Ok(_) => {}
        }
    }
    let it = it.ok();
    let bf = bf.ok();
    let gap = match (&it, &bf) {
        (Some(a), Some(b)) => Some(a.objective / b.objective - 1.0),
        _ => None,
    };
    let fmt = |a: &Option<Allocation<f64>>| a.as_ref().map_or_else(|| "infeasible".to_owned(), |a| format!("{:.6e} J", a.objective));
    println!("iterate:     {}", fmt(&it));
    println!("brute force: {}", fmt(&bf));
    match gap {
        Some(g) => println!("gap: {:.4}%", 100.0 * g),
        None => println!("gap: n/a"),
    }
    let status = if gap.is_some() { Status::Ok } else { Status::Infeasible };
    let record = VerifyRecord {
        grid,
        iterate_objective_j: it.as_ref().map(|a| a.objective),
        brute_force_objective_j: bf.as_ref().map(|a| a.objective),
        gap,
        iterate: it,
        brute_force: bf,
        error: (!errors.is_empty()).then(|| errors.join("; ")),
    };
    match out {
        Some(out) => {
            let mut outs = Outputs::default();
            outs.add_json(out, &record)?;
            let mut m = l.manifest("verify", started, seed);
            m.resolved = serde_json::to_value(&sc)?;
            finish(m, outs, manifest_path_for(out), status)
        }
        None => Ok(status),
    }
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.trim().parse().with_context(|| format!("{THREADS_ENV} must be a thread count, got {v:?}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<Status> {
    init_threads()?;
    match &cli.command {
        Command::Solve { config, out, strategy } => cmd_solve(config, out, *strategy, cli.seed),
        Command::Sweep {
            config,
            out_dir,
            strategy,
        } => cmd_sweep(config, out_dir, strategy, cli.seed),
        Command::Simulate { config, out } => cmd_simulate(config, out, cli.seed),
        Command::Fit {
            traces,
            out,
            eps,
            s_scale,
            targets,
        } => cmd_fit(traces, out, *eps, *s_scale, targets),
        Command::Verify {
            config,
            grid_h,
            grid_b,
            out,
        } => cmd_verify(
            config,
            BruteForceGrid {
                h_max: *grid_h,
                b_resolution: *grid_b,
            },
            out.as_deref(),
            cli.seed,
        ),
    }
}

fn main() -> ExitCode {
    // clap exits with 2 on usage errors, which is reserved for infeasibility
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::Infeasible) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
