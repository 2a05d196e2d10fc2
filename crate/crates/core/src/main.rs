use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::thread;

use clap::{Parser, Subcommand};

use dcee::diagnostics::derivative_audit;
use dcee::harness::acceptance::{self, CriterionOutcome, AUDIT_REL_TOL, AUDIT_SAMPLES, DECOMPOSITION_ABS_TOL};
use dcee::harness::bench::bench_solver;
use dcee::harness::export::{export, to_csv_string, ExportFormat, RunSummary};
use dcee::harness::{run_closed_loop, ControllerKind, RunResult, ScenarioConfig};
use dcee::{DceeError, Result};

/// Closed-loop speed optimization experiments.
#[derive(Debug, Parser)]
#[command(name = "dcee", version)]
struct Cli {
    /// Scenario file (TOML). Defaults to the built-in scenario.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for result files. Without it, `run` writes to stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the noise and ensemble seeds of the scenario.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "csv")]
    format: ExportFormat,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate one controller.
    Run {
        #[arg(value_name = "CONFIG")]
        scenario: Option<PathBuf>,
    },
    /// Simulate several controllers on the same scenario.
    Compare {
        #[arg(value_name = "CONFIG")]
        scenario: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "numerical_dcee,grad_dcee,esc")]
        controllers: Vec<ControllerKind>,
    },
    /// Time the solver against finite-difference references.
    Bench {
        #[arg(value_name = "CONFIG")]
        scenario: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        reps: usize,
    },
    /// Derivative audit on the scenario plus the oracle checks.
    Audit {
        #[arg(value_name = "CONFIG")]
        scenario: Option<PathBuf>,
    },
    /// Full acceptance suite.
    Check,
}

fn load_config(cli: &Cli, positional: Option<&PathBuf>) -> Result<ScenarioConfig> {
    let path = match (positional, &cli.config) {
        (Some(a), Some(b)) if a != b => {
            return Err(DceeError::InvalidInput(format!(
                "config given twice: {} and {}",
                a.display(),
                b.display()
            )))
        }
        (Some(p), _) | (None, Some(p)) => Some(p),
        (None, None) => None,
    };
    let cfg = match path {
        Some(p) => ScenarioConfig::load(p)?,
        None => ScenarioConfig::default(),
    };
    let cfg = match cli.seed {
        Some(seed) => cfg.with_seed(seed),
        None => cfg,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> Result<Option<&Path>> {
    let Some(dir) = cli.out.as_deref() else { return Ok(None) };
    fs::create_dir_all(dir).map_err(|e| DceeError::Io { path: dir.to_path_buf(), source: e })?;
    Ok(Some(dir))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| DceeError::InvalidInput(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| DceeError::Io { path: path.to_path_buf(), source: e })
}

fn print_metrics_header() {
    println!("{:<16} {:>12} {:>14} {:>14} {:>12} {:>12}", "controller", "e_v", "iae_v", "regret", "mean_us", "max_us");
}

fn print_metrics(r: &RunResult) {
    let m = &r.metrics;
    println!(
        "{:<16} {:>12.5} {:>14.3} {:>14.4} {:>12.2} {:>12.2}",
        r.controller.name(),
        m.e_v,
        m.iae_v,
        m.regret,
        r.timing.mean_ns / 1e3,
        r.timing.max_ns as f64 / 1e3
    );
}

fn save_run(r: &RunResult, dir: &Path, format: ExportFormat) -> Result<PathBuf> {
    let path = dir.join(format!("{}.{}", r.controller.name(), format.extension()));
    export(r, &path, format)?;
    Ok(path)
}

fn cmd_run(cli: &Cli, cfg: &ScenarioConfig) -> Result<bool> {
    let r = run_closed_loop(cfg)?;
    match out_dir(cli)? {
        Some(dir) => {
            let path = save_run(&r, dir, cli.format)?;
            print_metrics_header();
            print_metrics(&r);
            println!("wrote {}", path.display());
        }
        None => {
            match cli.format {
                ExportFormat::Csv => print!("{}", to_csv_string(&r.records)?),
                ExportFormat::Json => {
                    let text = serde_json::to_string_pretty(&RunSummary::from(&r))
                        .map_err(|e| DceeError::InvalidInput(e.to_string()))?;
                    println!("{text}");
                }
            }
        }
    }
    Ok(true)
}

fn thread_cap() -> usize {
    std::env::var("DCEE_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| thread::available_parallelism().map_or(1, |n| n.get()))
}

fn cmd_compare(cli: &Cli, cfg: &ScenarioConfig, kinds: &[ControllerKind]) -> Result<bool> {
    let mut results = Vec::with_capacity(kinds.len());
    for chunk in kinds.chunks(thread_cap()) {
        let batch: Vec<Result<RunResult>> = thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&kind| {
                    let cfg = cfg.clone().with_controller(kind);
                    s.spawn(move || run_closed_loop(&cfg))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("simulation thread panicked")).collect()
        });
        for r in batch {
            results.push(r?);
        }
    }
    print_metrics_header();
    for r in &results {
        print_metrics(r);
    }
    if let Some(dir) = out_dir(cli)? {
        for r in &results {
            println!("wrote {}", save_run(r, dir, cli.format)?.display());
        }
    }
    Ok(true)
}

fn cmd_bench(cli: &Cli, cfg: &ScenarioConfig, reps: usize) -> Result<bool> {
    let r = bench_solver(cfg, reps)?;
    println!("{:<22} {:>12} {:>12} {:>12}", "solver", "mean_us", "p99_us", "max_us");
    for (name, t) in [
        ("gn_analytic", &r.analytic_gn),
        ("gn_fd_jacobian", &r.fd_jacobian_gn),
        ("newton_fd_hessian", &r.fd_hessian_newton),
    ] {
        println!(
            "{name:<22} {:>12.2} {:>12.2} {:>12.2}",
            t.mean_ns / 1e3,
            t.p99_ns as f64 / 1e3,
            t.max_ns as f64 / 1e3
        );
    }
    println!(
        "{} solves; speedup vs FD Jacobian {:.2}x, vs FD Hessian {:.2}x; max objective gap {:.2e}",
        r.solves, r.speedup_vs_fd_jacobian, r.speedup_vs_fd_newton, r.max_objective_rel_gap
    );
    if let Some(dir) = out_dir(cli)? {
        let path = dir.join("bench.json");
        write_json(&path, &r)?;
        println!("wrote {}", path.display());
    }
    Ok(true)
}

fn print_outcomes(outcomes: &[CriterionOutcome]) -> bool {
    for o in outcomes {
        println!("{o}");
    }
    let passed = outcomes.iter().filter(|o| o.passed).count();
    println!("{passed}/{} criteria passed", outcomes.len());
    passed == outcomes.len()
}

fn cmd_audit(cli: &Cli, cfg: &ScenarioConfig) -> Result<bool> {
    let report = derivative_audit(&cfg.audit_setup()?, AUDIT_SAMPLES, cli.seed.unwrap_or(0))?;
    let audit_ok = report.checked == report.samples && report.passes(AUDIT_REL_TOL, DECOMPOSITION_ABS_TOL);
    println!(
        "audit: checked {}/{} (skipped {}), jacobian {:.2e}, gradient {:.2e}, decomposition {:.2e} {}",
        report.checked,
        report.samples,
        report.skipped,
        report.max_jacobian_rel_err,
        report.max_gradient_rel_err,
        report.max_decomposition_abs_err,
        if audit_ok { "PASS" } else { "FAIL" }
    );
    let outcomes = acceptance::run_oracles();
    let oracles_ok = print_outcomes(&outcomes);
    if let Some(dir) = out_dir(cli)? {
        let path = dir.join("audit.json");
        write_json(&path, &serde_json::json!({ "audit": report, "oracles": outcomes }))?;
        println!("wrote {}", path.display());
    }
    Ok(audit_ok && oracles_ok)
}

fn cmd_check(cli: &Cli) -> Result<bool> {
    let outcomes = acceptance::run_all();
    let ok = print_outcomes(&outcomes);
    if let Some(dir) = out_dir(cli)? {
        let path = dir.join("acceptance.json");
        write_json(&path, &outcomes)?;
        println!("wrote {}", path.display());
    }
    Ok(ok)
}

fn dispatch(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Run { scenario } => cmd_run(cli, &load_config(cli, scenario.as_ref())?),
        Command::Compare { scenario, controllers } => {
            cmd_compare(cli, &load_config(cli, scenario.as_ref())?, controllers)
        }
        Command::Bench { scenario, reps } => cmd_bench(cli, &load_config(cli, scenario.as_ref())?, *reps),
        Command::Audit { scenario } => cmd_audit(cli, &load_config(cli, scenario.as_ref())?),
        Command::Check => cmd_check(cli),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
