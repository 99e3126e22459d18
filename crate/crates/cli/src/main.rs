//! `kinky-mpc run|compare|verify` — runs the closed-loop experiments, the
//! learning-on/off comparison, and the randomized verification suites.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric or solver abort
//! during a run, 4 verification failure (counterexample written).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use kinky_mpc_core::config::{build, ResolvedRun, RunConfig};
use kinky_mpc_core::sim::{convergence_report, iss_report, run, SimTrace};
use kinky_mpc_core::verify::{envelope_suite, solver_suite, Counterexample};
use kinky_mpc_core::Error;

#[derive(Parser)]
#[command(
    name = "kinky-mpc",
    version,
    about = "Adaptive MPC with envelope learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Built-in configuration preset (currently: paper_example).
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Path to a JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path overrides, e.g. --set sim.learning=false --set ocp.N=20.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Directory for output files.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Run one closed-loop experiment and write its trace and report.
    Run(ConfigArgs),
    /// Run the experiment with learning enabled and disabled and summarize both.
    Compare(ConfigArgs),
    /// Run the randomized envelope and solver verification suites.
    Verify {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        cases: usize,
        /// Absolute tolerance for the envelope inequalities (diagnostic knob).
        #[arg(long, default_value_t = 1e-9, allow_hyphen_values = true)]
        slack: f64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run(args) => cmd_run(&args),
        Command::Compare(args) => cmd_compare(&args),
        Command::Verify {
            seed,
            cases,
            slack,
            out,
        } => cmd_verify(seed, cases, slack, &out),
    };
    match code {
        Ok(()) => ExitCode::SUCCESS,
        Err(code) => ExitCode::from(code),
    }
}

fn fail(code: u8, message: impl std::fmt::Display) -> u8 {
    eprintln!("kinky-mpc: {message}");
    code
}

/// 2 for configuration problems, 3 for runtime aborts.
fn runtime_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Dimension { .. } => 2,
        _ => 3,
    }
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig, u8> {
    let base = match (&args.preset, &args.config) {
        (Some(name), None) => RunConfig::preset(name).map_err(|e| fail(2, e))?,
        (None, Some(path)) => {
            let text = fs::read_to_string(path)
                .map_err(|e| fail(2, format!("cannot read {}: {e}", path.display())))?;
            RunConfig::from_json(&text).map_err(|e| fail(2, e))?
        }
        _ => return Err(fail(2, "exactly one of --preset or --config is required")),
    };
    let overrides = parse_overrides(&args.set)?;
    base.with_overrides(&overrides).map_err(|e| fail(2, e))
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>, u8> {
    raw.iter()
        .map(|pair| {
            pair.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| fail(2, format!("--set expects KEY=VALUE, got '{pair}'")))
        })
        .collect()
}

fn write_atomic(path: &Path, contents: &str) -> Result<(), u8> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)
            .map_err(|e| fail(2, format!("cannot create {}: {e}", dir.display())))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents)
        .map_err(|e| fail(2, format!("cannot write {}: {e}", tmp.display())))?;
    fs::rename(&tmp, path).map_err(|e| fail(2, format!("cannot rename to {}: {e}", path.display())))
}

fn thread_cap() -> usize {
    let machine = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("KINKY_MPC_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .unwrap_or(machine)
            .min(machine),
        Err(_) => machine,
    }
}

fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |a, x| a.max(x.abs()))
}

/// Sup-norm state samples over the last up-to-10 states, terminal included.
fn tail_norms(trace: &SimTrace) -> Vec<f64> {
    let mut norms: Vec<f64> = trace.steps.iter().map(|s| norm_inf(&s.x)).collect();
    norms.push(norm_inf(&trace.final_state));
    let start = norms.len().saturating_sub(10);
    norms[start..].to_vec()
}

fn report_json(resolved: &ResolvedRun, trace: &SimTrace) -> serde_json::Value {
    let iss = iss_report(trace);
    let final_norm = norm_inf(&trace.final_state);
    let tail = tail_norms(trace);
    let tail_mean = tail.iter().sum::<f64>() / tail.len() as f64;
    let tail_spread = tail.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - tail.iter().cloned().fold(f64::INFINITY, f64::min);
    let converged_to_origin = final_norm <= 1e-2;
    // a plateau is a tail that is neither converged nor still moving
    let plateau_detected =
        !converged_to_origin && tail_mean > 0.1 && tail_spread <= 0.3 * tail_mean;

    let mut x1_tail: Vec<f64> = trace.steps.iter().map(|s| s.x[0]).collect();
    x1_tail.push(trace.final_state[0]);
    let start = x1_tail.len().saturating_sub(10);
    let x1_last10_mean = x1_tail[start..].iter().sum::<f64>() / x1_tail[start..].len() as f64;

    let convergence = convergence_report(trace).ok().map(|c| {
        json!({
            "final_state_norm_inf": c.final_state_norm,
            "final_width": c.final_width,
            "width_total": c.width_partial_sums.last().copied().unwrap_or(0.0),
        })
    });

    json!({
        "horizon": {"N": resolved.horizon, "is_default": resolved.horizon_is_default},
        "steps": trace.steps.len(),
        "learning": resolved.sim.learning_enabled,
        "final_state": trace.final_state,
        "final_state_norm_inf": final_norm,
        "final_width": trace.steps.last().map(|s| s.h_pre),
        "uncertainty_mass": {
            "first": trace.steps.first().map(|s| s.c_t),
            "last": trace.steps.last().map(|s| s.c_t),
        },
        "total_stage_cost": trace.total_stage_cost(),
        "converged_to_origin": converged_to_origin,
        "plateau_detected": plateau_detected,
        "x1_last10_mean": x1_last10_mean,
        "iss": {
            "zero_width_steps": iss.zero_width_steps,
            "max_residual_at_zero_width": iss.max_residual_at_zero_width,
            "zero_width_ok": iss.zero_width_ok,
            "spearman_residual_vs_width": iss.spearman,
        },
        "solver": {
            "all_converged": trace.steps.iter().all(|s| s.converged),
            "max_iterations": trace.steps.iter().map(|s| s.iterations).max(),
        },
        "convergence": convergence,
    })
}

fn cmd_run(args: &ConfigArgs) -> Result<(), u8> {
    let config = load_config(args)?;
    let resolved = build(&config).map_err(|e| fail(2, e))?;
    let trace = run(&resolved.sim).map_err(|e| fail(runtime_code(&e), e))?;

    let trace_path = args.out.join(&resolved.trace_path);
    let report_path = args.out.join(&resolved.report_path);
    write_atomic(&trace_path, &trace.to_csv())?;
    let report = report_json(&resolved, &trace);
    write_atomic(
        &report_path,
        &format!(
            "{}\n",
            serde_json::to_string_pretty(&report).expect("report serializes")
        ),
    )?;

    println!(
        "run complete: {} steps, final |x| = {:.3e}; wrote {} and {}",
        trace.steps.len(),
        norm_inf(&trace.final_state),
        trace_path.display(),
        report_path.display()
    );
    Ok(())
}

/// `name.csv` -> `name_on.csv` / `name_off.csv`
fn variant_path(base: &str, suffix: &str) -> String {
    match base.rsplit_once('.') {
        Some((stem, ext)) => format!("{stem}_{suffix}.{ext}"),
        None => format!("{base}_{suffix}"),
    }
}

fn cmd_compare(args: &ConfigArgs) -> Result<(), u8> {
    let config = load_config(args)?;
    let on_config = config
        .clone()
        .with_overrides(&[("sim.learning".into(), "true".into())])
        .map_err(|e| fail(2, e))?;
    let off_config = config
        .with_overrides(&[("sim.learning".into(), "false".into())])
        .map_err(|e| fail(2, e))?;
    let on_resolved = build(&on_config).map_err(|e| fail(2, e))?;
    let off_resolved = build(&off_config).map_err(|e| fail(2, e))?;

    let (on_trace, off_trace) = if thread_cap() >= 2 {
        let (a, b) = std::thread::scope(|scope| {
            let on = scope.spawn(|| run(&on_resolved.sim));
            let off = scope.spawn(|| run(&off_resolved.sim));
            (
                on.join().expect("run thread"),
                off.join().expect("run thread"),
            )
        });
        (
            a.map_err(|e| fail(runtime_code(&e), e))?,
            b.map_err(|e| fail(runtime_code(&e), e))?,
        )
    } else {
        (
            run(&on_resolved.sim).map_err(|e| fail(runtime_code(&e), e))?,
            run(&off_resolved.sim).map_err(|e| fail(runtime_code(&e), e))?,
        )
    };

    let on_path = args.out.join(variant_path(&on_resolved.trace_path, "on"));
    let off_path = args.out.join(variant_path(&on_resolved.trace_path, "off"));
    write_atomic(&on_path, &on_trace.to_csv())?;
    write_atomic(&off_path, &off_trace.to_csv())?;

    let side = |trace: &SimTrace| {
        json!({
            "final_state_norm_inf": norm_inf(&trace.final_state),
            "total_stage_cost": trace.total_stage_cost(),
            "final_uncertainty_mass": trace.steps.last().map(|s| s.c_t),
        })
    };
    let summary = json!({
        "learning_on": side(&on_trace),
        "learning_off": side(&off_trace),
    });
    let report_path = args.out.join(&on_resolved.report_path);
    write_atomic(
        &report_path,
        &format!(
            "{}\n",
            serde_json::to_string_pretty(&summary).expect("summary serializes")
        ),
    )?;

    println!(
        "compare complete: learning-on final |x| = {:.3e}, learning-off final |x| = {:.3e}; wrote {}, {}, {}",
        norm_inf(&on_trace.final_state),
        norm_inf(&off_trace.final_state),
        on_path.display(),
        off_path.display(),
        report_path.display()
    );
    Ok(())
}

fn write_counterexample(out: &Path, seed: u64, cex: &Counterexample) -> Result<PathBuf, u8> {
    let path = out.join("counterexample.json");
    let dataset: serde_json::Value =
        serde_json::from_str(&cex.dataset_json).unwrap_or(serde_json::Value::Null);
    let doc = json!({
        "property": cex.property,
        "seed": seed,
        "case_index": cex.case_index,
        "detail": cex.detail,
        "dataset": dataset,
    });
    write_atomic(
        &path,
        &format!(
            "{}\n",
            serde_json::to_string_pretty(&doc).expect("counterexample serializes")
        ),
    )?;
    Ok(path)
}

fn cmd_verify(seed: u64, cases: usize, slack: f64, out: &Path) -> Result<(), u8> {
    if cases == 0 {
        return Err(fail(2, "--cases must be at least 1"));
    }
    let threads = thread_cap();
    let envelope = envelope_suite(seed, cases, slack, threads);
    for (name, passed) in &envelope.passes {
        println!("{name:<28} {passed}/{cases}");
    }
    if let Some(cex) = &envelope.failure {
        let path = write_counterexample(out, seed, cex)?;
        return Err(fail(
            4,
            format!(
                "property '{}' failed on case {} ({}); counterexample written to {}",
                cex.property,
                cex.case_index,
                cex.detail,
                path.display()
            ),
        ));
    }

    let solver = solver_suite(seed, cases, 1e-4, threads).map_err(|e| fail(3, e))?;
    println!(
        "{:<28} {}/{} (max value gap {:.3e})",
        "solver_oracle_equivalence", solver.passes, cases, solver.max_gap
    );
    if let Some(cex) = &solver.failure {
        let path = write_counterexample(out, seed, cex)?;
        return Err(fail(
            4,
            format!(
                "property '{}' failed on case {}; counterexample written to {}",
                cex.property,
                cex.case_index,
                path.display()
            ),
        ));
    }
    println!("verification passed: {cases} cases, seed {seed}");
    Ok(())
}
