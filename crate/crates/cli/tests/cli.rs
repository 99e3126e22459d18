//! End-to-end tests of the `kinky-mpc` binary: exit codes, file outputs,
//! determinism.

use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_kinky-mpc"))
}

fn outdir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("kinky_mpc_cli_{}_{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().unwrap();
    assert!(
        out.status.success(),
        "expected success for {args:?}: stderr = {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn exit_code(args: &[&str]) -> i32 {
    bin().args(args).output().unwrap().status.code().unwrap()
}

#[test]
fn run_preset_writes_trace_and_report() {
    let dir = outdir("run_preset");
    run_ok(&[
        "run",
        "--preset",
        "paper_example",
        "--out",
        dir.to_str().unwrap(),
    ]);

    let csv = fs::read_to_string(dir.join("trace.csv")).unwrap();
    let lines: Vec<&str> = csv.trim_end().lines().collect();
    assert_eq!(
        lines.len(),
        1 + 51,
        "header plus 50 step rows plus terminal row"
    );
    assert!(lines[0].starts_with("t,x1,x2,u1,"));

    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["horizon"]["N"], 10);
    assert_eq!(report["horizon"]["is_default"], true);
    assert_eq!(report["learning"], true);
    assert_eq!(report["converged_to_origin"], true);
    assert_eq!(report["plateau_detected"], false);
    assert_eq!(report["steps"], 50);
}

#[test]
fn run_without_learning_reports_the_plateau() {
    let dir = outdir("run_plateau");
    run_ok(&[
        "run",
        "--preset",
        "paper_example",
        "--set",
        "sim.learning=false",
        "--out",
        dir.to_str().unwrap(),
    ]);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["learning"], false);
    assert_eq!(report["converged_to_origin"], false);
    assert_eq!(report["plateau_detected"], true);
    let mean = report["x1_last10_mean"].as_f64().unwrap();
    assert!((1.0..=1.4).contains(&mean), "plateau mean {mean}");
}

#[test]
fn usage_and_config_errors_exit_2() {
    assert_eq!(exit_code(&["run"]), 2);
    assert_eq!(exit_code(&["run", "--preset", "nonexistent"]), 2);

    let dir = outdir("bad_config");
    let bad = dir.join("bad.json");
    fs::write(&bad, "{not json").unwrap();
    assert_eq!(exit_code(&["run", "--config", bad.to_str().unwrap()]), 2);

    let unknown_key = dir.join("unknown.json");
    fs::write(&unknown_key, r#"{"bogus": 1}"#).unwrap();
    assert_eq!(
        exit_code(&["run", "--config", unknown_key.to_str().unwrap()]),
        2
    );

    assert_eq!(
        exit_code(&["run", "--preset", "paper_example", "--set", "novalue"]),
        2
    );
}

#[test]
fn numeric_abort_exits_3() {
    let dir = outdir("abort");
    // exp(+1000) overflows inside the plant on the first transition
    let code = exit_code(&[
        "run",
        "--preset",
        "paper_example",
        "--set",
        "sim.x0=[-1000.0, 0.0]",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(code, 3);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let a = outdir("det_a");
    let b = outdir("det_b");
    for dir in [&a, &b] {
        run_ok(&[
            "run",
            "--preset",
            "paper_example",
            "--out",
            dir.to_str().unwrap(),
        ]);
    }
    assert_eq!(
        fs::read(a.join("trace.csv")).unwrap(),
        fs::read(b.join("trace.csv")).unwrap()
    );
    assert_eq!(
        fs::read(a.join("report.json")).unwrap(),
        fs::read(b.join("report.json")).unwrap()
    );
}

#[test]
fn compare_shows_learning_wins_on_the_preset() {
    let dir = outdir("compare");
    run_ok(&[
        "compare",
        "--preset",
        "paper_example",
        "--out",
        dir.to_str().unwrap(),
    ]);

    assert!(dir.join("trace_on.csv").exists());
    assert!(dir.join("trace_off.csv").exists());
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    let on_norm = summary["learning_on"]["final_state_norm_inf"]
        .as_f64()
        .unwrap();
    let off_norm = summary["learning_off"]["final_state_norm_inf"]
        .as_f64()
        .unwrap();
    assert!(
        on_norm < off_norm,
        "learning-on {on_norm} vs learning-off {off_norm}"
    );
    let on_cost = summary["learning_on"]["total_stage_cost"].as_f64().unwrap();
    let off_cost = summary["learning_off"]["total_stage_cost"]
        .as_f64()
        .unwrap();
    assert!(
        on_cost <= off_cost,
        "closed-loop cost {on_cost} vs {off_cost}"
    );
}

#[test]
fn compare_with_one_step_shares_the_first_decision() {
    let dir = outdir("compare_t1");
    run_ok(&[
        "compare",
        "--preset",
        "paper_example",
        "--set",
        "sim.T=1",
        "--out",
        dir.to_str().unwrap(),
    ]);
    let first_fields = |name: &str| -> Vec<String> {
        let text = fs::read_to_string(dir.join(name)).unwrap();
        let row = text.lines().nth(1).unwrap();
        // state, input, stage cost, value, width, mass — everything except
        // the trailing diagnostics that depend on the post-step model
        row.split(',').take(8).map(str::to_string).collect()
    };
    assert_eq!(first_fields("trace_on.csv"), first_fields("trace_off.csv"));
}

#[test]
fn verify_passes_and_prints_counts() {
    let out = run_ok(&["verify", "--seed", "1", "--cases", "20"]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    for property in [
        "containment",
        "interpolation",
        "monotone_refinement",
        "symmetry",
        "predict_holder",
        "lemma2_update_bound",
        "solver_oracle_equivalence",
    ] {
        assert!(
            stdout.contains(property),
            "missing {property} in:\n{stdout}"
        );
    }
    assert!(
        stdout.contains("20/20"),
        "missing pass counts in:\n{stdout}"
    );
}

#[test]
fn verify_rejects_zero_cases() {
    assert_eq!(exit_code(&["verify", "--cases", "0"]), 2);
}

#[test]
fn verify_failure_writes_a_counterexample() {
    let dir = outdir("verify_fail");
    let out = bin()
        .args([
            "verify",
            "--cases",
            "3",
            "--slack",
            "-1",
            "--out",
            dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code().unwrap(), 4);
    let cex: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("counterexample.json")).unwrap())
            .unwrap();
    assert!(cex["property"].is_string());
    assert_eq!(cex["seed"], 1);
    assert!(cex["dataset"]["data"].is_array());
}
