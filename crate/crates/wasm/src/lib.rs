//! Browser bindings for the interactive demo page.
//!
//! Three operations, all JSON-string in / JSON-string out so the same
//! functions are testable natively: an envelope explorer over the scalar
//! unknown function, the closed-loop experiment, and the default parameters
//! the page initializes its controls from.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use kinky_mpc_core::config::{build, RunConfig};
use kinky_mpc_core::kinky::{HolderSpec, KinkyModel, Norm, Observation};
use kinky_mpc_core::sim::run;

/// The scalar function the demo treats as unknown, the same one the
/// two-dimensional plant hides in its second state equation.
fn truth(x: f64) -> f64 {
    0.9 * x * (-x).exp()
}

fn error_json(message: impl std::fmt::Display) -> String {
    json!({ "error": message.to_string() }).to_string()
}

fn f64_field(args: &Value, key: &str, default: f64) -> f64 {
    args.get(key).and_then(Value::as_f64).unwrap_or(default)
}

/// Envelope explorer. Args (all optional except `sample_at`):
/// `{"q": 1.5, "lambda": 1.0, "sample_at": [0.5, 2.0], "lo": -0.5, "hi": 3.5,
///   "samples": 400}` — samples of the hidden function are taken at the
/// `sample_at` positions, and the envelopes/mean are evaluated on a uniform
/// grid over `[lo, hi]`.
#[wasm_bindgen]
pub fn envelope_profile(args_json: &str) -> String {
    let args: Value = match serde_json::from_str(args_json) {
        Ok(v) => v,
        Err(e) => return error_json(format!("bad arguments: {e}")),
    };
    let q = f64_field(&args, "q", 1.5);
    let lambda = f64_field(&args, "lambda", 1.0);
    let lo = f64_field(&args, "lo", -0.5);
    let hi = f64_field(&args, "hi", 3.5);
    let samples = args
        .get("samples")
        .and_then(Value::as_u64)
        .unwrap_or(400)
        .clamp(2, 5000) as usize;

    let spec = match HolderSpec::new(q, lambda, Norm::Euclidean) {
        Ok(s) => s,
        Err(e) => return error_json(e),
    };
    let mut observations = vec![Observation::new(vec![0.0], vec![0.0]).expect("origin seed")];
    if let Some(points) = args.get("sample_at").and_then(Value::as_array) {
        for p in points {
            if let Some(x) = p.as_f64() {
                match Observation::new(vec![x], vec![truth(x)]) {
                    Ok(obs) => observations.push(obs),
                    Err(e) => return error_json(e),
                }
            }
        }
    }
    let model = match KinkyModel::new(spec, 1, 1, observations) {
        Ok(m) => m,
        Err(e) => return error_json(e),
    };

    let mut xs = Vec::with_capacity(samples);
    let mut upper = Vec::with_capacity(samples);
    let mut lower = Vec::with_capacity(samples);
    let mut mean = Vec::with_capacity(samples);
    let mut truth_curve = Vec::with_capacity(samples);
    for k in 0..samples {
        let x = lo + (hi - lo) * k as f64 / (samples - 1) as f64;
        let (u, l) = match model.envelopes(&[x]) {
            Ok(pair) => pair,
            Err(e) => return error_json(e),
        };
        xs.push(x);
        upper.push(u[0]);
        lower.push(l[0]);
        mean.push(u[0] - (u[0] - l[0]) / 2.0);
        truth_curve.push(truth(x));
    }
    let data: Vec<[f64; 2]> = model.data().iter().map(|o| [o.z()[0], o.y()[0]]).collect();
    json!({
        "x": xs,
        "upper": upper,
        "lower": lower,
        "mean": mean,
        "truth": truth_curve,
        "data": data,
    })
    .to_string()
}

/// Closed-loop experiment. Args (all optional):
/// `{"learning": true, "horizon": 10, "steps": 50, "q": 1.5,
///   "x0": [3.0, 0.0]}`. Returns per-step series for plotting.
#[wasm_bindgen]
pub fn run_experiment(args_json: &str) -> String {
    let args: Value = match serde_json::from_str(args_json) {
        Ok(v) => v,
        Err(e) => return error_json(format!("bad arguments: {e}")),
    };
    let mut config = RunConfig::default();
    if let Some(learning) = args.get("learning").and_then(Value::as_bool) {
        config.sim.learning = Some(learning);
    }
    if let Some(horizon) = args.get("horizon").and_then(Value::as_u64) {
        config.ocp.n = Some(horizon.clamp(1, 40) as usize);
    }
    if let Some(steps) = args.get("steps").and_then(Value::as_u64) {
        config.sim.t = Some(steps.clamp(1, 200) as usize);
    }
    if let Some(q) = args.get("q").and_then(Value::as_f64) {
        config.learner.q = Some(q);
    }
    if let Some(x0) = args.get("x0").and_then(Value::as_array) {
        let x0: Vec<f64> = x0.iter().filter_map(Value::as_f64).collect();
        config.sim.x0 = Some(x0);
    }

    let resolved = match build(&config) {
        Ok(r) => r,
        Err(e) => return error_json(e),
    };
    let trace = match run(&resolved.sim) {
        Ok(t) => t,
        Err(e) => return error_json(e),
    };

    let t: Vec<usize> = trace.steps.iter().map(|s| s.t).collect();
    let x1: Vec<f64> = trace.steps.iter().map(|s| s.x[0]).collect();
    let x2: Vec<f64> = trace.steps.iter().map(|s| s.x[1]).collect();
    let u: Vec<f64> = trace.steps.iter().map(|s| s.u[0]).collect();
    let v: Vec<f64> = trace.steps.iter().map(|s| s.v_star).collect();
    let h: Vec<f64> = trace.steps.iter().map(|s| s.h_pre).collect();
    let c: Vec<f64> = trace.steps.iter().map(|s| s.c_t).collect();
    json!({
        "t": t,
        "x1": x1,
        "x2": x2,
        "u": u,
        "v": v,
        "h": h,
        "c": c,
        "final": trace.final_state,
        "final_norm": trace.final_state.iter().fold(0.0f64, |a, x| a.max(x.abs())),
    })
    .to_string()
}

/// Default parameters of the canned experiment, for initializing the page.
#[wasm_bindgen]
pub fn preset_params() -> String {
    json!({
        "q": 1.5,
        "lambda": 1.0,
        "horizon": 10,
        "steps": 50,
        "x0": [3.0, 0.0],
        "u_abs": 2.0,
        "c_box": [-0.5, 3.5],
    })
    .to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn envelope_profile_produces_curves_and_pins_data() {
        let out: Value =
            serde_json::from_str(&envelope_profile(r#"{"sample_at": [1.0, 2.5]}"#)).unwrap();
        assert!(out.get("error").is_none(), "unexpected error: {out}");
        let xs = out["x"].as_array().unwrap();
        assert_eq!(xs.len(), 400);
        let upper = out["upper"].as_array().unwrap();
        let lower = out["lower"].as_array().unwrap();
        for (u, l) in upper.iter().zip(lower) {
            assert!(u.as_f64().unwrap() >= l.as_f64().unwrap());
        }
        // origin seed plus the two samples
        assert_eq!(out["data"].as_array().unwrap().len(), 3);
    }

    #[test]
    fn envelope_profile_reports_holder_violations() {
        // q far below the true slope: the samples contradict the bound
        let out: Value = serde_json::from_str(&envelope_profile(
            r#"{"q": 0.05, "sample_at": [0.5, 0.6, 3.0]}"#,
        ))
        .unwrap();
        let message = out["error"].as_str().expect("expected an error");
        assert!(message.contains("q >="), "unhelpful message: {message}");
    }

    #[test]
    fn run_experiment_returns_series() {
        let out: Value = serde_json::from_str(&run_experiment(
            r#"{"learning": true, "horizon": 10, "steps": 8}"#,
        ))
        .unwrap();
        assert!(out.get("error").is_none(), "unexpected error: {out}");
        assert_eq!(out["t"].as_array().unwrap().len(), 8);
        assert_eq!(out["u"][0].as_f64().unwrap(), -2.0);
        // uncertainty mass never grows
        let c = out["c"].as_array().unwrap();
        for w in c.windows(2) {
            assert!(w[1].as_f64().unwrap() <= w[0].as_f64().unwrap() + 1e-12);
        }
    }

    #[test]
    fn bad_arguments_are_reported_not_panicked() {
        let out: Value = serde_json::from_str(&run_experiment("{oops")).unwrap();
        assert!(out["error"].as_str().unwrap().contains("bad arguments"));
        let out: Value = serde_json::from_str(&envelope_profile(r#"{"q": -1}"#)).unwrap();
        assert!(out.get("error").is_some());
    }

    #[test]
    fn preset_params_parse() {
        let out: Value = serde_json::from_str(&preset_params()).unwrap();
        assert_eq!(out["q"].as_f64().unwrap(), 1.5);
        assert_eq!(out["horizon"].as_u64().unwrap(), 10);
    }
}
