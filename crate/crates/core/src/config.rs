//! Run configuration: a strict JSON schema whose defaults encode the canned
//! two-dimensional experiment (preset `paper_example`). Unknown keys are
//! rejected; missing keys fall back to the documented defaults, so the empty
//! document `{}` is exactly the preset.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dynamics::{CompositeModel, ExamplePlant, FeatureMap, SystemOracle, ZeroDynamics};
use crate::error::{Error, Result};
use crate::kinky::{HolderSpec, KinkyModel, Norm};
use crate::ocp::{InputBox, OcpProblem, SolverSettings, StageCost};
use crate::sim::SimConfig;

pub const PRESETS: &[&str] = &["paper_example"];

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub plant: PlantConfig,
    pub learner: LearnerConfig,
    pub ocp: OcpConfig,
    pub sim: SimBlock,
    pub solver: SolverBlock,
    pub output: OutputBlock,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PlantConfig {
    /// Registry name; `example_2d` is the only built-in family.
    pub name: Option<String>,
    pub params: Option<PlantParams>,
}

/// Coefficient overrides for the `example_2d` family.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PlantParams {
    pub a11: Option<f64>,
    pub a12: Option<f64>,
    pub a22_const: Option<f64>,
    pub a22_x1: Option<f64>,
    pub b2: Option<f64>,
    pub exp_gain: Option<f64>,
    pub exp_rate: Option<f64>,
    /// What the controller is given up front: `structured` (the plant minus
    /// its exponential term, the default) or `none` (learn the full map).
    pub known: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LearnerConfig {
    pub q: Option<f64>,
    pub lambda: Option<f64>,
    pub norm: Option<String>,
    /// `x1` (first state component) or `full` (the stacked state-input pair).
    pub feature: Option<String>,
    /// 1-based state components that receive the learned residual.
    pub selector: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct OcpConfig {
    #[serde(rename = "N")]
    pub n: Option<usize>,
    /// Row-major state weight matrix.
    #[serde(rename = "Q")]
    pub q: Option<Vec<f64>>,
    /// Row-major input weight matrix.
    #[serde(rename = "R")]
    pub r: Option<Vec<f64>>,
    pub u_lo: Option<Vec<f64>>,
    pub u_hi: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SimBlock {
    pub x0: Option<Vec<f64>>,
    #[serde(rename = "T")]
    pub t: Option<usize>,
    pub learning: Option<bool>,
    /// Quadrature box in feature space, one `[lo, hi]` pair per axis.
    pub c_box: Option<Vec<[f64; 2]>>,
    pub c_grid: Option<usize>,
    pub record_every: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SolverBlock {
    pub k_max: Option<usize>,
    pub tol_grad: Option<f64>,
    pub tol_cost: Option<f64>,
    pub fd_step: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct OutputBlock {
    pub trace_path: Option<String>,
    pub report_path: Option<String>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("bad run config: {e}")))
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper_example" => Ok(Self::default()),
            other => Err(Error::Config(format!(
                "unknown preset '{other}' (available: {})",
                PRESETS.join(", ")
            ))),
        }
    }

    /// Applies dotted-path `--set key=value` overrides. Values are parsed as
    /// JSON when possible and fall back to strings, so `sim.learning=false`,
    /// `ocp.N=20` and `learner.norm=chebyshev` all work.
    pub fn with_overrides(self, overrides: &[(String, String)]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self);
        }
        let mut root = serde_json::to_value(&self)
            .map_err(|e| Error::Config(format!("config serialization failed: {e}")))?;
        for (key, raw) in overrides {
            apply_override(&mut root, key, raw)?;
        }
        serde_json::from_value(root).map_err(|e| Error::Config(format!("bad override: {e}")))
    }
}

fn apply_override(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override path '{key}'")));
    }
    let mut cur = root;
    for part in &parts[..parts.len() - 1] {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override path '{key}' crosses a non-object")))?;
        let slot = obj.entry(part.to_string()).or_insert(Value::Null);
        if !slot.is_object() {
            *slot = Value::Object(Default::default());
        }
        cur = slot;
    }
    let leaf = parts.last().expect("split never empty");
    let parsed =
        serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    cur.as_object_mut()
        .ok_or_else(|| Error::Config(format!("override path '{key}' crosses a non-object")))?
        .insert(leaf.to_string(), parsed);
    Ok(())
}

/// A run configuration resolved into executable pieces.
pub struct ResolvedRun {
    pub sim: SimConfig,
    pub trace_path: String,
    pub report_path: String,
    pub horizon: usize,
    /// Whether the horizon came from the defaults rather than the config.
    pub horizon_is_default: bool,
}

/// Validates the configuration and instantiates plant, learner, problem and
/// simulation settings.
pub fn build(config: &RunConfig) -> Result<ResolvedRun> {
    // plant registry
    let name = config.plant.name.as_deref().unwrap_or("example_2d");
    if name != "example_2d" {
        return Err(Error::Config(format!(
            "unknown plant '{name}' (available: example_2d)"
        )));
    }
    let p = config.plant.params.clone().unwrap_or_default();
    let truth = ExamplePlant {
        a11: p.a11.unwrap_or(1.0),
        a12: p.a12.unwrap_or(0.4),
        a22_const: p.a22_const.unwrap_or(0.56),
        a22_x1: p.a22_x1.unwrap_or(0.1),
        b2: p.b2.unwrap_or(0.4),
        exp_gain: p.exp_gain.unwrap_or(0.9),
        exp_rate: p.exp_rate.unwrap_or(1.0),
    };
    let (n, m) = truth.dims();
    let known: Arc<dyn SystemOracle> = match p.known.as_deref().unwrap_or("structured") {
        "structured" => Arc::new(truth.known_part()),
        "none" => Arc::new(ZeroDynamics { n, m }),
        other => {
            return Err(Error::Config(format!(
                "unknown known-part mode '{other}' (available: structured, none)"
            )))
        }
    };

    // learner
    let norm = match config.learner.norm.as_deref().unwrap_or("euclidean") {
        "euclidean" => Norm::Euclidean,
        "chebyshev" => Norm::Chebyshev,
        other => {
            return Err(Error::Config(format!(
                "unknown norm '{other}' (available: euclidean, chebyshev)"
            )))
        }
    };
    let spec = HolderSpec::new(
        config.learner.q.unwrap_or(1.5),
        config.learner.lambda.unwrap_or(1.0),
        norm,
    )?;
    let feature = match config.learner.feature.as_deref().unwrap_or("x1") {
        "x1" => FeatureMap::X1,
        "full" => FeatureMap::Full,
        other => {
            return Err(Error::Config(format!(
                "unknown feature map '{other}' (available: x1, full)"
            )))
        }
    };
    let selector_1based = config.learner.selector.clone().unwrap_or_else(|| vec![2]);
    let mut selector = Vec::with_capacity(selector_1based.len());
    for idx in selector_1based {
        if idx == 0 || idx > n {
            return Err(Error::Config(format!(
                "selector component {idx} out of range 1..={n}"
            )));
        }
        selector.push(idx - 1);
    }
    let learner = KinkyModel::seeded_origin(spec, feature.dim(n, m), selector.len())?;
    let model = CompositeModel::new(known, feature, selector, learner)?;

    // optimal control problem
    let horizon_is_default = config.ocp.n.is_none();
    let horizon = config.ocp.n.unwrap_or(10);
    let q_mat = config.ocp.q.clone().unwrap_or_else(|| identity(n));
    let r_mat = config.ocp.r.clone().unwrap_or_else(|| identity(m));
    let cost = StageCost::new(n, m, q_mat, r_mat)?;
    let bounds = InputBox::new(
        config.ocp.u_lo.clone().unwrap_or_else(|| vec![-2.0; m]),
        config.ocp.u_hi.clone().unwrap_or_else(|| vec![2.0; m]),
    )?;
    let settings = SolverSettings {
        k_max: config.solver.k_max.unwrap_or(500),
        tol_grad: config.solver.tol_grad.unwrap_or(1e-8),
        tol_cost: config.solver.tol_cost.unwrap_or(1e-12),
        fd_step: config.solver.fd_step.unwrap_or(1e-6),
        ..SolverSettings::default()
    };
    let problem = OcpProblem::new(horizon, cost, model, bounds, settings)?;

    // simulation
    let sim = SimConfig {
        plant: Arc::new(truth),
        problem,
        x0: config.sim.x0.clone().unwrap_or_else(|| vec![3.0, 0.0]),
        steps: config.sim.t.unwrap_or(50),
        learning_enabled: config.sim.learning.unwrap_or(true),
        c_box: config
            .sim
            .c_box
            .clone()
            .unwrap_or_else(|| vec![[-0.5, 3.5]])
            .into_iter()
            .map(|[lo, hi]| (lo, hi))
            .collect(),
        c_grid: config.sim.c_grid.unwrap_or(400),
        record_every: config.sim.record_every.unwrap_or(1),
    };
    sim.validate()?;

    Ok(ResolvedRun {
        sim,
        trace_path: config
            .output
            .trace_path
            .clone()
            .unwrap_or_else(|| "trace.csv".into()),
        report_path: config
            .output
            .report_path
            .clone()
            .unwrap_or_else(|| "report.json".into()),
        horizon,
        horizon_is_default,
    })
}

fn identity(dim: usize) -> Vec<f64> {
    let mut m = vec![0.0; dim * dim];
    for i in 0..dim {
        m[i * dim + i] = 1.0;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default_preset() {
        let config = RunConfig::from_json("{}").unwrap();
        assert_eq!(config, RunConfig::preset("paper_example").unwrap());
        let resolved = build(&config).unwrap();
        assert_eq!(resolved.horizon, 10);
        assert!(resolved.horizon_is_default);
        assert_eq!(resolved.sim.x0, vec![3.0, 0.0]);
        assert_eq!(resolved.sim.steps, 50);
        assert!(resolved.sim.learning_enabled);
        assert_eq!(resolved.sim.c_box, vec![(-0.5, 3.5)]);
        assert_eq!(resolved.sim.c_grid, 400);
        assert_eq!(resolved.sim.problem.input_box().lo(), &[-2.0]);
        assert_eq!(resolved.sim.problem.input_box().hi(), &[2.0]);
        assert_eq!(resolved.sim.problem.model().residual().spec().q(), 1.5);
        assert_eq!(resolved.sim.problem.model().selector(), &[1]);
        assert_eq!(resolved.trace_path, "trace.csv");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"bogus": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"plant": {"bogus": 1}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"sim": {"x0": [1, 2], "extra": 0}}"#).is_err());
    }

    #[test]
    fn malformed_json_is_rejected() {
        assert!(RunConfig::from_json("{not json").is_err());
    }

    #[test]
    fn explicit_horizon_clears_the_default_flag() {
        let config = RunConfig::from_json(r#"{"ocp": {"N": 5}}"#).unwrap();
        let resolved = build(&config).unwrap();
        assert_eq!(resolved.horizon, 5);
        assert!(!resolved.horizon_is_default);
    }

    #[test]
    fn overrides_navigate_dotted_paths() {
        let config = RunConfig::preset("paper_example")
            .unwrap()
            .with_overrides(&[
                ("sim.learning".into(), "false".into()),
                ("ocp.N".into(), "20".into()),
                ("learner.norm".into(), "chebyshev".into()),
                ("sim.x0".into(), "[1.0, 0.5]".into()),
            ])
            .unwrap();
        assert_eq!(config.sim.learning, Some(false));
        assert_eq!(config.ocp.n, Some(20));
        assert_eq!(config.learner.norm.as_deref(), Some("chebyshev"));
        assert_eq!(config.sim.x0, Some(vec![1.0, 0.5]));
        let resolved = build(&config).unwrap();
        assert!(!resolved.sim.learning_enabled);
        assert_eq!(resolved.horizon, 20);
    }

    #[test]
    fn bad_overrides_are_rejected() {
        let base = RunConfig::default();
        assert!(base
            .clone()
            .with_overrides(&[("ocp.bogus".into(), "1".into())])
            .is_err());
        assert!(base
            .clone()
            .with_overrides(&[("sim..t".into(), "1".into())])
            .is_err());
        assert!(base
            .with_overrides(&[("sim.T".into(), "\"many\"".into())])
            .is_err());
    }

    #[test]
    fn selector_is_one_based_and_validated() {
        let ok = RunConfig::from_json(
            r#"{"learner": {"selector": [1, 2], "feature": "full"},
                                          "sim": {"c_box": [[-1,1],[-1,1],[-2,2]]}}"#,
        )
        .unwrap();
        let resolved = build(&ok).unwrap();
        assert_eq!(resolved.sim.problem.model().selector(), &[0, 1]);

        let zero = RunConfig::from_json(r#"{"learner": {"selector": [0]}}"#).unwrap();
        assert!(build(&zero).is_err());
        let high = RunConfig::from_json(r#"{"learner": {"selector": [3]}}"#).unwrap();
        assert!(build(&high).is_err());
    }

    #[test]
    fn full_feature_needs_matching_quadrature_box() {
        let config =
            RunConfig::from_json(r#"{"learner": {"feature": "full", "selector": [1, 2]}}"#)
                .unwrap();
        // the default 1-axis box no longer matches d_in = 3
        assert!(build(&config).is_err());
    }

    #[test]
    fn unknown_names_are_rejected() {
        for bad in [
            r#"{"plant": {"name": "pendulum"}}"#,
            r#"{"learner": {"norm": "manhattan"}}"#,
            r#"{"learner": {"feature": "x2"}}"#,
            r#"{"plant": {"params": {"known": "oracle"}}}"#,
        ] {
            let config = RunConfig::from_json(bad).unwrap();
            assert!(build(&config).is_err(), "expected rejection for {bad}");
        }
        assert!(RunConfig::preset("nonexistent").is_err());
    }

    #[test]
    fn config_json_round_trips() {
        let config = RunConfig::preset("paper_example")
            .unwrap()
            .with_overrides(&[("ocp.N".into(), "7".into())])
            .unwrap();
        let text = serde_json::to_string(&config).unwrap();
        let back = RunConfig::from_json(&text).unwrap();
        assert_eq!(config, back);
    }
}
