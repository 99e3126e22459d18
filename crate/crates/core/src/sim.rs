//! Receding-horizon closed loop with online learning.
//!
//! Each step solves the finite-horizon problem at the current state, applies
//! the first input to the true plant, and (when learning is enabled) feeds the
//! observed transition back into the residual learner before the next solve.
//! The per-step diagnostics recorded here are the computable counterparts of
//! the scheme's stability certificates: the pre-update uncertainty at the
//! visited point, the integrated uncertainty mass, and the one-step change of
//! the optimal value.

use std::sync::Arc;

use crate::dynamics::{oracle_step, SystemOracle};
use crate::error::{Error, Result};
use crate::linalg;
use crate::ocp::{shift_warm_start, OcpProblem};

/// A visited point counts as "already known" below this pre-update width.
pub const ZERO_WIDTH_THRESHOLD: f64 = 1e-9;
/// Slack granted to the optimal-value decrease test: the solver is inexact.
pub const SOLVER_SLACK: f64 = 1e-6;

/// Closed-loop experiment description. The embedded problem carries the
/// initial nominal model; the plant is the ground truth the controller is
/// allowed to touch only through applied transitions.
#[derive(Clone)]
pub struct SimConfig {
    pub plant: Arc<dyn SystemOracle>,
    pub problem: OcpProblem,
    pub x0: Vec<f64>,
    pub steps: usize,
    pub learning_enabled: bool,
    /// Axis-aligned box in the learner's feature space over which the
    /// uncertainty mass is integrated.
    pub c_box: Vec<(f64, f64)>,
    pub c_grid: usize,
    /// Trace export writes every k-th step row (the in-memory trace is always
    /// complete).
    pub record_every: usize,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let (n, _) = self.plant.dims();
        if self.plant.dims() != self.problem.model().dims() {
            return Err(Error::Config(format!(
                "plant dimensions {:?} do not match nominal model dimensions {:?}",
                self.plant.dims(),
                self.problem.model().dims()
            )));
        }
        if self.x0.len() != n {
            return Err(Error::Dimension {
                what: "initial state",
                expected: n,
                got: self.x0.len(),
            });
        }
        if !linalg::all_finite(&self.x0) {
            return Err(Error::NonFinite {
                what: "initial state",
                step: None,
            });
        }
        if self.steps == 0 {
            return Err(Error::Config("simulation needs at least one step".into()));
        }
        if self.record_every == 0 {
            return Err(Error::Config("record_every must be at least 1".into()));
        }
        if self.c_box.len() != self.problem.model().residual().d_in() {
            return Err(Error::Dimension {
                what: "uncertainty box",
                expected: self.problem.model().residual().d_in(),
                got: self.c_box.len(),
            });
        }
        Ok(())
    }
}

/// Everything recorded about one closed-loop step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub stage_cost: f64,
    pub v_star: f64,
    /// Width of the pre-update model at the visited feature point. This is the
    /// quantity the decrease estimates are stated in; the post-update model is
    /// zero there by construction.
    pub h_pre: f64,
    pub c_t: f64,
    pub iterations: usize,
    pub converged: bool,
    /// `V*_{t+1} - V*_t + stage_cost_t`, filled once the next solve has run.
    pub iss_residual: Option<f64>,
    /// Rollout cost of the shifted previous solution at this state; the solve
    /// may never do worse. `None` at the first step.
    pub warm_cost: Option<f64>,
}

/// Full closed-loop record plus the terminal state and its optimal value.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub steps: Vec<StepRecord>,
    pub final_state: Vec<f64>,
    pub final_value: f64,
    pub record_every: usize,
}

/// Runs the receding-horizon loop. Deterministic end-to-end: the same config
/// produces a bitwise-identical trace.
pub fn run(config: &SimConfig) -> Result<SimTrace> {
    config.validate()?;
    let mut problem = config.problem.clone();
    let mut x = config.x0.clone();
    let mut warm: Option<Vec<Vec<f64>>> = None;
    let mut records: Vec<StepRecord> = Vec::with_capacity(config.steps);
    let mut prev_c = f64::INFINITY;

    for t in 0..config.steps {
        let warm_cost = match &warm {
            Some(w) => Some(problem.rollout(&x, w).map_err(|e| e.at_step(t))?.1),
            None => None,
        };
        let sol = problem
            .solve(&x, warm.as_deref())
            .map_err(|e| e.at_step(t))?;
        if let Some(wc) = warm_cost {
            assert!(
                sol.value <= wc,
                "optimizer returned {} but the shifted candidate costs {wc} at step {t}",
                sol.value
            );
        }

        let u = sol.first_input().to_vec();
        let z = problem.model().feature_of(&x, &u);
        let h_pre = problem
            .model()
            .residual()
            .width(&z)
            .map_err(|e| e.at_step(t))?;
        let c_t = problem
            .model()
            .residual()
            .uncertainty_size(&config.c_box, config.c_grid)
            .map_err(|e| e.at_step(t))?;
        assert!(
            c_t <= prev_c + 1e-12,
            "uncertainty mass grew from {prev_c} to {c_t} at step {t}"
        );
        prev_c = c_t;

        let stage_cost = problem.cost().eval(&x, &u);
        let x_next = oracle_step(config.plant.as_ref(), &x, &u).map_err(|e| e.at_step(t))?;

        if let Some(prev) = records.last_mut() {
            prev.iss_residual = Some(sol.value - prev.v_star + prev.stage_cost);
        }
        records.push(StepRecord {
            t,
            x: x.clone(),
            u: u.clone(),
            stage_cost,
            v_star: sol.value,
            h_pre,
            c_t,
            iterations: sol.iterations,
            converged: sol.converged,
            iss_residual: None,
            warm_cost,
        });

        if config.learning_enabled {
            let updated = problem
                .model()
                .observe_transition(&x, &u, &x_next)
                .map_err(|e| e.at_step(t))?;
            problem = problem.with_model(updated)?;
        }
        warm = Some(shift_warm_start(&sol, problem.input_box()));
        x = x_next;
    }

    // One more solve at the terminal state so the last step's value decrease
    // is well defined.
    let final_sol = problem
        .solve(&x, warm.as_deref())
        .map_err(|e| e.at_step(config.steps))?;
    if let Some(last) = records.last_mut() {
        last.iss_residual = Some(final_sol.value - last.v_star + last.stage_cost);
    }

    Ok(SimTrace {
        steps: records,
        final_state: x,
        final_value: final_sol.value,
        record_every: config.record_every,
    })
}

/// Per-step decrease diagnostics of the optimal value.
#[derive(Debug, Clone, PartialEq)]
pub struct IssReport {
    /// `(iss_residual, h_pre)` per step, in time order.
    pub pairs: Vec<(f64, f64)>,
    /// Steps whose pre-update width was below `ZERO_WIDTH_THRESHOLD`.
    pub zero_width_steps: usize,
    pub max_residual_at_zero_width: Option<f64>,
    /// Whenever the model already knew the visited point, the optimal value
    /// must have decreased by the full stage cost (up to solver slack).
    pub zero_width_ok: bool,
    /// Spearman rank correlation between residuals and widths; reported, not
    /// asserted. `None` when either series is constant.
    pub spearman: Option<f64>,
}

pub fn iss_report(trace: &SimTrace) -> IssReport {
    let pairs: Vec<(f64, f64)> = trace
        .steps
        .iter()
        .filter_map(|s| s.iss_residual.map(|r| (r, s.h_pre)))
        .collect();
    let mut zero_width_steps = 0;
    let mut max_residual_at_zero_width: Option<f64> = None;
    for &(r, h) in &pairs {
        if h <= ZERO_WIDTH_THRESHOLD {
            zero_width_steps += 1;
            max_residual_at_zero_width =
                Some(max_residual_at_zero_width.map_or(r, |m: f64| m.max(r)));
        }
    }
    let zero_width_ok = max_residual_at_zero_width.is_none_or(|m| m <= SOLVER_SLACK);
    let spearman = spearman_rank(
        &pairs.iter().map(|p| p.0).collect::<Vec<_>>(),
        &pairs.iter().map(|p| p.1).collect::<Vec<_>>(),
    );
    IssReport {
        pairs,
        zero_width_steps,
        max_residual_at_zero_width,
        zero_width_ok,
        spearman,
    }
}

/// End-of-run convergence summary.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    /// Sup-norm of the terminal state.
    pub final_state_norm: f64,
    /// Pre-update width at the last visited point.
    pub final_width: f64,
    /// The (nonincreasing) series of integrated uncertainty values.
    pub c_series: Vec<f64>,
    /// Running partial sums of the per-step widths; bounded when the
    /// uncertainty mass keeps paying for every visit.
    pub width_partial_sums: Vec<f64>,
}

pub fn convergence_report(trace: &SimTrace) -> Result<ConvergenceReport> {
    if trace.steps.len() < 20 {
        return Err(Error::Config(format!(
            "convergence report needs at least 20 steps, trace has {}",
            trace.steps.len()
        )));
    }
    let mut sums = Vec::with_capacity(trace.steps.len());
    let mut acc = 0.0;
    for s in &trace.steps {
        acc += s.h_pre;
        sums.push(acc);
    }
    Ok(ConvergenceReport {
        final_state_norm: linalg::inf_norm(&trace.final_state),
        final_width: trace.steps.last().map_or(0.0, |s| s.h_pre),
        c_series: trace.steps.iter().map(|s| s.c_t).collect(),
        width_partial_sums: sums,
    })
}

fn spearman_rank(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() < 2 {
        return None;
    }
    let ra = ranks(a);
    let rb = ranks(b);
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for i in 0..a.len() {
        cov += (ra[i] - mean) * (rb[i] - mean);
        var_a += (ra[i] - mean).powi(2);
        var_b += (rb[i] - mean).powi(2);
    }
    if var_a == 0.0 || var_b == 0.0 {
        return None;
    }
    Some(cov / (var_a.sqrt() * var_b.sqrt()))
}

/// Average ranks, ties shared.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| {
        values[i]
            .partial_cmp(&values[j])
            .expect("finite diagnostics")
    });
    let mut out = vec![0.0; values.len()];
    let mut k = 0;
    while k < order.len() {
        let mut j = k;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[k]] {
            j += 1;
        }
        let avg = (k + j) as f64 / 2.0 + 1.0;
        for &idx in &order[k..=j] {
            out[idx] = avg;
        }
        k = j + 1;
    }
    out
}

fn fmt(x: f64) -> String {
    format!("{:.16e}", x)
}

impl SimTrace {
    /// Sum of realized stage costs along the run.
    pub fn total_stage_cost(&self) -> f64 {
        self.steps.iter().map(|s| s.stage_cost).sum()
    }

    /// CSV export: one row per recorded step plus a terminal row holding the
    /// final state. Floating-point fields carry 17 significant digits so the
    /// trace is reproducible bit for bit.
    pub fn to_csv(&self) -> String {
        let n = self.final_state.len();
        let m = self.steps.first().map_or(0, |s| s.u.len());
        let mut out = String::new();
        out.push('t');
        for i in 1..=n {
            out.push_str(&format!(",x{i}"));
        }
        for i in 1..=m {
            out.push_str(&format!(",u{i}"));
        }
        out.push_str(",stage_cost,V_star,h_t,C_t,iters,converged,iss_residual\n");
        for s in &self.steps {
            if s.t % self.record_every != 0 {
                continue;
            }
            out.push_str(&s.t.to_string());
            for v in &s.x {
                out.push(',');
                out.push_str(&fmt(*v));
            }
            for v in &s.u {
                out.push(',');
                out.push_str(&fmt(*v));
            }
            out.push_str(&format!(
                ",{},{},{},{},{},{},{}\n",
                fmt(s.stage_cost),
                fmt(s.v_star),
                fmt(s.h_pre),
                fmt(s.c_t),
                s.iterations,
                s.converged,
                s.iss_residual.map(fmt).unwrap_or_default()
            ));
        }
        // terminal row: state only
        out.push_str(&self.steps.len().to_string());
        for v in &self.final_state {
            out.push(',');
            out.push_str(&fmt(*v));
        }
        for _ in 0..m + 7 {
            out.push(',');
        }
        out.push('\n');
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{CompositeModel, ExamplePlant, FeatureMap};
    use crate::kinky::{HolderSpec, KinkyModel, Norm};
    use crate::ocp::{InputBox, SolverSettings, StageCost};

    fn bench_config(x0: [f64; 2], steps: usize, learning: bool) -> SimConfig {
        let plant = ExamplePlant::default();
        let spec = HolderSpec::new(1.5, 1.0, Norm::Euclidean).unwrap();
        let learner = KinkyModel::seeded_origin(spec, 1, 1).unwrap();
        let model = CompositeModel::new(
            Arc::new(plant.known_part()),
            FeatureMap::X1,
            vec![1],
            learner,
        )
        .unwrap();
        let cost = StageCost::new(2, 1, vec![1.0, 0.0, 0.0, 1.0], vec![1.0]).unwrap();
        let bounds = InputBox::new(vec![-2.0], vec![2.0]).unwrap();
        let problem = OcpProblem::new(10, cost, model, bounds, SolverSettings::default()).unwrap();
        SimConfig {
            plant: Arc::new(plant),
            problem,
            x0: x0.to_vec(),
            steps,
            learning_enabled: learning,
            c_box: vec![(-0.5, 3.5)],
            c_grid: 50,
            record_every: 1,
        }
    }

    #[test]
    fn equilibrium_run_is_identically_zero() {
        let trace = run(&bench_config([0.0, 0.0], 5, true)).unwrap();
        for s in &trace.steps {
            assert_eq!(s.x, vec![0.0, 0.0]);
            assert_eq!(s.u, vec![0.0]);
            assert_eq!(s.v_star, 0.0);
            assert_eq!(s.stage_cost, 0.0);
            assert_eq!(s.h_pre, 0.0);
            assert_eq!(s.iss_residual, Some(0.0));
        }
        assert_eq!(trace.final_state, vec![0.0, 0.0]);

        let report = iss_report(&trace);
        assert_eq!(report.zero_width_steps, 5);
        assert!(report.zero_width_ok);
    }

    #[test]
    fn first_step_saturates_and_hits_the_plant_value() {
        let trace = run(&bench_config([3.0, 0.0], 2, true)).unwrap();
        assert_eq!(trace.steps[0].u, vec![-2.0]);
        let x1 = &trace.steps[1].x;
        assert_eq!(x1[0], 3.0);
        assert!((x1[1] - (-0.665575)).abs() < 1e-6, "x2 = {}", x1[1]);
    }

    #[test]
    fn trace_replays_through_the_oracle() {
        let config = bench_config([3.0, 0.0], 4, true);
        let trace = run(&config).unwrap();
        for t in 0..trace.steps.len() {
            let s = &trace.steps[t];
            let next = oracle_step(config.plant.as_ref(), &s.x, &s.u).unwrap();
            let expected = if t + 1 < trace.steps.len() {
                &trace.steps[t + 1].x
            } else {
                &trace.final_state
            };
            assert_eq!(&next, expected);
        }
    }

    #[test]
    fn repeated_runs_are_bitwise_identical() {
        let config = bench_config([3.0, 0.0], 3, true);
        let a = run(&config).unwrap();
        let b = run(&config).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_csv(), b.to_csv());
    }

    #[test]
    fn learning_pins_the_visited_points() {
        let config = bench_config([3.0, 0.0], 4, true);
        let trace = run(&config).unwrap();
        // rebuild the learner sequence and check the post-update width at
        // every visited point
        let mut model = config.problem.model().clone();
        for t in 0..trace.steps.len() {
            let s = &trace.steps[t];
            let pre_width = model
                .residual()
                .width(&model.feature_of(&s.x, &s.u))
                .unwrap();
            assert_eq!(pre_width, s.h_pre);
            let next = if t + 1 < trace.steps.len() {
                trace.steps[t + 1].x.clone()
            } else {
                trace.final_state.clone()
            };
            model = model.observe_transition(&s.x, &s.u, &next).unwrap();
            let post_width = model
                .residual()
                .width(&model.feature_of(&s.x, &s.u))
                .unwrap();
            assert_eq!(post_width, 0.0);
        }
    }

    #[test]
    fn warm_start_dominance_recorded_at_every_step() {
        let trace = run(&bench_config([3.0, 0.0], 4, true)).unwrap();
        assert!(trace.steps[0].warm_cost.is_none());
        for s in &trace.steps[1..] {
            let wc = s.warm_cost.expect("warm cost recorded after step 0");
            assert!(s.v_star <= wc);
        }
    }

    #[test]
    fn each_update_moves_the_prediction_at_most_by_the_visited_width() {
        let config = bench_config([3.0, 0.0], 5, true);
        let trace = run(&config).unwrap();
        // fixed probe grid over the quadrature box in feature space
        let (lo, hi) = config.c_box[0];
        let probe: Vec<Vec<f64>> = (0..100)
            .map(|k| vec![lo + (hi - lo) * k as f64 / 99.0])
            .collect();
        let mut model = config.problem.model().clone();
        for t in 0..trace.steps.len() {
            let s = &trace.steps[t];
            let next = if t + 1 < trace.steps.len() {
                trace.steps[t + 1].x.clone()
            } else {
                trace.final_state.clone()
            };
            let updated = model.observe_transition(&s.x, &s.u, &next).unwrap();
            for z in &probe {
                let dev =
                    crate::kinky::model_update_deviation(model.residual(), updated.residual(), z)
                        .unwrap();
                assert!(
                    dev <= s.h_pre + 1e-12,
                    "step {t}: prediction moved by {dev}, width at visited point was {}",
                    s.h_pre
                );
            }
            model = updated;
        }
    }

    #[test]
    fn without_learning_the_uncertainty_mass_is_constant() {
        let trace = run(&bench_config([3.0, 0.0], 3, false)).unwrap();
        let c0 = trace.steps[0].c_t;
        assert!(trace.steps.iter().all(|s| s.c_t == c0));
    }

    #[test]
    fn csv_shape_and_thinning() {
        let mut config = bench_config([3.0, 0.0], 4, true);
        let trace = run(&config).unwrap();
        let csv = trace.to_csv();
        let lines: Vec<&str> = csv.trim_end().lines().collect();
        assert_eq!(
            lines[0],
            "t,x1,x2,u1,stage_cost,V_star,h_t,C_t,iters,converged,iss_residual"
        );
        assert_eq!(lines.len(), 1 + 4 + 1); // header + steps + terminal
        assert!(lines[1].starts_with("0,3."));

        config.record_every = 2;
        let thin = run(&config).unwrap().to_csv();
        let thin_lines: Vec<&str> = thin.trim_end().lines().collect();
        assert_eq!(thin_lines.len(), 1 + 2 + 1); // t = 0, 2, terminal
    }

    #[test]
    fn convergence_report_requires_enough_steps() {
        let trace = run(&bench_config([0.0, 0.0], 3, true)).unwrap();
        assert!(convergence_report(&trace).is_err());
    }

    #[test]
    fn spearman_handles_ties_and_constants() {
        assert_eq!(spearman_rank(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), None);
        let r = spearman_rank(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
        let r = spearman_rank(&[1.0, 2.0, 3.0], &[30.0, 20.0, 10.0]).unwrap();
        assert!((r + 1.0).abs() < 1e-12);
    }

    #[test]
    fn config_validation_catches_mismatches() {
        let mut config = bench_config([0.0, 0.0], 3, true);
        config.x0 = vec![0.0];
        assert!(run(&config).is_err());

        let mut config = bench_config([0.0, 0.0], 3, true);
        config.c_box = vec![(0.0, 1.0), (0.0, 1.0)];
        assert!(run(&config).is_err());

        let mut config = bench_config([0.0, 0.0], 3, true);
        config.steps = 0;
        assert!(run(&config).is_err());
    }
}
