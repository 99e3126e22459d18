//! Finite-horizon optimal control over the nominal model, with box-constrained
//! inputs and a terminal cost fixed to zero.
//!
//! The problem is solved by single shooting over the input sequence: projected
//! gradient descent with central finite-difference gradients and an Armijo
//! backtracking line search. The nominal model is piecewise smooth (envelope
//! kinks), so a finite-difference gradient can occasionally mislead; the line
//! search's cost comparison is authoritative, and a useless gradient can only
//! stall the iteration, never accept a worse point.

use crate::dynamics::CompositeModel;
use crate::error::{Error, Result};
use crate::linalg;

/// Quadratic stage cost `x' Q x + u' R u`, with both matrices symmetric
/// positive definite.
#[derive(Debug, Clone, PartialEq)]
pub struct StageCost {
    n: usize,
    m: usize,
    q: Vec<f64>,
    r: Vec<f64>,
}

impl StageCost {
    pub fn new(n: usize, m: usize, q: Vec<f64>, r: Vec<f64>) -> Result<Self> {
        check_spd("Q", &q, n)?;
        check_spd("R", &r, m)?;
        Ok(Self { n, m, q, r })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.n, self.m)
    }

    pub fn eval(&self, x: &[f64], u: &[f64]) -> f64 {
        linalg::quad_form(&self.q, x) + linalg::quad_form(&self.r, u)
    }
}

fn check_spd(name: &str, mat: &[f64], dim: usize) -> Result<()> {
    if dim == 0 || mat.len() != dim * dim {
        return Err(Error::Config(format!(
            "{name} must be a {dim}x{dim} matrix, got {} entries",
            mat.len()
        )));
    }
    if !linalg::all_finite(mat) {
        return Err(Error::NonFinite {
            what: "cost matrix",
            step: None,
        });
    }
    for i in 0..dim {
        for j in 0..i {
            if (mat[i * dim + j] - mat[j * dim + i]).abs() > 1e-12 {
                return Err(Error::Config(format!("{name} is not symmetric")));
            }
        }
    }
    for k in 1..=dim {
        if linalg::leading_minor_det(mat, dim, k) <= 0.0 {
            return Err(Error::Config(format!("{name} is not positive definite")));
        }
    }
    Ok(())
}

/// Componentwise input bounds `[lo, hi]` with the origin feasible.
#[derive(Debug, Clone, PartialEq)]
pub struct InputBox {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl InputBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.is_empty() || lo.len() != hi.len() {
            return Err(Error::Config(
                "input bounds must be non-empty and equal length".into(),
            ));
        }
        if !linalg::all_finite(&lo) || !linalg::all_finite(&hi) {
            return Err(Error::NonFinite {
                what: "input bounds",
                step: None,
            });
        }
        for (l, h) in lo.iter().zip(&hi) {
            if l >= h {
                return Err(Error::Config(format!("input bound [{l}, {h}] is empty")));
            }
            if *l > 0.0 || *h < 0.0 {
                return Err(Error::Config(
                    "the zero input must be feasible (0 inside the input box)".into(),
                ));
            }
        }
        Ok(Self { lo, hi })
    }

    pub fn m(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    /// Componentwise clamp onto the box.
    pub fn project(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .enumerate()
            .map(|(i, v)| v.clamp(self.lo[i % self.lo.len()], self.hi[i % self.hi.len()]))
            .collect()
    }

    fn project_flat_in_place(&self, flat: &mut [f64]) {
        let m = self.lo.len();
        for (i, v) in flat.iter_mut().enumerate() {
            *v = v.clamp(self.lo[i % m], self.hi[i % m]);
        }
    }
}

/// Iteration caps and tolerances for the shooting solver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    pub k_max: usize,
    pub tol_grad: f64,
    pub tol_cost: f64,
    pub fd_step: f64,
    pub armijo_shrink: f64,
    pub armijo_c: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            k_max: 500,
            tol_grad: 1e-8,
            tol_cost: 1e-12,
            fd_step: 1e-6,
            armijo_shrink: 0.5,
            armijo_c: 1e-4,
        }
    }
}

impl SolverSettings {
    fn validate(&self) -> Result<()> {
        if self.k_max == 0 {
            return Err(Error::Config("k_max must be at least 1".into()));
        }
        let nonneg = |x: f64| x.is_finite() && x >= 0.0;
        if !self.fd_step.is_finite()
            || self.fd_step <= 0.0
            || !nonneg(self.tol_grad)
            || !nonneg(self.tol_cost)
        {
            return Err(Error::Config(
                "solver tolerances must be nonnegative, fd_step positive".into(),
            ));
        }
        let in_unit = |x: f64| x > 0.0 && x < 1.0;
        if !in_unit(self.armijo_shrink) || !in_unit(self.armijo_c) {
            return Err(Error::Config("Armijo parameters must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Finite-horizon problem: minimize the summed stage cost over `horizon` steps
/// of the nominal model, subject to the input box.
#[derive(Clone)]
pub struct OcpProblem {
    horizon: usize,
    cost: StageCost,
    model: CompositeModel,
    input_box: InputBox,
    settings: SolverSettings,
}

impl OcpProblem {
    pub fn new(
        horizon: usize,
        cost: StageCost,
        model: CompositeModel,
        input_box: InputBox,
        settings: SolverSettings,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        let (n, m) = model.dims();
        if cost.dims() != (n, m) {
            return Err(Error::Config(format!(
                "cost dimensions {:?} do not match model dimensions {:?}",
                cost.dims(),
                (n, m)
            )));
        }
        if input_box.m() != m {
            return Err(Error::Dimension {
                what: "input box",
                expected: m,
                got: input_box.m(),
            });
        }
        settings.validate()?;
        Ok(Self {
            horizon,
            cost,
            model,
            input_box,
            settings,
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn cost(&self) -> &StageCost {
        &self.cost
    }

    pub fn model(&self) -> &CompositeModel {
        &self.model
    }

    pub fn input_box(&self) -> &InputBox {
        &self.input_box
    }

    pub fn settings(&self) -> &SolverSettings {
        &self.settings
    }

    /// Same problem against an updated nominal model.
    pub fn with_model(&self, model: CompositeModel) -> Result<OcpProblem> {
        Self::new(
            self.horizon,
            self.cost.clone(),
            model,
            self.input_box.clone(),
            self.settings,
        )
    }

    fn check_x0(&self, x0: &[f64]) -> Result<()> {
        let (n, _) = self.model.dims();
        if x0.len() != n {
            return Err(Error::Dimension {
                what: "initial state",
                expected: n,
                got: x0.len(),
            });
        }
        if !linalg::all_finite(x0) {
            return Err(Error::NonFinite {
                what: "initial state",
                step: None,
            });
        }
        Ok(())
    }

    /// Propagates `x0` through the nominal model under the given input
    /// sequence and accumulates the stage cost.
    pub fn rollout(&self, x0: &[f64], inputs: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, f64)> {
        self.check_x0(x0)?;
        let (_, m) = self.model.dims();
        if inputs.len() != self.horizon || inputs.iter().any(|u| u.len() != m) {
            return Err(Error::Dimension {
                what: "input sequence",
                expected: self.horizon * m,
                got: inputs.iter().map(Vec::len).sum(),
            });
        }
        let flat: Vec<f64> = inputs.iter().flatten().copied().collect();
        self.rollout_flat(x0, &flat)
    }

    fn rollout_flat(&self, x0: &[f64], flat: &[f64]) -> Result<(Vec<Vec<f64>>, f64)> {
        let (_, m) = self.model.dims();
        let mut states = Vec::with_capacity(self.horizon + 1);
        states.push(x0.to_vec());
        let mut value = 0.0;
        for (k, u) in flat.chunks_exact(m).enumerate() {
            let x = states.last().expect("states never empty");
            value += self.cost.eval(x, u);
            let next = self.model.nominal_step(x, u).map_err(|e| match e {
                Error::NonFinite { what, .. } => Error::NonFinite {
                    what,
                    step: Some(k),
                },
                other => other,
            })?;
            states.push(next);
        }
        if !value.is_finite() {
            return Err(Error::NonFinite {
                what: "rollout cost",
                step: None,
            });
        }
        Ok((states, value))
    }

    fn flat_cost(&self, x0: &[f64], flat: &[f64]) -> Result<f64> {
        self.rollout_flat(x0, flat).map(|(_, v)| v)
    }

    /// Minimizes the rollout cost over the input sequence.
    ///
    /// The descent starts from the cheapest of the candidate sequences — the
    /// warm start, if given, then the all-zero sequence — so the returned value
    /// never exceeds the cost of any candidate. Non-convergence within the
    /// iteration cap returns the best iterate with `converged = false`.
    pub fn solve(&self, x0: &[f64], warm_start: Option<&[Vec<f64>]>) -> Result<OcpSolution> {
        self.check_x0(x0)?;
        let (_, m) = self.model.dims();
        let dim = self.horizon * m;
        let s = self.settings;

        // Candidate sequences, warm start first so ties prefer it.
        let mut candidates: Vec<Vec<f64>> = Vec::new();
        if let Some(w) = warm_start {
            if w.len() != self.horizon || w.iter().any(|u| u.len() != m) {
                return Err(Error::Dimension {
                    what: "warm start",
                    expected: dim,
                    got: w.iter().map(Vec::len).sum(),
                });
            }
            let mut flat: Vec<f64> = w.iter().flatten().copied().collect();
            self.input_box.project_flat_in_place(&mut flat);
            candidates.push(flat);
        }
        candidates.push(vec![0.0; dim]);

        let mut current = candidates[0].clone();
        let mut cost = self.flat_cost(x0, &current)?;
        for cand in &candidates[1..] {
            let c = self.flat_cost(x0, cand)?;
            if c < cost {
                cost = c;
                current = cand.clone();
            }
        }

        let mut grad = vec![0.0; dim];
        let mut iterations = 0;
        let mut converged = false;

        'outer: for _ in 0..s.k_max {
            iterations += 1;

            // Central finite differences of the rollout cost.
            for i in 0..dim {
                let saved = current[i];
                current[i] = saved + s.fd_step;
                let up = self.flat_cost(x0, &current)?;
                current[i] = saved - s.fd_step;
                let down = self.flat_cost(x0, &current)?;
                current[i] = saved;
                grad[i] = (up - down) / (2.0 * s.fd_step);
            }

            // Projected-gradient stationarity measure.
            let mut stationarity = 0.0f64;
            for i in 0..dim {
                let moved = (current[i] - grad[i])
                    .clamp(self.input_box.lo[i % m], self.input_box.hi[i % m]);
                stationarity = stationarity.max((current[i] - moved).abs());
            }
            if stationarity < s.tol_grad {
                converged = true;
                break;
            }

            // Armijo backtracking along the projected gradient direction.
            let mut alpha = 1.0;
            loop {
                let mut trial: Vec<f64> = (0..dim).map(|i| current[i] - alpha * grad[i]).collect();
                self.input_box.project_flat_in_place(&mut trial);
                let trial_cost = self.flat_cost(x0, &trial)?;
                let predicted: f64 = (0..dim).map(|i| grad[i] * (current[i] - trial[i])).sum();
                if trial_cost <= cost - s.armijo_c * predicted {
                    let decrease = cost - trial_cost;
                    current = trial;
                    cost = trial_cost;
                    if decrease < s.tol_cost {
                        converged = true;
                        break 'outer;
                    }
                    break;
                }
                alpha *= s.armijo_shrink;
                if alpha < 1e-20 {
                    // The finite-difference gradient produced no usable
                    // descent direction; keep the best iterate and stall.
                    break 'outer;
                }
            }
        }

        let (states, value) = self.rollout_flat(x0, &current)?;
        let inputs: Vec<Vec<f64>> = current.chunks_exact(m).map(|c| c.to_vec()).collect();
        Ok(OcpSolution {
            inputs,
            states,
            value,
            iterations,
            converged,
        })
    }
}

/// Optimizer output: the input sequence, the predicted nominal rollout, and
/// the attained cost.
#[derive(Debug, Clone, PartialEq)]
pub struct OcpSolution {
    pub inputs: Vec<Vec<f64>>,
    pub states: Vec<Vec<f64>>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl OcpSolution {
    pub fn first_input(&self) -> &[f64] {
        &self.inputs[0]
    }
}

/// Receding-horizon warm start: drop the applied first input, append a zero
/// input (always feasible, since the box contains the origin), and project.
pub fn shift_warm_start(previous: &OcpSolution, input_box: &InputBox) -> Vec<Vec<f64>> {
    let m = input_box.m();
    let mut shifted: Vec<Vec<f64>> = previous.inputs[1..].to_vec();
    shifted.push(vec![0.0; m]);
    for row in &mut shifted {
        let projected = input_box.project(row);
        *row = projected;
    }
    shifted
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{CompositeModel, ExamplePlant, FeatureMap, LinearPlant, SystemOracle};
    use crate::kinky::{HolderSpec, KinkyModel, Norm};
    use std::sync::Arc;

    /// Scalar integrator x' = x + u with an untrained learner: the nominal
    /// model is exactly the linear plant.
    fn scalar_problem(n_horizon: usize, box_half: f64) -> OcpProblem {
        let plant = LinearPlant::new(1, 1, vec![1.0], vec![1.0]).unwrap();
        let spec = HolderSpec::new(1.0, 1.0, Norm::Euclidean).unwrap();
        let learner = KinkyModel::seeded_origin(spec, 2, 1).unwrap();
        let model =
            CompositeModel::new(Arc::new(plant), FeatureMap::Full, vec![0], learner).unwrap();
        let cost = StageCost::new(1, 1, vec![1.0], vec![1.0]).unwrap();
        let bounds = InputBox::new(vec![-box_half], vec![box_half]).unwrap();
        OcpProblem::new(n_horizon, cost, model, bounds, SolverSettings::default()).unwrap()
    }

    fn bench_problem(n_horizon: usize) -> OcpProblem {
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
        OcpProblem::new(n_horizon, cost, model, bounds, SolverSettings::default()).unwrap()
    }

    #[test]
    fn stage_cost_validation() {
        assert!(StageCost::new(2, 1, vec![1.0, 0.5, 0.4, 1.0], vec![1.0]).is_err()); // asymmetric
        assert!(StageCost::new(2, 1, vec![0.0, 0.0, 0.0, 1.0], vec![1.0]).is_err()); // singular minor
        assert!(StageCost::new(1, 1, vec![-1.0], vec![1.0]).is_err()); // negative definite
        let ok = StageCost::new(2, 1, vec![2.0, 0.1, 0.1, 1.0], vec![0.5]).unwrap();
        assert!((ok.eval(&[1.0, 1.0], &[2.0]) - (2.0 + 0.2 + 1.0 + 2.0)).abs() < 1e-12);
    }

    #[test]
    fn input_box_validation_and_projection() {
        assert!(InputBox::new(vec![2.0], vec![-2.0]).is_err());
        assert!(InputBox::new(vec![1.0], vec![2.0]).is_err()); // zero infeasible
        let b = InputBox::new(vec![-2.0], vec![2.0]).unwrap();
        assert_eq!(b.project(&[3.0]), vec![2.0]);
        assert_eq!(b.project(&[-5.0]), vec![-2.0]);
        assert_eq!(b.project(&[0.7]), vec![0.7]);
    }

    #[test]
    fn rollout_hand_example() {
        let p = scalar_problem(2, 10.0);
        let (states, value) = p.rollout(&[1.0], &[vec![-0.5], vec![0.0]]).unwrap();
        assert_eq!(states, vec![vec![1.0], vec![0.5], vec![0.5]]);
        assert_eq!(value, 1.5);
    }

    #[test]
    fn rollout_at_equilibrium_is_free() {
        let p = scalar_problem(4, 10.0);
        let (states, value) = p.rollout(&[0.0], &vec![vec![0.0]; 4]).unwrap();
        assert!(states.iter().all(|x| x == &vec![0.0]));
        assert_eq!(value, 0.0);
    }

    #[test]
    fn rollout_follows_known_part_with_untrained_learner() {
        let p = bench_problem(4);
        let inputs = vec![vec![-2.0]; 4];
        let (states, _) = p.rollout(&[3.0, 0.0], &inputs).unwrap();
        // manual propagation of the known part
        let known = ExamplePlant::default().known_part();
        let mut x = vec![3.0, 0.0];
        for k in 0..4 {
            x = known.step_raw(&x, &[-2.0]);
            assert_eq!(states[k + 1], x);
        }
    }

    #[test]
    fn solve_at_origin_returns_zero() {
        let p = bench_problem(10);
        let sol = p.solve(&[0.0, 0.0], None).unwrap();
        assert_eq!(sol.value, 0.0);
        assert!(sol.converged);
        assert!(sol.inputs.iter().all(|u| u[0].abs() <= 1e-8));
    }

    #[test]
    fn solve_matches_closed_form_scalar_minimum() {
        let p = scalar_problem(2, 10.0);
        let sol = p.solve(&[1.0], None).unwrap();
        assert!((sol.value - 1.5).abs() < 1e-6, "value {}", sol.value);
        assert!(
            (sol.inputs[0][0] + 0.5).abs() < 1e-4,
            "u0 {}",
            sol.inputs[0][0]
        );
        assert!(sol.inputs[1][0].abs() < 1e-4);
        assert!(sol.converged);
    }

    #[test]
    fn first_input_saturates_from_far_initial_state() {
        let p = bench_problem(10);
        let sol = p.solve(&[3.0, 0.0], None).unwrap();
        assert_eq!(sol.first_input(), &[-2.0]);
    }

    #[test]
    fn solution_is_feasible_and_value_consistent() {
        let p = bench_problem(8);
        let sol = p.solve(&[2.0, -1.0], None).unwrap();
        for u in &sol.inputs {
            assert!(u[0] >= -2.0 && u[0] <= 2.0);
        }
        let (states, value) = p.rollout(&sol.states[0], &sol.inputs).unwrap();
        assert!((value - sol.value).abs() <= 1e-10);
        assert_eq!(states, sol.states);

        // never worse than the zero-input candidate
        let (_, zero_cost) = p.rollout(&[2.0, -1.0], &vec![vec![0.0]; 8]).unwrap();
        assert!(sol.value <= zero_cost);
    }

    #[test]
    fn warm_start_candidate_bounds_the_value() {
        let p = bench_problem(6);
        let sol = p.solve(&[1.0, 0.5], None).unwrap();
        let warm = shift_warm_start(&sol, p.input_box());
        let x1 = sol.states[1].clone();
        let (_, warm_cost) = p.rollout(&x1, &warm).unwrap();
        let next = p.solve(&x1, Some(&warm)).unwrap();
        assert!(next.value <= warm_cost + 1e-12);
    }

    #[test]
    fn shift_drops_first_and_appends_zero() {
        let sol = OcpSolution {
            inputs: vec![vec![1.0], vec![-0.5], vec![2.0]],
            states: vec![],
            value: 0.0,
            iterations: 0,
            converged: true,
        };
        let b = InputBox::new(vec![-2.0], vec![2.0]).unwrap();
        assert_eq!(
            shift_warm_start(&sol, &b),
            vec![vec![-0.5], vec![2.0], vec![0.0]]
        );

        let zeros = OcpSolution {
            inputs: vec![vec![0.0]; 3],
            states: vec![],
            value: 0.0,
            iterations: 0,
            converged: true,
        };
        assert_eq!(shift_warm_start(&zeros, &b), vec![vec![0.0]; 3]);
    }

    #[test]
    fn bad_initial_state_is_rejected() {
        let p = bench_problem(3);
        assert!(p.solve(&[1.0], None).is_err());
        assert!(p.solve(&[f64::NAN, 0.0], None).is_err());
    }
}
