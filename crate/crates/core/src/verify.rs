//! Randomized verification suites.
//!
//! Instances are generated from a ground truth that is itself a min-of-cones
//! surface over random anchor points, so its Hölder constant is known by
//! construction and every envelope guarantee must hold exactly. The solver
//! suite cross-checks the shooting optimizer against an exhaustive
//! multi-level grid search on small linear-plant instances.

use std::sync::Arc;

use crate::dynamics::{CompositeModel, FeatureMap, LinearPlant};
use crate::error::Result;
use crate::kinky::{model_update_deviation, HolderSpec, KinkyModel, Norm, Observation};
use crate::linalg;
use crate::ocp::{InputBox, OcpProblem, SolverSettings, StageCost};

/// SplitMix64: tiny, portable, deterministic. The verification suites must
/// reproduce bit-for-bit across runs and platforms, which rules out RNGs with
/// unstable stream guarantees.
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }
}

/// A randomized regression problem with a known ground truth.
pub struct EnvelopeInstance {
    pub model: KinkyModel,
    anchors: Vec<(Vec<f64>, Vec<f64>)>,
    q_true: f64,
}

impl EnvelopeInstance {
    /// Ground truth: componentwise min over anchors of upward cones with slope
    /// `q_true`, evaluated in the model's own norm and exponent.
    pub fn truth(&self, z: &[f64]) -> Vec<f64> {
        let spec = self.model.spec();
        let d_out = self.model.d_out();
        let mut out = vec![f64::INFINITY; d_out];
        for (az, ay) in &self.anchors {
            let cone = self.q_true * scaled_dist(spec, z, az);
            for j in 0..d_out {
                out[j] = out[j].min(ay[j] + cone);
            }
        }
        out
    }

    pub fn sample_input(&self, rng: &mut SplitMix64) -> Vec<f64> {
        (0..self.model.d_in())
            .map(|_| rng.range(-3.0, 3.0))
            .collect()
    }
}

fn scaled_dist(spec: &HolderSpec, a: &[f64], b: &[f64]) -> f64 {
    let d = spec.norm().distance(a, b);
    if spec.lambda() == 1.0 {
        d
    } else {
        d.powf(spec.lambda())
    }
}

/// Draws one instance: dimensions up to 3 in, 2 out; 1 to 50 data points;
/// exponent 0.5 or 1; the model's `q` strictly dominates the truth's.
pub fn generate_instance(rng: &mut SplitMix64) -> EnvelopeInstance {
    let d_in = 1 + rng.below(3);
    let d_out = 1 + rng.below(2);
    let lambda = if rng.below(2) == 0 { 0.5 } else { 1.0 };
    let norm = if rng.below(2) == 0 {
        Norm::Euclidean
    } else {
        Norm::Chebyshev
    };
    let q_true = rng.range(0.3, 2.0);
    let q = q_true * rng.range(1.2, 2.0);
    let spec = HolderSpec::new(q, lambda, norm).expect("generated parameters are valid");

    let n_anchors = 3 + rng.below(6);
    let anchors: Vec<(Vec<f64>, Vec<f64>)> = (0..n_anchors)
        .map(|_| {
            (
                (0..d_in).map(|_| rng.range(-3.0, 3.0)).collect(),
                (0..d_out).map(|_| rng.range(-2.0, 2.0)).collect(),
            )
        })
        .collect();

    let shell = EnvelopeInstance {
        model: KinkyModel::seeded_origin(spec, d_in, d_out).expect("seed model"),
        anchors,
        q_true,
    };

    let n_data = 1 + rng.below(50);
    let data: Vec<Observation> = (0..n_data)
        .map(|_| {
            let z = shell.sample_input(rng);
            let y = shell.truth(&z);
            Observation::new(z, y).expect("finite sample")
        })
        .collect();
    let model = KinkyModel::new(spec, d_in, d_out, data)
        .expect("samples of a dominated Hölder function are consistent");
    EnvelopeInstance { model, ..shell }
}

/// First failing check of a suite, with enough context to reproduce it.
#[derive(Debug, Clone)]
pub struct Counterexample {
    pub property: String,
    pub case_index: usize,
    pub detail: String,
    pub dataset_json: String,
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub cases: usize,
    /// (property name, number of cases that passed it)
    pub passes: Vec<(String, usize)>,
    pub failure: Option<Counterexample>,
}

impl SuiteReport {
    pub fn ok(&self) -> bool {
        self.failure.is_none()
    }
}

pub const ENVELOPE_PROPERTIES: [&str; 6] = [
    "containment",
    "interpolation",
    "monotone_refinement",
    "symmetry",
    "predict_holder",
    "lemma2_update_bound",
];

/// Every case draws from its own stream, so results do not depend on how the
/// cases are scheduled across threads.
fn case_rng(seed: u64, salt: u64, case: usize) -> SplitMix64 {
    let mut mixer = SplitMix64::new(seed ^ salt);
    let base = mixer.next_u64();
    SplitMix64::new(base ^ (case as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Runs case closures over a worker pool and returns results in case order.
fn run_cases<T: Send>(cases: usize, threads: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    if threads <= 1 || cases <= 1 {
        return (0..cases).map(f).collect();
    }
    let workers = threads.min(cases);
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::scope(|scope| {
        for w in 0..workers {
            let tx = tx.clone();
            let f = &f;
            scope.spawn(move || {
                let mut case = w;
                while case < cases {
                    tx.send((case, f(case)))
                        .expect("collector outlives workers");
                    case += workers;
                }
            });
        }
    });
    drop(tx);
    let mut tagged: Vec<(usize, T)> = rx.iter().collect();
    tagged.sort_by_key(|(i, _)| *i);
    tagged.into_iter().map(|(_, r)| r).collect()
}

/// Runs the envelope property suite on `cases` generated instances.
///
/// `slack` is the absolute tolerance granted to the inequality checks
/// (the update bound always uses 1e-12, matching its sharper contract).
/// The report is identical for any `threads` value.
pub fn envelope_suite(seed: u64, cases: usize, slack: f64, threads: usize) -> SuiteReport {
    let results = run_cases(cases, threads, |case| {
        let mut rng = case_rng(seed, 0, case);
        let instance = generate_instance(&mut rng);
        check_case(case, &instance, &mut rng, slack)
    });

    let mut counts = [0usize; 6];
    let mut failure = None;
    for result in results {
        match result {
            Ok(passed) => {
                for (i, p) in passed.iter().enumerate() {
                    if *p {
                        counts[i] += 1;
                    }
                }
            }
            Err(cex) => {
                failure = Some(cex);
                break;
            }
        }
    }

    SuiteReport {
        cases,
        passes: ENVELOPE_PROPERTIES
            .iter()
            .zip(counts)
            .map(|(name, c)| (name.to_string(), c))
            .collect(),
        failure,
    }
}

fn check_case(
    case: usize,
    instance: &EnvelopeInstance,
    rng: &mut SplitMix64,
    slack: f64,
) -> std::result::Result<[bool; 6], Counterexample> {
    let model = &instance.model;
    let fail = |property: &str, detail: String| Counterexample {
        property: property.to_string(),
        case_index: case,
        detail,
        dataset_json: model.to_json(),
    };
    let run = |r: Result<Vec<f64>>| r.expect("generated instances stay consistent");

    // containment of the ground truth on a random grid
    for _ in 0..1000 {
        let z = instance.sample_input(rng);
        let truth = instance.truth(&z);
        let upper = run(model.envelope_max(&z));
        let lower = run(model.envelope_min(&z));
        for j in 0..model.d_out() {
            if truth[j] > upper[j] + slack || truth[j] < lower[j] - slack {
                return Err(fail(
                    "containment",
                    format!(
                        "truth {} escapes [{}, {}] in component {j} at {z:?}",
                        truth[j], lower[j], upper[j]
                    ),
                ));
            }
        }
    }

    // exact interpolation at stored data
    for obs in model.data().to_vec() {
        let upper = run(model.envelope_max(obs.z()));
        let lower = run(model.envelope_min(obs.z()));
        let mid = run(model.predict(obs.z()));
        for j in 0..model.d_out() {
            let y = obs.y()[j];
            if (upper[j] - y).abs() > slack
                || (lower[j] - y).abs() > slack
                || (mid[j] - y).abs() > slack
            {
                return Err(fail(
                    "interpolation",
                    format!(
                        "envelopes ({}, {}) and prediction {} miss the stored value {y} at {:?}",
                        lower[j],
                        upper[j],
                        mid[j],
                        obs.z()
                    ),
                ));
            }
        }
    }

    // single-point update: refinement, and the update bound
    let fresh = instance.sample_input(rng);
    let fresh_obs = Observation::new(fresh.clone(), instance.truth(&fresh)).expect("finite");
    let width_at_fresh = model.width(&fresh).expect("consistent");
    let updated = model
        .observe(fresh_obs)
        .expect("samples of the truth stay consistent");

    let probe: Vec<Vec<f64>> = (0..200).map(|_| instance.sample_input(rng)).collect();
    for z in &probe {
        let (u0, l0) = model.envelopes(z).expect("consistent");
        let (u1, l1) = updated.envelopes(z).expect("consistent");
        for j in 0..model.d_out() {
            if u1[j] > u0[j] + slack || l1[j] < l0[j] - slack {
                return Err(fail(
                    "monotone_refinement",
                    format!("envelope widened at {z:?} component {j}"),
                ));
            }
        }
        let dev = model_update_deviation(model, &updated, z).expect("consistent");
        if dev > width_at_fresh + 1e-12 {
            return Err(fail(
                "lemma2_update_bound",
                format!(
                    "prediction moved by {dev} at {z:?}, but the old width at the new point was {width_at_fresh}"
                ),
            ));
        }
    }

    // interval symmetry, bitwise
    for _ in 0..50 {
        let z = instance.sample_input(rng);
        let iv = model.uncertainty_interval(&z).expect("consistent");
        for j in 0..model.d_out() {
            if iv.lo[j] != -iv.hi[j] || iv.lo[j] > iv.hi[j] {
                return Err(fail(
                    "symmetry",
                    format!(
                        "interval [{}, {}] not symmetric at {z:?}",
                        iv.lo[j], iv.hi[j]
                    ),
                ));
            }
        }
    }

    // the prediction inherits the Hölder bound
    let spec = model.spec();
    for _ in 0..100 {
        let z1 = instance.sample_input(rng);
        let z2 = instance.sample_input(rng);
        let p1 = run(model.predict(&z1));
        let p2 = run(model.predict(&z2));
        let gap = linalg::inf_norm(&linalg::sub(&p1, &p2));
        let allowed = spec.q() * scaled_dist(spec, &z1, &z2);
        if gap > allowed + slack {
            return Err(fail(
                "predict_holder",
                format!("prediction gap {gap} exceeds q*dist^lambda = {allowed}"),
            ));
        }
    }

    Ok([true; 6])
}

#[derive(Debug, Clone)]
pub struct SolverSuiteReport {
    pub cases: usize,
    pub passes: usize,
    pub max_gap: f64,
    pub failure: Option<Counterexample>,
}

impl SolverSuiteReport {
    pub fn ok(&self) -> bool {
        self.failure.is_none()
    }
}

/// Cross-checks the shooting solver against exhaustive grid refinement on
/// random linear-plant instances (state dimension at most 2, one input,
/// horizon at most 3, so the search space stays at most 3-dimensional).
/// The report is identical for any `threads` value.
pub fn solver_suite(
    seed: u64,
    cases: usize,
    tol: f64,
    threads: usize,
) -> Result<SolverSuiteReport> {
    let results = run_cases(cases, threads, |case| -> Result<(f64, Vec<f64>, f64)> {
        let mut rng = case_rng(seed, 0x51f8_62a1_9b3d_7c4e, case);
        let (problem, x0) = random_linear_problem(&mut rng)?;
        let sol = problem.solve(&x0, None)?;
        let oracle = grid_search_value(&problem, &x0, 19, 10)?;
        Ok((sol.value, x0, oracle))
    });

    let mut max_gap = 0.0f64;
    let mut passes = 0;
    let mut failure = None;
    for (case, result) in results.into_iter().enumerate() {
        let (value, x0, oracle) = result?;
        let gap = (value - oracle).abs();
        max_gap = max_gap.max(gap);
        if gap <= tol {
            passes += 1;
        } else {
            failure = Some(Counterexample {
                property: "solver_oracle_equivalence".into(),
                case_index: case,
                detail: format!(
                    "solver value {value} vs grid-search value {oracle} (gap {gap}) at x0 = {x0:?}"
                ),
                dataset_json: String::new(),
            });
            break;
        }
    }

    Ok(SolverSuiteReport {
        cases,
        passes,
        max_gap,
        failure,
    })
}

/// Random linear plant wrapped in an untrained composite model, so the
/// shooting cost is a convex quadratic with a unique minimizer.
pub fn random_linear_problem(rng: &mut SplitMix64) -> Result<(OcpProblem, Vec<f64>)> {
    let n = 1 + rng.below(2);
    let m = 1;
    let horizon = 1 + rng.below(3);
    let a: Vec<f64> = (0..n * n).map(|_| rng.range(-1.0, 1.0)).collect();
    let b: Vec<f64> = (0..n * m).map(|_| rng.range(-1.0, 1.0)).collect();
    let plant = LinearPlant::new(n, m, a, b)?;

    let spec = HolderSpec::new(1.0, 1.0, Norm::Euclidean)?;
    let learner = KinkyModel::seeded_origin(spec, n + m, n)?;
    let model = CompositeModel::new(Arc::new(plant), FeatureMap::Full, (0..n).collect(), learner)?;

    let mut q = vec![0.0; n * n];
    for i in 0..n {
        q[i * n + i] = rng.range(0.5, 2.0);
    }
    let r = vec![rng.range(0.5, 2.0)];
    let cost = StageCost::new(n, m, q, r)?;
    let bounds = InputBox::new(vec![-rng.range(0.5, 2.5)], vec![rng.range(0.5, 2.5)])?;
    let problem = OcpProblem::new(horizon, cost, model, bounds, SolverSettings::default())?;
    let x0: Vec<f64> = (0..n).map(|_| rng.range(-2.0, 2.0)).collect();
    Ok((problem, x0))
}

/// Exhaustive multi-level grid search over the flattened input sequence.
/// Each level scans a shrinking window centered on the best point found so
/// far (clamped to the input box) and the running best value is global over
/// all evaluations, so the result can only improve per level.
pub fn grid_search_value(
    problem: &OcpProblem,
    x0: &[f64],
    points_per_axis: usize,
    levels: usize,
) -> Result<f64> {
    let m = problem.input_box().m();
    let dim = problem.horizon() * m;
    let lo: Vec<f64> = (0..dim).map(|i| problem.input_box().lo()[i % m]).collect();
    let hi: Vec<f64> = (0..dim).map(|i| problem.input_box().hi()[i % m]).collect();

    let mut center: Vec<f64> = lo.iter().zip(&hi).map(|(l, h)| (l + h) / 2.0).collect();
    let mut half: Vec<f64> = lo.iter().zip(&hi).map(|(l, h)| (h - l) / 2.0).collect();
    let mut best_value = f64::INFINITY;
    let mut best_point = center.clone();
    let p = points_per_axis;

    let mut candidate = vec![0.0; dim];
    for _ in 0..levels {
        let mut index = vec![0usize; dim];
        loop {
            for i in 0..dim {
                let frac = index[i] as f64 / (p - 1) as f64;
                let v = center[i] - half[i] + 2.0 * half[i] * frac;
                candidate[i] = v.clamp(lo[i], hi[i]);
            }
            let inputs: Vec<Vec<f64>> = candidate.chunks_exact(m).map(|c| c.to_vec()).collect();
            let (_, value) = problem.rollout(x0, &inputs)?;
            if value < best_value {
                best_value = value;
                best_point.copy_from_slice(&candidate);
            }
            let mut axis = 0;
            loop {
                if axis == dim {
                    // window exhausted: recenter and shrink
                    center.copy_from_slice(&best_point);
                    for h in half.iter_mut() {
                        *h *= 7.0 / (p - 1) as f64; // keep ±3.5 grid steps
                    }
                    break;
                }
                index[axis] += 1;
                if index[axis] < p {
                    break;
                }
                index[axis] = 0;
                axis += 1;
            }
            if index.iter().all(|&i| i == 0) {
                break;
            }
        }
    }
    Ok(best_value)
}
