//! True-system oracles and the composite nominal model.
//!
//! The controller never sees the true dynamics directly: it works with a known
//! part plus a learned residual over a feature of the state-input pair. The
//! residual learner starts at the origin seed, so an untrained composite model
//! coincides with the known part exactly.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kinky::{KinkyModel, Observation};
use crate::linalg;

/// Discrete-time system `x_next = f(x, u)` with the origin as equilibrium.
pub trait SystemOracle: Send + Sync {
    /// (state dimension, input dimension)
    fn dims(&self) -> (usize, usize);
    fn step_raw(&self, x: &[f64], u: &[f64]) -> Vec<f64>;
}

/// Validated transition: checks dimensions and rejects non-finite output.
pub fn oracle_step(plant: &dyn SystemOracle, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    let (n, m) = plant.dims();
    if x.len() != n {
        return Err(Error::Dimension {
            what: "state",
            expected: n,
            got: x.len(),
        });
    }
    if u.len() != m {
        return Err(Error::Dimension {
            what: "input",
            expected: m,
            got: u.len(),
        });
    }
    let next = plant.step_raw(x, u);
    if !linalg::all_finite(&next) {
        return Err(Error::NonFinite {
            what: "plant transition",
            step: None,
        });
    }
    Ok(next)
}

/// Two-dimensional plant family
///
///   x1' = a11 x1 + a12 x2
///   x2' = (a22_const + a22_x1 * x1) x2 + b2 u + exp_gain * x1 * exp(-exp_rate * x1)
///
/// The default coefficients give the benchmark system used across the tests.
/// `known_part()` drops the exponential term, which is the piece treated as
/// unknown and left to the learner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExamplePlant {
    pub a11: f64,
    pub a12: f64,
    pub a22_const: f64,
    pub a22_x1: f64,
    pub b2: f64,
    pub exp_gain: f64,
    pub exp_rate: f64,
}

impl Default for ExamplePlant {
    fn default() -> Self {
        Self {
            a11: 1.0,
            a12: 0.4,
            a22_const: 0.56,
            a22_x1: 0.1,
            b2: 0.4,
            exp_gain: 0.9,
            exp_rate: 1.0,
        }
    }
}

impl ExamplePlant {
    pub fn known_part(&self) -> ExamplePlant {
        ExamplePlant {
            exp_gain: 0.0,
            ..*self
        }
    }
}

impl SystemOracle for ExamplePlant {
    fn dims(&self) -> (usize, usize) {
        (2, 1)
    }

    fn step_raw(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let g = self.exp_gain * x[0] * (-self.exp_rate * x[0]).exp();
        vec![
            self.a11 * x[0] + self.a12 * x[1],
            (self.a22_const + self.a22_x1 * x[0]) * x[1] + self.b2 * u[0] + g,
        ]
    }
}

/// Linear system `x_next = A x + B u`, row-major matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPlant {
    n: usize,
    m: usize,
    a: Vec<f64>,
    b: Vec<f64>,
}

impl LinearPlant {
    pub fn new(n: usize, m: usize, a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if n == 0 || m == 0 || a.len() != n * n || b.len() != n * m {
            return Err(Error::Config(format!(
                "linear plant needs A {n}x{n} and B {n}x{m}"
            )));
        }
        if !linalg::all_finite(&a) || !linalg::all_finite(&b) {
            return Err(Error::NonFinite {
                what: "linear plant matrices",
                step: None,
            });
        }
        Ok(Self { n, m, a, b })
    }
}

impl SystemOracle for LinearPlant {
    fn dims(&self) -> (usize, usize) {
        (self.n, self.m)
    }

    fn step_raw(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                let ax: f64 = (0..self.n).map(|j| self.a[i * self.n + j] * x[j]).sum();
                let bu: f64 = (0..self.m).map(|j| self.b[i * self.m + j] * u[j]).sum();
                ax + bu
            })
            .collect()
    }
}

/// Dynamics that map everything to the origin. Used as the known part when the
/// full transition map is left to the learner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZeroDynamics {
    pub n: usize,
    pub m: usize,
}

impl SystemOracle for ZeroDynamics {
    fn dims(&self) -> (usize, usize) {
        (self.n, self.m)
    }

    fn step_raw(&self, _x: &[f64], _u: &[f64]) -> Vec<f64> {
        vec![0.0; self.n]
    }
}

/// Which coordinates of `(x, u)` the residual learner sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureMap {
    /// The full stacked vector `(x, u)`.
    Full,
    /// The first state component only.
    X1,
}

impl FeatureMap {
    pub fn dim(&self, n: usize, m: usize) -> usize {
        match self {
            FeatureMap::Full => n + m,
            FeatureMap::X1 => 1,
        }
    }

    pub fn apply(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        match self {
            FeatureMap::Full => x.iter().chain(u).copied().collect(),
            FeatureMap::X1 => vec![x[0]],
        }
    }
}

/// Extracts the residual training target from one true transition: the
/// selected components of `plant_next - known_next`.
pub fn residual_target(plant_next: &[f64], known_next: &[f64], selector: &[usize]) -> Vec<f64> {
    selector
        .iter()
        .map(|&i| plant_next[i] - known_next[i])
        .collect()
}

/// Nominal model: known-part dynamics plus a learned residual embedded into the
/// selected state components. Immutable; swapping in an updated learner
/// produces a new value.
#[derive(Clone)]
pub struct CompositeModel {
    known: Arc<dyn SystemOracle>,
    feature: FeatureMap,
    selector: Vec<usize>,
    residual: KinkyModel,
}

impl CompositeModel {
    pub fn new(
        known: Arc<dyn SystemOracle>,
        feature: FeatureMap,
        selector: Vec<usize>,
        residual: KinkyModel,
    ) -> Result<Self> {
        let (n, m) = known.dims();
        if selector.is_empty() {
            return Err(Error::Config("residual selector must not be empty".into()));
        }
        let mut seen = vec![false; n];
        for &i in &selector {
            if i >= n {
                return Err(Error::Config(format!(
                    "residual selector index {i} out of range for state dimension {n}"
                )));
            }
            if seen[i] {
                return Err(Error::Config(format!("duplicate selector index {i}")));
            }
            seen[i] = true;
        }
        let want_in = feature.dim(n, m);
        if residual.d_in() != want_in {
            return Err(Error::Dimension {
                what: "residual learner input",
                expected: want_in,
                got: residual.d_in(),
            });
        }
        if residual.d_out() != selector.len() {
            return Err(Error::Dimension {
                what: "residual learner output",
                expected: selector.len(),
                got: residual.d_out(),
            });
        }
        Ok(Self {
            known,
            feature,
            selector,
            residual,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.known.dims()
    }

    pub fn known(&self) -> &Arc<dyn SystemOracle> {
        &self.known
    }

    pub fn feature(&self) -> FeatureMap {
        self.feature
    }

    pub fn selector(&self) -> &[usize] {
        &self.selector
    }

    pub fn residual(&self) -> &KinkyModel {
        &self.residual
    }

    pub fn feature_of(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        self.feature.apply(x, u)
    }

    /// Known-part transition plus the learned residual.
    pub fn nominal_step(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let mut next = oracle_step(self.known.as_ref(), x, u)?;
        let z = self.feature_of(x, u);
        let r = self.residual.predict(&z)?;
        for (k, &i) in self.selector.iter().enumerate() {
            next[i] += r[k];
        }
        if !linalg::all_finite(&next) {
            return Err(Error::NonFinite {
                what: "nominal transition",
                step: None,
            });
        }
        Ok(next)
    }

    /// Same model with the learner replaced.
    pub fn with_residual(&self, residual: KinkyModel) -> Result<CompositeModel> {
        Self::new(
            Arc::clone(&self.known),
            self.feature,
            self.selector.clone(),
            residual,
        )
    }

    /// Absorbs one observed true transition: computes the residual target at
    /// `(x, u)` and returns the model with the updated learner.
    pub fn observe_transition(
        &self,
        x: &[f64],
        u: &[f64],
        true_next: &[f64],
    ) -> Result<CompositeModel> {
        let known_next = oracle_step(self.known.as_ref(), x, u)?;
        let target = residual_target(true_next, &known_next, &self.selector);
        let z = self.feature_of(x, u);
        let updated = self.residual.observe(Observation::new(z, target)?)?;
        self.with_residual(updated)
    }
}
