//! Envelope regression for Hölder-continuous functions.
//!
//! Given a bound `‖f(z1) - f(z2)‖ <= q ‖z1 - z2‖^lambda` and exact samples of
//! `f`, every consistent candidate function lies between two computable
//! envelopes: the pointwise min/max over the data of cones with slope `q`.
//! The midpoint of the envelopes serves as the working prediction, and the
//! envelope gap is a hard, shrinking bound on the prediction error.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Absolute slack used when checking data against the declared Hölder bound.
/// Guards against floating-point noise without masking a genuinely wrong `q`.
pub const CONSISTENCY_SLACK: f64 = 1e-9;

/// Norm used inside the cone term `q ‖z - y‖^lambda`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    Euclidean,
    Chebyshev,
}

impl Norm {
    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Norm::Euclidean => a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt(),
            Norm::Chebyshev => a
                .iter()
                .zip(b)
                .fold(0.0, |acc, (x, y)| acc.max((x - y).abs())),
        }
    }
}

/// Hölder class parameters: `‖f(z1) - f(z2)‖ <= q ‖z1 - z2‖^lambda`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HolderSpec {
    q: f64,
    lambda: f64,
    norm: Norm,
}

impl HolderSpec {
    /// Requires `q > 0` and `0 < lambda <= 1`. Exponents above one are
    /// rejected: they only admit constant functions, so the class degenerates.
    pub fn new(q: f64, lambda: f64, norm: Norm) -> Result<Self> {
        if !q.is_finite() || q <= 0.0 {
            return Err(Error::Config(format!("q must be positive, got {q}")));
        }
        if !lambda.is_finite() || lambda <= 0.0 || lambda > 1.0 {
            return Err(Error::Config(format!(
                "lambda must lie in (0, 1], got {lambda}"
            )));
        }
        Ok(Self { q, lambda, norm })
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn norm(&self) -> Norm {
        self.norm
    }

    /// Cone radius `q * dist^lambda`.
    pub fn cone(&self, dist: f64) -> f64 {
        let scaled = if self.lambda == 1.0 {
            dist
        } else if self.lambda == 0.5 {
            dist.sqrt()
        } else {
            dist.powf(self.lambda)
        };
        self.q * scaled
    }

    pub fn gauge(&self, a: &[f64], b: &[f64]) -> f64 {
        self.cone(self.norm.distance(a, b))
    }
}

/// One exact sample of the unknown function: input point `z`, observed value `y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    z: Vec<f64>,
    y: Vec<f64>,
}

impl Observation {
    pub fn new(z: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if !linalg::all_finite(&z) || !linalg::all_finite(&y) {
            return Err(Error::NonFinite {
                what: "observation",
                step: None,
            });
        }
        Ok(Self { z, y })
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }
}

/// Componentwise box `[lo, hi]` of values the unknown function may still take
/// around the current prediction. Symmetric about zero for the midpoint
/// prediction used here.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyInterval {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

/// Immutable snapshot of the dataset plus the Hölder bound. All queries are
/// read-only; `observe` returns a fresh snapshot, so models can be shared
/// freely across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct KinkyModel {
    spec: HolderSpec,
    d_in: usize,
    d_out: usize,
    data: Vec<Observation>,
}

#[derive(Serialize, Deserialize)]
struct KinkyModelRepr {
    q: f64,
    lambda: f64,
    norm: Norm,
    d_in: usize,
    d_out: usize,
    data: Vec<Observation>,
}

impl KinkyModel {
    /// Builds a model from explicit data. The dataset must be non-empty,
    /// dimensionally uniform, and pairwise consistent with the Hölder bound;
    /// exact duplicate points are dropped.
    pub fn new(
        spec: HolderSpec,
        d_in: usize,
        d_out: usize,
        data: Vec<Observation>,
    ) -> Result<Self> {
        if d_in == 0 || d_out == 0 {
            return Err(Error::Config(
                "input and output dimensions must be positive".into(),
            ));
        }
        if data.is_empty() {
            return Err(Error::Config("dataset must be non-empty".into()));
        }
        let mut model = Self {
            spec,
            d_in,
            d_out,
            data: Vec::with_capacity(data.len()),
        };
        for obs in data {
            model = model.ingest(obs)?;
        }
        Ok(model)
    }

    /// Model with the single seed observation `(0, 0)`: the origin is a known
    /// equilibrium, so the dataset starts there.
    pub fn seeded_origin(spec: HolderSpec, d_in: usize, d_out: usize) -> Result<Self> {
        let origin = Observation::new(vec![0.0; d_in], vec![0.0; d_out])?;
        Self::new(spec, d_in, d_out, vec![origin])
    }

    pub fn spec(&self) -> &HolderSpec {
        &self.spec
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn data(&self) -> &[Observation] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn check_query(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.d_in {
            return Err(Error::Dimension {
                what: "query point",
                expected: self.d_in,
                got: z.len(),
            });
        }
        if !linalg::all_finite(z) {
            return Err(Error::NonFinite {
                what: "query point",
                step: None,
            });
        }
        Ok(())
    }

    /// Upper and lower confidence envelopes at `z`, each componentwise over the
    /// dataset: `min_i y_i + q d_i^lambda` and `max_i y_i - q d_i^lambda`.
    /// Fails if the lower envelope exceeds the upper one beyond the
    /// consistency slack, which means the declared `q` is too small.
    pub fn envelopes(&self, z: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_query(z)?;
        let mut upper = vec![f64::INFINITY; self.d_out];
        let mut lower = vec![f64::NEG_INFINITY; self.d_out];
        let mut upper_src = vec![0usize; self.d_out];
        let mut lower_src = vec![0usize; self.d_out];
        for (i, obs) in self.data.iter().enumerate() {
            let cone = self.spec.gauge(z, &obs.z);
            for j in 0..self.d_out {
                let hi = obs.y[j] + cone;
                if hi < upper[j] {
                    upper[j] = hi;
                    upper_src[j] = i;
                }
                let lo = obs.y[j] - cone;
                if lo > lower[j] {
                    lower[j] = lo;
                    lower_src[j] = i;
                }
            }
        }
        for j in 0..self.d_out {
            if lower[j] > upper[j] + CONSISTENCY_SLACK {
                let a = &self.data[upper_src[j]];
                let b = &self.data[lower_src[j]];
                let gap = linalg::inf_norm(&linalg::sub(&a.y, &b.y));
                let dist = self.spec.norm().distance(&a.z, &b.z);
                return Err(Error::HolderViolation {
                    z_a: a.z.clone(),
                    z_b: b.z.clone(),
                    excess: lower[j] - upper[j],
                    implied_q: implied_q(gap, dist, self.spec.lambda()),
                    q: self.spec.q(),
                });
            }
        }
        Ok((upper, lower))
    }

    /// Upper confidence envelope: the smallest value every stored cone allows.
    pub fn envelope_max(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_query(z)?;
        let mut upper = vec![f64::INFINITY; self.d_out];
        for obs in &self.data {
            let cone = self.spec.gauge(z, &obs.z);
            for (bound, y) in upper.iter_mut().zip(&obs.y) {
                *bound = bound.min(y + cone);
            }
        }
        Ok(upper)
    }

    /// Lower confidence envelope. Also cross-checks against the upper envelope
    /// and reports a Hölder violation if the two cross.
    pub fn envelope_min(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.envelopes(z).map(|(_, lower)| lower)
    }

    /// Midpoint of the envelopes. Lies between the bounds by construction and
    /// inherits the Hölder bound `q` (min, max and averages of q-Hölder
    /// functions are q-Hölder).
    pub fn predict(&self, z: &[f64]) -> Result<Vec<f64>> {
        let (upper, lower) = self.envelopes(z)?;
        Ok(upper
            .iter()
            .zip(&lower)
            .map(|(u, l)| u - (u - l) / 2.0)
            .collect())
    }

    /// Envelope gap around the prediction, as a symmetric box `[-h/2, h/2]`
    /// per component. Collapses to `{0}` at stored data points.
    pub fn uncertainty_interval(&self, z: &[f64]) -> Result<UncertaintyInterval> {
        let (upper, lower) = self.envelopes(z)?;
        let hi: Vec<f64> = upper
            .iter()
            .zip(&lower)
            .map(|(u, l)| (u - l) / 2.0)
            .collect();
        let lo: Vec<f64> = hi.iter().map(|h| -h).collect();
        Ok(UncertaintyInterval { lo, hi })
    }

    /// Pointwise uncertainty `h(z)`: the largest envelope gap over output
    /// components. Zero exactly at stored data points.
    pub fn width(&self, z: &[f64]) -> Result<f64> {
        let (upper, lower) = self.envelopes(z)?;
        Ok(upper
            .iter()
            .zip(&lower)
            .fold(0.0, |acc, (u, l)| acc.max(u - l)))
    }

    /// Returns a new snapshot with `obs` appended. The observation must be
    /// consistent with the stored data under the declared Hölder bound; an
    /// exact revisit of a stored point leaves the dataset unchanged.
    pub fn observe(&self, obs: Observation) -> Result<KinkyModel> {
        self.clone().ingest(obs)
    }

    fn ingest(mut self, obs: Observation) -> Result<KinkyModel> {
        if obs.z.len() != self.d_in {
            return Err(Error::Dimension {
                what: "observation input",
                expected: self.d_in,
                got: obs.z.len(),
            });
        }
        if obs.y.len() != self.d_out {
            return Err(Error::Dimension {
                what: "observation output",
                expected: self.d_out,
                got: obs.y.len(),
            });
        }
        if !linalg::all_finite(&obs.z) || !linalg::all_finite(&obs.y) {
            return Err(Error::NonFinite {
                what: "observation",
                step: None,
            });
        }
        let mut worst: Option<(usize, f64, f64)> = None;
        for (i, stored) in self.data.iter().enumerate() {
            let gap = linalg::inf_norm(&linalg::sub(&obs.y, &stored.y));
            let dist = self.spec.norm().distance(&obs.z, &stored.z);
            if dist == 0.0 {
                if gap <= CONSISTENCY_SLACK {
                    // Exact revisit: the dataset already carries this point.
                    return Ok(self);
                }
                return Err(Error::HolderViolation {
                    z_a: stored.z.clone(),
                    z_b: obs.z,
                    excess: gap,
                    implied_q: f64::INFINITY,
                    q: self.spec.q(),
                });
            }
            let excess = gap - self.spec.cone(dist);
            if excess > CONSISTENCY_SLACK {
                let iq = implied_q(gap, dist, self.spec.lambda());
                if worst.is_none_or(|(_, _, w)| iq > w) {
                    worst = Some((i, excess, iq));
                }
            }
        }
        if let Some((i, excess, implied_q)) = worst {
            return Err(Error::HolderViolation {
                z_a: self.data[i].z.clone(),
                z_b: obs.z,
                excess,
                implied_q,
                q: self.spec.q(),
            });
        }
        self.data.push(obs);
        Ok(self)
    }

    /// Midpoint-rule quadrature of `width` over an axis-aligned box: the
    /// integrated uncertainty mass remaining in the region. Deterministic for
    /// a fixed grid, and nonincreasing under `observe` because the integrand
    /// shrinks pointwise.
    pub fn uncertainty_size(
        &self,
        bounds: &[(f64, f64)],
        grid_points_per_axis: usize,
    ) -> Result<f64> {
        if bounds.len() != self.d_in {
            return Err(Error::Dimension {
                what: "quadrature box",
                expected: self.d_in,
                got: bounds.len(),
            });
        }
        if grid_points_per_axis < 2 {
            return Err(Error::Config(
                "quadrature needs at least 2 grid points per axis".into(),
            ));
        }
        let g = grid_points_per_axis;
        let mut cell_volume = 1.0;
        for &(lo, hi) in bounds {
            if !lo.is_finite() || !hi.is_finite() || lo > hi {
                return Err(Error::Config(format!(
                    "quadrature box [{lo}, {hi}] must be bounded with lo <= hi"
                )));
            }
            cell_volume *= (hi - lo) / g as f64;
        }
        let mut index = vec![0usize; self.d_in];
        let mut z = vec![0.0; self.d_in];
        let mut sum = 0.0;
        loop {
            for (k, &(lo, hi)) in bounds.iter().enumerate() {
                let step = (hi - lo) / g as f64;
                z[k] = lo + (index[k] as f64 + 0.5) * step;
            }
            sum += self.width(&z)?;
            // mixed-radix increment
            let mut axis = 0;
            loop {
                if axis == self.d_in {
                    return Ok(cell_volume * sum);
                }
                index[axis] += 1;
                if index[axis] < g {
                    break;
                }
                index[axis] = 0;
                axis += 1;
            }
        }
    }

    pub fn to_json(&self) -> String {
        let repr = KinkyModelRepr {
            q: self.spec.q(),
            lambda: self.spec.lambda(),
            norm: self.spec.norm(),
            d_in: self.d_in,
            d_out: self.d_out,
            data: self.data.clone(),
        };
        serde_json::to_string(&repr).expect("dataset serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let repr: KinkyModelRepr = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("bad dataset JSON: {e}")))?;
        let spec = HolderSpec::new(repr.q, repr.lambda, repr.norm)?;
        Self::new(spec, repr.d_in, repr.d_out, repr.data)
    }
}

/// Smallest Hölder constant that makes a value gap admissible at a distance.
fn implied_q(gap: f64, dist: f64, lambda: f64) -> f64 {
    if dist == 0.0 {
        return f64::INFINITY;
    }
    let scaled = if lambda == 1.0 {
        dist
    } else {
        dist.powf(lambda)
    };
    gap / scaled
}

/// Sup-norm change of the prediction between two model snapshots at `z`.
/// When `new` extends `old` by one observation, this is bounded by the old
/// model's width at the newly observed point.
pub fn model_update_deviation(old: &KinkyModel, new: &KinkyModel, z: &[f64]) -> Result<f64> {
    let a = old.predict(z)?;
    let b = new.predict(z)?;
    if a.len() != b.len() {
        return Err(Error::Dimension {
            what: "prediction",
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(linalg::inf_norm(&linalg::sub(&a, &b)))
}
