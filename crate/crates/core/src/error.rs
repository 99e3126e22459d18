use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors shared by the learner, the plant models, the trajectory optimizer and
/// the closed-loop driver.
#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{what}: expected dimension {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {what}{}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    NonFinite {
        what: &'static str,
        step: Option<usize>,
    },

    /// A pair of observations is inconsistent with the declared Hölder bound.
    /// `implied_q` is the smallest constant that would make the pair admissible;
    /// rebuilding the model with a larger `q` resolves the conflict.
    #[error(
        "observations at {z_a:?} and {z_b:?} violate the Hölder bound by {excess:.3e}; \
         the data requires q >= {implied_q:.6} (declared q = {q})"
    )]
    HolderViolation {
        z_a: Vec<f64>,
        z_b: Vec<f64>,
        excess: f64,
        implied_q: f64,
        q: f64,
    },

    #[error("closed-loop step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn at_step(self, step: usize) -> Error {
        Error::Step {
            step,
            source: Box::new(self),
        }
    }
}
