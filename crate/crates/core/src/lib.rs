//! Learns an unknown Hölder-continuous dynamical system online from closed-loop
//! data and regulates it to the origin with an input-constrained receding-horizon
//! controller.
//!
//! The learner keeps hard upper/lower confidence envelopes around every function
//! consistent with the data and a Hölder bound `(q, lambda)`; the controller plans
//! against the envelope midpoint and shrinks its own model error as the trajectory
//! generates data.

pub mod config;
pub mod dynamics;
pub mod error;
pub mod kinky;
mod linalg;
pub mod ocp;
pub mod sim;
pub mod verify;

pub use error::{Error, Result};
pub use kinky::{HolderSpec, KinkyModel, Norm, Observation, UncertaintyInterval};
