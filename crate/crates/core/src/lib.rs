//! Storage capacity of linear associative memories.
//!
//! A linear map `W` stores `p` associations `e_mu -> u_mu` when, for every input,
//! the target output wins the argmax of the scores `u_rho^T W e_mu`. This crate
//! generates random instances, trains full-rank and factored maps with
//! cross-entropy and Adam, evaluates the Hebbian baseline, and computes the
//! analytic predictions: the capacity integral, replica free entropy, spectra at
//! capacity and at initialization.

pub mod error;
pub mod experiments;
pub mod hebbian;
pub mod model;
pub mod objective;
pub mod problem;
pub mod real;
pub mod rng;
pub mod special;
pub mod spectral;
pub mod theory;
pub mod train;

pub use error::{Error, Result};
pub use model::WeightModel;
pub use problem::{alpha_of, p_from_alpha, LoadPoint, Mode, ProblemInstance};
pub use real::{Precision, Real};
pub use train::{train, StopReason, TrainConfig, TrainReport};
