//! Estimation of an impulsive force acting on a continuously monitored
//! mechanical oscillator, and optimization of the parametric drive that
//! sharpens that estimate.
//!
//! The crate is organized bottom-up:
//!
//! * [`gaussian`]: phase-space moments, model matrices, and the map from a
//!   Hamiltonian plus collapse operators to drift/diffusion/measurement form;
//! * [`riccati`]: forward filtering and backward retrodiction covariance
//!   flows, fixed-step RK4 integration, steady states;
//! * [`systems`]: the catalog of parametrically driven oscillators;
//! * [`impulse`]: kick-estimation geometry built from the two covariances;
//! * [`ocp`]: drive-protocol optimization by projected gradient descent;
//! * [`montecarlo`]: stochastic trajectory simulation validating the
//!   covariance-level predictions against sampled measurement records.

mod error;
mod linalg;
mod stepper;

pub mod gaussian;
pub mod impulse;
pub mod montecarlo;
pub mod ocp;
pub mod riccati;
pub mod systems;

pub use error::{Error, Result};
