//! Personalized federated edge learning over analog over-the-air (A-OTA)
//! gradient aggregation.
//!
//! The crate simulates the full round loop: clients compute gradients of
//! their local losses at the broadcast global model, refine a personal model
//! against a proximal pull toward it, and upload their gradients through a
//! fading multiple-access channel whose superposition performs the
//! averaging. The [`theory`] module evaluates the closed-form convergence
//! bounds for the global and personal models and checks them against
//! simulated Monte-Carlo trajectories.

pub mod channel;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod models;
pub mod param;
pub mod report;
pub mod rng;
pub mod theory;
pub mod training;
pub mod validation;

pub use error::{Error, Result};
pub use param::ParamVector;
