//! Score-distillation losses and segmented consistency trajectory
//! distillation, run against closed-form Gaussian-mixture diffusion priors.

pub mod config;
pub mod consistency;
pub mod error;
pub mod harness;
pub mod losses;
pub mod prior;
pub mod report;
pub mod scene;
pub mod schedule;
pub mod solver;

pub use error::{Error, Result};

pub type Vector = nalgebra::DVector<f64>;
pub type Matrix = nalgebra::DMatrix<f64>;
