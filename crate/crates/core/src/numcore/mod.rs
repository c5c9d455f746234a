//! Deterministic float64 kernel: dense layers with analytic backprop,
//! optimizers, losses and a finite-difference gradient checker.

mod gradcheck;
pub mod loss;
mod matrix;
mod net;
mod optim;

pub use gradcheck::{grad_check, GradCheck};
pub use matrix::{dot, norm_sq, solve, Matrix};
pub use net::{Activation, Dense, DenseGrad, DenseNet, NetGrads, Tape};
pub use optim::{OptState, Optimizer};
