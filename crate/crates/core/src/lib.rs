//! Numerical laboratory for self-similar blowup profiles of the 2D Boussinesq
//! equations in the slowed polar coordinates (R, beta) = (r^alpha, arctan(y/x)).
//!
//! The crate provides the grids and singular weights, the approximate steady
//! profiles, the sine-mode Biot-Savart solver, the rescaled dynamics, the
//! linearized operators with their weighted energies, the inequality
//! certificates, and the vortex toy model.

pub mod dynamics;
pub mod field;
pub mod grid;
pub mod linop;
pub mod profiles;
pub mod quad;
pub mod stream;
