//! Estimation of 3D person and object motion, contact locations, and contact
//! forces from per-frame 2D keypoint measurements.
//!
//! The crate models the person and the manipulated object as kinematic trees,
//! expresses measurement fit, physical consistency and contact constraints as
//! residual blocks of a sparse nonlinear least-squares problem, and solves it
//! with a manifold-aware Levenberg-Marquardt method in three stages. A
//! synthetic-scenario generator with physically consistent ground-truth forces
//! backs the test suite and the evaluation tooling.

pub mod contact;
pub mod costs;
pub mod dynamics;
pub mod eval;
pub mod io;
pub mod model;
pub mod scalar;
pub mod solver;
pub mod spatial;
