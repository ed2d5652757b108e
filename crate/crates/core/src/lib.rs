//! Differentiable 2D MLS-MPM coupled with rigid bodies and cloth.
//!
//! The crate provides a material point method core, several interchangeable
//! contact models (grid, particle penalty and forecast-based), penetration
//! tracing against thin cloth, rigid and mass-spring dynamics, a coupled
//! stepper with a hand-written adjoint and a trajectory optimiser.

pub mod math;
pub mod error;
pub mod mpm;
pub mod contact;
pub mod cloth_contact;
pub mod rigid;
pub mod cloth;
pub mod coupling;
pub mod trajopt;
pub mod scene;
pub mod runner;

pub use error::{Result, SimError};
pub use math::{Mat2, Vec2};
