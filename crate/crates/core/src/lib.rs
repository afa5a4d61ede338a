//! Reduced-order soft-rod simulation and goal-conditioned trajectory diffusion.
//!
//! The crate models a two-joint arm carrying a deformable rope with a
//! strain-parameterized Cosserat rod, generates whipping datasets from it,
//! trains an x0-predicting transformer diffusion policy over the full
//! 20-dimensional generalized coordinates, and refines samples at inference
//! with gradients of a kinematic goal loss.

pub mod benchmark;
pub mod control;
pub mod dataset;
pub mod diffusion;
pub mod dynamics;
pub mod error;
pub mod eval;
pub mod kinematics;
pub mod model;
pub mod pita;
pub mod plot;
pub mod prior;
pub mod se3;

pub use error::{Error, Result};
pub use se3::{Pose, Twist};
