//! Radar odometry on SE(3) with a constant-acceleration motion prior,
//! polar radar measurement model, maximum-likelihood data association and
//! a sliding-window MAP estimator, plus a synthetic radar simulator and a
//! KITTI-style evaluator.

pub mod association;
pub mod expm;
pub mod measurement;
pub mod integrators;
pub mod prior;
pub mod simulator;
pub mod se3;

pub use prior::{State, StateGaussian};
pub use se3::{Pose, Twist};
