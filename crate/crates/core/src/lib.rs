//! Core estimation library for multi-modal (spinning + solid-state)
//! LiDAR-inertial odometry and mapping.

pub mod dataset;
pub mod features;
pub mod geom;
pub mod imu;
pub mod kdtree;
pub mod posegraph;
pub mod precal;
pub mod swo;
pub mod types;

pub use geom::{NavState, Pose, Quaternion, Real};

/// Double-precision aliases used throughout the estimator.
pub type Quatd = geom::Quaternion<f64>;
pub type Posed = geom::Pose<f64>;
pub type NavStated = geom::NavState<f64>;
/// Single-precision aliases for storage and export paths.
pub type Quatf = geom::Quaternion<f32>;
pub type Posef = geom::Pose<f32>;
