//! Composite guiding vector fields over implicit surfaces.
//!
//! A desired path and every obstacle are level sets of smooth scalar fields
//! `phi: R^2 -> R`. The path field circulates along `{phi = 0}` while
//! correcting toward it; each obstacle contributes a repulsive field of the
//! same form around its own zero level. Smooth bump coefficients blend the
//! constituents so that exactly one of (path-following, obstacle-avoiding)
//! dominates in each region, and virtual obstacles reshape the blend where
//! the physical field would demand infeasible curvature.
//!
//! The module also provides dense grid precomputation of the composite
//! field, discrete trajectory integration with nearest-node lookup, and
//! curvature-limited speed planning along the integrated trajectory.

mod field;
mod grid;
mod obstacle;
mod surface;
mod trajectory;

pub use field::{
    bump_pair, classify_region, composite_field, kinodynamic_field, path_field, repulsive_field,
    s_factor, BufferRegion, BufferState, FieldConfig,
};
pub use grid::{precompute_grid, GridField, GridSpec};
pub use obstacle::{validate_obstacle_set, validate_virtual_placement, Motion, ObstacleSpec};
pub use surface::{nearest_boundary_point, Surface};
pub use trajectory::{
    integrate_trajectory, speed_plan, wrap_angle, GuidingTrajectory, TrajectorySample,
};

use thiserror::Error;

/// Planar point / vector.
pub type Vec2 = nalgebra::Vector2<f64>;

#[derive(Debug, Error)]
pub enum FieldError {
    /// A surface evaluation or gradient produced a non-finite value.
    #[error("non-finite surface evaluation at ({x}, {y})")]
    Evaluation { x: f64, y: f64 },
    /// A constituent field needed by the blend has (numerically) zero norm,
    /// so its unit direction is undefined. Callers integrate through such
    /// points by inheriting the previous step's direction.
    #[error("singular constituent field at ({x}, {y}): |chi| = {norm:.3e}")]
    SingularConstituent { x: f64, y: f64, norm: f64 },
    /// Obstacle or field configuration violates a documented precondition.
    #[error("invalid field configuration: {0}")]
    Config(String),
    /// Trajectory integration started from a singular grid cell.
    #[error("first integration step has no usable field vector")]
    SingularStart,
    /// Trajectory integration left the precomputed grid bounds.
    #[error("integration left grid bounds at step {step}")]
    LeftGrid { step: usize },
    /// Grid (de)serialization failure.
    #[error("grid i/o: {0}")]
    GridIo(String),
}
