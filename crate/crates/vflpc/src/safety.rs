//! Pursuit-evasion safety switch and exponential barrier.
//!
//! The nearest moving obstacle is treated as a pursuer and the robot as an
//! evader. In a frame whose Y-axis points along the evader's velocity, a
//! capture region is built from the terminal circle of radius `l` plus the
//! two half-planes tangent to it at the boundary-of-usable-part angle
//! `s = arccos(-v_p / v_e)`. While the pursuer sits inside that region
//! (dilated by `l_safe`), an exponential barrier term is switched into the
//! controller's step cost; otherwise the barrier coefficient is zero and
//! the controller tracks the planned trajectory unencumbered.

use crate::sim::VehicleState;
use crate::vf::{nearest_boundary_point, ObstacleSpec, Vec2};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SafetyError {
    #[error("game geometry: {0}")]
    Geometry(String),
}

/// Pursuer faster than the evader: escape cannot be guaranteed, so the
/// caller must force the barrier active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("pursuer at least as fast as the evader in the worst case: no escape angle")]
pub struct NoEscape;

/// Capture-game geometry: physical radius, extra margin, agent speeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GameGeometry {
    /// Capture radius (m).
    pub l: f64,
    /// Extra safety margin added to the region test (m).
    pub l_safe: f64,
    /// Pursuer speed (m/s).
    pub v_p: f64,
    /// Evader speed (m/s); also the standstill fallback when the decision
    /// is taken from a live vehicle state.
    pub v_e: f64,
}

impl GameGeometry {
    pub fn validate(&self) -> Result<(), SafetyError> {
        if !(self.l > 0.0) {
            return Err(SafetyError::Geometry("l must be positive".into()));
        }
        if !(self.l_safe >= 0.0) {
            return Err(SafetyError::Geometry("l_safe must be non-negative".into()));
        }
        if !(self.v_e > 0.0) {
            return Err(SafetyError::Geometry("v_e must be positive".into()));
        }
        if !(self.v_p >= 0.0) {
            return Err(SafetyError::Geometry("v_p must be non-negative".into()));
        }
        Ok(())
    }
}

/// Barrier switching configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BarrierConfig {
    /// Penalty coefficient applied while the pursuit region is occupied.
    pub mu_active: f64,
}

impl BarrierConfig {
    pub fn validate(&self) -> Result<(), SafetyError> {
        if !(self.mu_active > 0.0) {
            return Err(SafetyError::Geometry("mu_active must be positive".into()));
        }
        Ok(())
    }
}

/// Boundary-of-usable-part angle `arccos(-v_p / v_e)`, in (pi/2, pi] for
/// a strictly slower pursuer; exactly pi/2 for a stationary one.
pub fn bup_angle(geom: &GameGeometry) -> Result<f64, NoEscape> {
    if geom.v_p > geom.v_e {
        return Err(NoEscape);
    }
    if geom.v_p == 0.0 {
        log::debug!("stationary pursuer: bup angle at the open-interval boundary pi/2");
    }
    Ok((-geom.v_p / geom.v_e).acos())
}

/// Transform a world point into the evader frame: the Y-axis points along
/// the evader's velocity heading, the X-axis to its right.
pub fn to_evader_frame(evader_pos: &Vec2, velocity_heading: f64, point: &Vec2) -> Vec2 {
    let rel = point - evader_pos;
    let (s, c) = velocity_heading.sin_cos();
    // Rows of the rotation: X_e = (sin h, -cos h), Y_e = (cos h, sin h).
    Vec2::new(s * rel.x - c * rel.y, c * rel.x + s * rel.y)
}

/// Heading of a velocity vector, falling back to the yaw angle when the
/// speed is too small to define a direction.
pub fn velocity_heading(world_velocity: &Vec2, fallback_yaw: f64) -> f64 {
    if world_velocity.norm() < 1e-6 {
        fallback_yaw
    } else {
        world_velocity.y.atan2(world_velocity.x)
    }
}

/// Membership of the pursuer's evader-frame position in the capture
/// region: within `l + l_safe` of the evader AND inside the union of the
/// terminal half-disc band and its two tangent half-plane wedges. A
/// faster pursuer makes the region cover everything within range.
pub fn in_pursuit_region(p_e: &Vec2, geom: &GameGeometry) -> bool {
    if p_e.norm() > geom.l + geom.l_safe {
        return false;
    }
    let s_bar = match bup_angle(geom) {
        Ok(a) => a,
        Err(NoEscape) => return true,
    };
    let l = geom.l;
    let (x, y) = (p_e.x, p_e.y);
    let sin_s = s_bar.sin();
    let cos_s = s_bar.cos();
    // Stationary pursuer: the tangent lines are vertical and the wedges
    // vanish; membership closes onto the half-disc band.
    if cos_s.abs() < 1e-12 {
        return x.abs() <= l && y >= -(l * l - x * x).max(0.0).sqrt();
    }
    let tan_s = sin_s / cos_s;
    let h1 = x <= -l * sin_s && y >= tan_s * x + l / cos_s;
    let h2 = x >= l * sin_s && y >= -tan_s * x + l / cos_s;
    let h3 = x > -l * sin_s && x < l * sin_s && y >= -(l * l - x * x).max(0.0).sqrt();
    h1 || h2 || h3
}

/// `mu * exp(-dist)` with the planar distance between the robot position
/// and the boundary point.
pub fn barrier_value(robot_pos: &Vec2, x_p: &Vec2, mu: f64) -> f64 {
    mu * (-(robot_pos - x_p).norm()).exp()
}

/// Gradient of the barrier with respect to the lifted error state. Only
/// the two position rows are nonzero: the position is the error's leading
/// block plus the reference position. Returns the degenerate flag when
/// the robot sits exactly on the boundary point.
pub fn barrier_gradient(
    x_tilde: &DVector<f64>,
    ref_pos: &Vec2,
    x_p: &Vec2,
    mu: f64,
) -> (DVector<f64>, bool) {
    let n_k = x_tilde.len();
    let mut grad = DVector::zeros(n_k);
    if mu == 0.0 {
        return (grad, false);
    }
    let pos = Vec2::new(x_tilde[0] + ref_pos.x, x_tilde[1] + ref_pos.y);
    let diff = pos - x_p;
    let dist = diff.norm();
    if dist == 0.0 {
        return (grad, true);
    }
    let scale = -mu * (-dist).exp() / dist;
    grad[0] = scale * diff.x;
    grad[1] = scale * diff.y;
    (grad, false)
}

/// Outcome of the per-cycle barrier switch.
#[derive(Debug, Clone)]
pub struct MuDecision {
    pub mu: f64,
    /// Nearest point of the pursuer's reactive boundary, when a pursuer
    /// exists.
    pub x_p: Option<Vec2>,
    pub pursuer: Option<usize>,
    pub in_region: bool,
    pub no_escape: bool,
}

impl MuDecision {
    fn inactive() -> Self {
        MuDecision { mu: 0.0, x_p: None, pursuer: None, in_region: false, no_escape: false }
    }
}

/// Decide the barrier coefficient for this cycle: take the nearest moving
/// obstacle as the pursuer, transform it into the evader frame of the
/// robot, and activate the barrier if it sits in the capture region (or
/// is too fast to escape at all). The boundary point `x_p` is the nearest
/// point of the pursuer's reaction onset boundary.
pub fn select_mu(
    robot: &VehicleState,
    obstacles: &[ObstacleSpec],
    t: f64,
    geom: &GameGeometry,
    cfg: &BarrierConfig,
) -> MuDecision {
    let robot_pos = Vec2::new(robot.x, robot.y);
    let mut nearest: Option<(usize, f64, Vec2)> = None;
    let mut movers_in_range = 0usize;
    for (i, o) in obstacles.iter().enumerate() {
        if o.motion.is_none() {
            continue;
        }
        let Some(center) = o.center(t) else { continue };
        let d = (center - robot_pos).norm();
        if d <= geom.l + geom.l_safe {
            movers_in_range += 1;
        }
        if nearest.map_or(true, |(_, best, _)| d < best) {
            nearest = Some((i, d, center));
        }
    }
    if movers_in_range > 1 {
        log::info!("{movers_in_range} moving obstacles within the safety range; using the nearest only");
    }
    let Some((idx, _, center)) = nearest else {
        return MuDecision::inactive();
    };
    let pursuer = &obstacles[idx];
    let v_world = robot.world_velocity();
    let heading = velocity_heading(&Vec2::new(v_world[0], v_world[1]), robot.psi);
    let speed = robot.speed();
    let v_e = if speed < 1e-6 { geom.v_e } else { speed };
    let v_p = pursuer.motion.as_ref().map_or(0.0, |m| m.speed());
    let game = GameGeometry { l: geom.l, l_safe: geom.l_safe, v_p, v_e };
    let p_e = to_evader_frame(&robot_pos, heading, &center);
    let no_escape = bup_angle(&game).is_err();
    let in_region = in_pursuit_region(&p_e, &game);
    let x_p = nearest_reactive_point(pursuer, &robot_pos, t);
    if in_region {
        MuDecision { mu: cfg.mu_active, x_p, pursuer: Some(idx), in_region, no_escape }
    } else {
        MuDecision { mu: 0.0, x_p, pursuer: Some(idx), in_region, no_escape }
    }
}

/// Nearest point of an obstacle's reaction onset boundary (zero level of
/// its moving surface) from a query point.
pub fn nearest_reactive_point(obstacle: &ObstacleSpec, query: &Vec2, t: f64) -> Option<Vec2> {
    let offset = obstacle.offset(t);
    let local = query - offset;
    nearest_boundary_point(&obstacle.surface, 0.0, local).map(|(p, _)| p + offset)
}
