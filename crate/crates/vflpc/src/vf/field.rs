//! Field evaluation: path-following and repulsive constituents, smooth bump
//! blending, and the kinodynamic composite field with virtual-obstacle
//! damping.
//!
//! Conventions. For a path surface `phi` and obstacle surfaces `phi_i`:
//!
//! * path constituent      `chi_P = gamma0 * E grad(phi) - k_p * phi * grad(phi)`
//! * repulsive constituent `chi_Ri = gamma_i * E grad(phi_i) - k_ri * phi_i * grad(phi_i)`
//!
//! with `E` the 90-degree rotation. The composite field blends *normalized*
//! constituents with bump coefficients that partition unity per obstacle:
//! outside the reactive boundary (`phi_i >= 0`) the path term passes through
//! untouched, inside the repulsive region (`phi_i <= c_i`) the repulsive
//! term fully takes over, and in between both act with weights that sum to
//! one exactly.
//!
//! Virtual obstacles replace the bump pair with a damping factor `s_i` that
//! only acts inside the buffer region between their own reactive boundary
//! and their anchor's reactive boundary. The factor bleeds the path term
//! into the virtual repulsive term early, so the eventual turn demanded by
//! the physical obstacle is spread over a longer arc.

use super::grid::GridSpec;
use super::obstacle::ObstacleSpec;
use super::surface::Surface;
use super::{FieldError, Vec2};
use serde::{Deserialize, Serialize};

/// Norm below which a constituent direction is considered undefined.
const NORMALIZATION_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldConfig {
    /// Path circulation direction, +1 or -1.
    #[serde(default = "one")]
    pub gamma0: f64,
    /// Path convergence gain.
    #[serde(default = "one")]
    pub k_p: f64,
    /// Integration step length (also the trajectory sample spacing).
    pub beta: f64,
    /// Norm threshold for the singularity-inheritance rule while
    /// integrating over a precomputed grid.
    #[serde(default = "default_epsilon")]
    pub epsilon_singular: f64,
    pub grid: GridSpec,
    /// Desired cruise speed for speed planning (m/s).
    pub v_d: f64,
    /// Maximum centripetal acceleration for speed planning (m/s^2).
    pub a_max: f64,
}

fn one() -> f64 {
    1.0
}
fn default_epsilon() -> f64 {
    1e-8
}

impl FieldConfig {
    pub fn validate(&self) -> Result<(), FieldError> {
        if (self.gamma0.abs() - 1.0).abs() > 1e-12 {
            return Err(FieldError::Config(format!(
                "gamma0 must be +1 or -1, got {}",
                self.gamma0
            )));
        }
        if !(self.k_p > 0.0) {
            return Err(FieldError::Config("k_p must be positive".into()));
        }
        if !(self.beta > 0.0) {
            return Err(FieldError::Config("beta must be positive".into()));
        }
        if !(self.epsilon_singular > 0.0) {
            return Err(FieldError::Config("epsilon_singular must be positive".into()));
        }
        if !(self.v_d > 0.0 && self.a_max > 0.0) {
            return Err(FieldError::Config("v_d and a_max must be positive".into()));
        }
        self.grid.validate()
    }
}

fn check_finite(p: Vec2, phi: f64, grad: Vec2) -> Result<(), FieldError> {
    if phi.is_finite() && grad.x.is_finite() && grad.y.is_finite() {
        Ok(())
    } else {
        Err(FieldError::Evaluation { x: p.x, y: p.y })
    }
}

/// `gamma * E g - k * phi * g` with `E` the 90-degree rotation.
fn circulate(phi: f64, g: Vec2, gamma: f64, k: f64) -> Vec2 {
    Vec2::new(-gamma * g.y - k * phi * g.x, gamma * g.x - k * phi * g.y)
}

/// Path-following constituent (unnormalized).
pub fn path_field(path: &Surface, cfg: &FieldConfig, p: Vec2) -> Result<Vec2, FieldError> {
    let phi = path.eval(p);
    let g = path.gradient(p);
    check_finite(p, phi, g)?;
    Ok(circulate(phi, g, cfg.gamma0, cfg.k_p))
}

/// Repulsive constituent of one obstacle (unnormalized), with the obstacle
/// translated to its pose at time `t`.
pub fn repulsive_field(o: &ObstacleSpec, p: Vec2, t: f64) -> Result<Vec2, FieldError> {
    let phi = o.eval(p, t);
    let g = o.gradient(p, t);
    check_finite(p, phi, g)?;
    Ok(circulate(phi, g, o.gamma, o.k_r))
}

/// Bump coefficients `(path_weight, repulsive_weight)` of one obstacle at
/// `p`. They sum to one exactly; the first is exactly 1 outside the
/// reactive boundary and exactly 0 inside the repulsive region.
pub fn bump_pair(o: &ObstacleSpec, p: Vec2, t: f64) -> Result<(f64, f64), FieldError> {
    let phi = o.eval(p, t);
    if !phi.is_finite() {
        return Err(FieldError::Evaluation { x: p.x, y: p.y });
    }
    let f1 = if phi <= o.c {
        0.0
    } else {
        (o.l1 / (o.c - phi)).exp()
    };
    let f2 = if phi < 0.0 { (o.l2 / phi).exp() } else { 0.0 };
    let sum = f1 + f2;
    if sum == 0.0 {
        // Both bumps underflowed (possible only for extremely thin
        // sandwiched regions); split at the midlevel.
        return Ok(if phi > 0.5 * o.c { (1.0, 0.0) } else { (0.0, 1.0) });
    }
    let up = f1 / sum;
    Ok((up, 1.0 - up))
}

/// Damping factor of a virtual obstacle. Outside the buffer region the
/// factor is 1 (no influence). Inside, it decays toward the virtual
/// repulsive boundary and saturates at 0 on and past it.
pub fn s_factor(o: &ObstacleSpec, p: Vec2, t: f64, in_buffer: bool) -> Result<f64, FieldError> {
    if !in_buffer {
        return Ok(1.0);
    }
    let phi = o.eval(p, t);
    if !phi.is_finite() {
        return Err(FieldError::Evaluation { x: p.x, y: p.y });
    }
    if phi <= o.c {
        // Limit of exp(k_c / (c - phi)) as phi -> c from above.
        return Ok(0.0);
    }
    Ok((o.k_c / (o.c - phi)).exp())
}

fn normalized_or_singular(v: Vec2, p: Vec2) -> Result<Vec2, FieldError> {
    let n = v.norm();
    if n < NORMALIZATION_EPS {
        Err(FieldError::SingularConstituent { x: p.x, y: p.y, norm: n })
    } else {
        Ok(v / n)
    }
}

/// Where a position sits relative to one virtual obstacle's latch geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BufferRegion {
    /// Neither in the buffer nor sandwiched between the anchor's
    /// boundaries.
    Outside,
    /// Buffer: outside the anchor's reactive boundary, inside the virtual
    /// obstacle's reactive boundary.
    Buffer,
    /// Sandwiched: between the anchor's repulsive and reactive boundaries.
    Sandwiched,
}

/// Classify `p` for the latch bookkeeping of one virtual obstacle.
pub fn classify_region(
    virt: &ObstacleSpec,
    anchor: &ObstacleSpec,
    p: Vec2,
    t: f64,
) -> BufferRegion {
    let phi_a = anchor.eval(p, t);
    if phi_a > 0.0 {
        if virt.eval(p, t) < 0.0 {
            BufferRegion::Buffer
        } else {
            BufferRegion::Outside
        }
    } else if phi_a > anchor.c {
        BufferRegion::Sandwiched
    } else {
        BufferRegion::Outside
    }
}

#[derive(Debug, Clone)]
struct VirtualLatch {
    anchor: usize,
    prev: BufferRegion,
    ceased: bool,
}

/// Trajectory-history bookkeeping for virtual obstacles.
///
/// A virtual obstacle ceases to influence the field once the trajectory
/// re-enters its buffer region from the sandwiched region (it has already
/// steered the avoidance and must now let the path term pull the
/// trajectory home). Leaving both regions re-arms it.
#[derive(Debug, Clone)]
pub struct BufferState {
    latches: Vec<Option<VirtualLatch>>,
}

impl BufferState {
    /// Fresh state: every virtual obstacle active, no history.
    pub fn new(obstacles: &[ObstacleSpec]) -> Self {
        BufferState {
            latches: obstacles
                .iter()
                .map(|o| {
                    o.virtual_of.map(|anchor| VirtualLatch {
                        anchor,
                        prev: BufferRegion::Outside,
                        ceased: false,
                    })
                })
                .collect(),
        }
    }

    /// Record the trajectory visiting `p`, updating latch flags.
    pub fn update(&mut self, obstacles: &[ObstacleSpec], p: Vec2, t: f64) {
        for (i, slot) in self.latches.iter_mut().enumerate() {
            let Some(latch) = slot else { continue };
            let region = classify_region(&obstacles[i], &obstacles[latch.anchor], p, t);
            match region {
                BufferRegion::Buffer if latch.prev == BufferRegion::Sandwiched => {
                    latch.ceased = true;
                }
                BufferRegion::Outside => latch.ceased = false,
                _ => {}
            }
            latch.prev = region;
        }
    }

    /// Whether virtual obstacle `i` has latched off.
    pub fn ceased(&self, i: usize) -> bool {
        self.latches
            .get(i)
            .and_then(|s| s.as_ref())
            .is_some_and(|l| l.ceased)
    }
}

/// Composite field over physical obstacles only: bump-blended path and
/// repulsive constituents. Virtual obstacles are rejected here; use
/// [`kinodynamic_field`] for scenes that carry them.
pub fn composite_field(
    path: &Surface,
    obstacles: &[ObstacleSpec],
    cfg: &FieldConfig,
    p: Vec2,
    t: f64,
) -> Result<Vec2, FieldError> {
    if let Some(i) = obstacles.iter().position(|o| o.is_virtual()) {
        return Err(FieldError::Config(format!(
            "obstacle {i} is virtual; composite_field blends physical obstacles only"
        )));
    }
    kinodynamic_field(path, obstacles, cfg, p, t, None)
}

/// Kinodynamic composite field at `p`: physical obstacles contribute bump
/// blends, virtual obstacles damp the path coefficient and feed their own
/// repulsive direction inside their buffer regions.
///
/// `buffer_state = None` evaluates with every virtual obstacle active and
/// no latch history (the configuration used for grid precomputation).
pub fn kinodynamic_field(
    path: &Surface,
    obstacles: &[ObstacleSpec],
    cfg: &FieldConfig,
    p: Vec2,
    t: f64,
    buffer_state: Option<&BufferState>,
) -> Result<Vec2, FieldError> {
    let mut path_coeff = 1.0;
    let mut total = Vec2::zeros();
    for (i, o) in obstacles.iter().enumerate() {
        if let Some(anchor) = o.virtual_of {
            let s = if buffer_state.is_some_and(|b| b.ceased(i)) {
                1.0
            } else {
                let in_buffer =
                    classify_region(o, &obstacles[anchor], p, t) == BufferRegion::Buffer;
                s_factor(o, p, t, in_buffer)?
            };
            path_coeff *= s;
            if 1.0 - s > 0.0 {
                let dir = normalized_or_singular(repulsive_field(o, p, t)?, p)?;
                total += dir * (1.0 - s);
            }
        } else {
            let (up, cap) = bump_pair(o, p, t)?;
            path_coeff *= up;
            if cap > 0.0 {
                let dir = normalized_or_singular(repulsive_field(o, p, t)?, p)?;
                total += dir * cap;
            }
        }
    }
    if path_coeff > 0.0 {
        let dir = normalized_or_singular(path_field(path, cfg, p)?, p)?;
        total += dir * path_coeff;
    }
    Ok(total)
}
