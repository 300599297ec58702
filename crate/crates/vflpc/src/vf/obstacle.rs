//! Obstacle descriptions consumed by the composite field: the reactive
//! region is `{phi < 0}`, the repulsive region `{phi < c}` for a level
//! `c < 0`, and virtual obstacles damp the path term inside a buffer region
//! anchored to a physical obstacle instead of contributing a bump blend.

use super::surface::Surface;
use super::{FieldError, Vec2};
use serde::{Deserialize, Serialize};

/// Constant-velocity motion armed by a proximity trigger. An obstacle stays
/// frozen until the robot first comes within `trigger_distance` of it; the
/// simulator then stamps `triggered_at` and the obstacle translates at
/// `velocity` from that instant on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Motion {
    pub velocity: [f64; 2],
    #[serde(default = "default_trigger")]
    pub trigger_distance: f64,
    #[serde(default)]
    pub triggered_at: Option<f64>,
}

fn default_trigger() -> f64 {
    25.0
}

impl Motion {
    /// Translation of the obstacle at time `t`.
    pub fn offset(&self, t: f64) -> Vec2 {
        match self.triggered_at {
            Some(t0) if t > t0 => Vec2::new(self.velocity[0], self.velocity[1]) * (t - t0),
            _ => Vec2::zeros(),
        }
    }

    pub fn speed(&self) -> f64 {
        (self.velocity[0].powi(2) + self.velocity[1].powi(2)).sqrt()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObstacleSpec {
    pub surface: Surface,
    /// Repulsive level (< 0): the repulsive boundary is `{phi = c}`.
    pub c: f64,
    /// Circulation direction of the repulsive field, +1 or -1.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Convergence gain toward the repulsive boundary.
    #[serde(default = "default_gain")]
    pub k_r: f64,
    /// Bump sharpness outside / inside the reactive boundary.
    #[serde(default = "default_gain")]
    pub l1: f64,
    #[serde(default = "default_gain")]
    pub l2: f64,
    /// `Some(i)`: this is a virtual obstacle buffering physical obstacle
    /// `i`; it damps the path term instead of blending a repulsive term the
    /// usual way.
    #[serde(default)]
    pub virtual_of: Option<usize>,
    /// Damping sharpness of a virtual obstacle's buffer factor.
    #[serde(default = "default_gain")]
    pub k_c: f64,
    #[serde(default)]
    pub motion: Option<Motion>,
}

fn default_gamma() -> f64 {
    1.0
}
fn default_gain() -> f64 {
    1.0
}

impl ObstacleSpec {
    pub fn is_virtual(&self) -> bool {
        self.virtual_of.is_some()
    }

    /// Current translation offset at time `t` (zero for static obstacles).
    pub fn offset(&self, t: f64) -> Vec2 {
        self.motion.as_ref().map_or(Vec2::zeros(), |m| m.offset(t))
    }

    /// Field value of the (possibly translated) obstacle surface at `p`.
    pub fn eval(&self, p: Vec2, t: f64) -> f64 {
        self.surface.eval(p - self.offset(t))
    }

    /// Gradient of the translated surface at `p` (translation does not
    /// rotate the gradient).
    pub fn gradient(&self, p: Vec2, t: f64) -> Vec2 {
        self.surface.gradient(p - self.offset(t))
    }

    /// Geometric center at time `t`.
    pub fn center(&self, t: f64) -> Option<Vec2> {
        self.surface.center().map(|c| c + self.offset(t))
    }

    fn validate(&self, index: usize, n: usize) -> Result<(), FieldError> {
        let err = |msg: String| Err(FieldError::Config(format!("obstacle {index}: {msg}")));
        if !(self.c < 0.0) {
            return err(format!("repulsive level must be negative, got {}", self.c));
        }
        if self.surface.is_closed() && self.surface.boundary_point(self.c, 0.0).is_none() {
            return err(format!("repulsive level {} empties the level set", self.c));
        }
        if (self.gamma.abs() - 1.0).abs() > 1e-12 {
            return err(format!("gamma must be +1 or -1, got {}", self.gamma));
        }
        if !(self.k_r > 0.0 && self.l1 > 0.0 && self.l2 > 0.0) {
            return err("gains k_r, l1, l2 must be positive".into());
        }
        if let Some(anchor) = self.virtual_of {
            if anchor >= n {
                return err(format!("anchor {anchor} out of range ({n} obstacles)"));
            }
            if anchor == index {
                return err("virtual obstacle cannot anchor itself".into());
            }
            if !(self.k_c > 0.0) {
                return err("virtual obstacle needs k_c > 0".into());
            }
            if self.motion.is_some() {
                return err("virtual obstacles are planner constructs and cannot move".into());
            }
        }
        Ok(())
    }
}

/// Validate every obstacle of a scene plus cross-references: anchors must
/// point at physical (non-virtual) obstacles.
pub fn validate_obstacle_set(obstacles: &[ObstacleSpec]) -> Result<(), FieldError> {
    for (i, o) in obstacles.iter().enumerate() {
        o.validate(i, obstacles.len())?;
        if let Some(a) = o.virtual_of {
            if obstacles[a].is_virtual() {
                return Err(FieldError::Config(format!(
                    "obstacle {i}: anchor {a} is itself virtual"
                )));
            }
        }
    }
    Ok(())
}

/// Check the placement rule for virtual obstacles by sampling the path: any
/// path point inside a virtual obstacle's repulsive region must lie inside
/// its anchor's reactive region, so that the damped path term is only ever
/// removed where the physical avoidance term takes over.
pub fn validate_virtual_placement(
    path: &Surface,
    obstacles: &[ObstacleSpec],
    x_range: (f64, f64),
    n_samples: usize,
) -> Result<(), FieldError> {
    let samples = sample_path(path, x_range, n_samples);
    for (i, o) in obstacles.iter().enumerate() {
        let Some(anchor) = o.virtual_of else { continue };
        for &p in &samples {
            // Interior of the virtual repulsive region.
            if o.surface.eval(p) < o.c && !(obstacles[anchor].surface.eval(p) < 0.0) {
                return Err(FieldError::Config(format!(
                    "virtual obstacle {i} covers path point ({:.2}, {:.2}) outside anchor {anchor}'s reactive region",
                    p.x, p.y
                )));
            }
        }
    }
    Ok(())
}

fn sample_path(path: &Surface, x_range: (f64, f64), n: usize) -> Vec<Vec2> {
    let mut pts = Vec::with_capacity(n);
    match path {
        Surface::Circle { .. } | Surface::Ellipse { .. } => {
            for i in 0..n {
                let th = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                if let Some(p) = path.boundary_point(0.0, th) {
                    pts.push(p);
                }
            }
        }
        Surface::Line { point, normal } => {
            // Tangent direction of the line.
            let nv = Vec2::new(normal[0], normal[1]).normalize();
            let tangent = Vec2::new(-nv.y, nv.x);
            let p0 = Vec2::new(point[0], point[1]);
            let half = 0.5 * (x_range.1 - x_range.0);
            for i in 0..n {
                let s = -half + (x_range.1 - x_range.0) * i as f64 / (n - 1).max(1) as f64;
                pts.push(p0 + tangent * s);
            }
        }
        Surface::Polynomial { coeffs } => {
            for i in 0..n {
                let x = x_range.0 + (x_range.1 - x_range.0) * i as f64 / (n - 1).max(1) as f64;
                let y = coeffs
                    .iter()
                    .rev()
                    .fold(0.0, |acc: f64, &c| acc.mul_add(x, c));
                pts.push(Vec2::new(x, y));
            }
        }
    }
    pts
}
