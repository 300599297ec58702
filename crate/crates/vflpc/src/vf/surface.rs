//! Implicit planar surfaces: smooth scalar fields whose zero level set is a
//! path or an obstacle boundary. Positive outside, negative inside (for
//! closed shapes); paths use sign to pick a travel side.

use super::Vec2;
use nalgebra::Matrix2;
use serde::{Deserialize, Serialize};

/// A twice-differentiable scalar field `phi: R^2 -> R`.
///
/// The same type serves both roles in the planner: the desired path is the
/// zero level of one surface, and each obstacle's reactive boundary is the
/// zero level of its own. Closed shapes (circle, ellipse) also expose a
/// boundary parameterization so level sets can be sampled and searched.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Surface {
    /// `phi = (x-cx)^2 + (y-cy)^2 - radius^2`
    Circle { center: [f64; 2], radius: f64 },
    /// `phi = (x'/a)^2 + (y'/b)^2 - 1` in body axes rotated by `rotation`.
    Ellipse {
        center: [f64; 2],
        semi_axes: [f64; 2],
        #[serde(default)]
        rotation: f64,
    },
    /// `phi = normal . (p - point)`, with `normal` normalized on use.
    Line { point: [f64; 2], normal: [f64; 2] },
    /// `phi = y - sum_i coeffs[i] * x^i` — a polynomial graph path.
    Polynomial { coeffs: Vec<f64> },
}

impl Surface {
    pub fn eval(&self, p: Vec2) -> f64 {
        match self {
            Surface::Circle { center, radius } => {
                let dx = p.x - center[0];
                let dy = p.y - center[1];
                dx * dx + dy * dy - radius * radius
            }
            Surface::Ellipse {
                center,
                semi_axes,
                rotation,
            } => {
                let b = body_frame(p, center, *rotation);
                (b.x / semi_axes[0]).powi(2) + (b.y / semi_axes[1]).powi(2) - 1.0
            }
            Surface::Line { point, normal } => {
                let n = unit(normal);
                n.x * (p.x - point[0]) + n.y * (p.y - point[1])
            }
            Surface::Polynomial { coeffs } => p.y - polyval(coeffs, p.x),
        }
    }

    pub fn gradient(&self, p: Vec2) -> Vec2 {
        match self {
            Surface::Circle { center, .. } => {
                Vec2::new(2.0 * (p.x - center[0]), 2.0 * (p.y - center[1]))
            }
            Surface::Ellipse {
                center,
                semi_axes,
                rotation,
            } => {
                let b = body_frame(p, center, *rotation);
                let gb = Vec2::new(
                    2.0 * b.x / (semi_axes[0] * semi_axes[0]),
                    2.0 * b.y / (semi_axes[1] * semi_axes[1]),
                );
                // Chain rule back through the body-frame rotation.
                let (s, c) = rotation.sin_cos();
                Vec2::new(c * gb.x - s * gb.y, s * gb.x + c * gb.y)
            }
            Surface::Line { normal, .. } => unit(normal),
            Surface::Polynomial { coeffs } => Vec2::new(-polyval_deriv(coeffs, p.x), 1.0),
        }
    }

    /// Analytic second derivatives (available for every shape here).
    pub fn hessian(&self, p: Vec2) -> Matrix2<f64> {
        match self {
            Surface::Circle { .. } => Matrix2::identity() * 2.0,
            Surface::Ellipse {
                semi_axes,
                rotation,
                ..
            } => {
                let d = Matrix2::new(
                    2.0 / (semi_axes[0] * semi_axes[0]),
                    0.0,
                    0.0,
                    2.0 / (semi_axes[1] * semi_axes[1]),
                );
                let (s, c) = rotation.sin_cos();
                let r = Matrix2::new(c, -s, s, c);
                r * d * r.transpose()
            }
            Surface::Line { .. } => Matrix2::zeros(),
            Surface::Polynomial { coeffs } => {
                Matrix2::new(-polyval_deriv2(coeffs, p.x), 0.0, 0.0, 0.0)
            }
        }
    }

    /// Geometric center for shapes that have one (used for obstacle motion
    /// and pursuer bookkeeping).
    pub fn center(&self) -> Option<Vec2> {
        match self {
            Surface::Circle { center, .. } | Surface::Ellipse { center, .. } => {
                Some(Vec2::new(center[0], center[1]))
            }
            _ => None,
        }
    }

    /// A point on the level set `{phi = level}` at parameter `theta`, for
    /// shapes with a closed parameterization. `None` when the level set is
    /// empty or the shape is unbounded.
    pub fn boundary_point(&self, level: f64, theta: f64) -> Option<Vec2> {
        match self {
            Surface::Circle { center, radius } => {
                let r2 = radius * radius + level;
                if r2 <= 0.0 {
                    return None;
                }
                let r = r2.sqrt();
                Some(Vec2::new(
                    center[0] + r * theta.cos(),
                    center[1] + r * theta.sin(),
                ))
            }
            Surface::Ellipse {
                center,
                semi_axes,
                rotation,
            } => {
                let s2 = 1.0 + level;
                if s2 <= 0.0 {
                    return None;
                }
                let scale = s2.sqrt();
                let bx = semi_axes[0] * scale * theta.cos();
                let by = semi_axes[1] * scale * theta.sin();
                let (s, c) = rotation.sin_cos();
                Some(Vec2::new(
                    center[0] + c * bx - s * by,
                    center[1] + s * bx + c * by,
                ))
            }
            _ => None,
        }
    }

    /// Whether the surface encloses a bounded region.
    pub fn is_closed(&self) -> bool {
        matches!(self, Surface::Circle { .. } | Surface::Ellipse { .. })
    }
}

/// Nearest point on `{phi = level}` to `query`, with its distance.
///
/// Circles and lines are solved exactly; ellipses by a dense angular seed
/// plus golden-section refinement; polynomial graphs by sampling a window
/// around the query abscissa and refining. Returns `None` when the level
/// set is empty.
pub fn nearest_boundary_point(surface: &Surface, level: f64, query: Vec2) -> Option<(Vec2, f64)> {
    match surface {
        Surface::Circle { center, radius } => {
            let r2 = radius * radius + level;
            if r2 <= 0.0 {
                return None;
            }
            let r = r2.sqrt();
            let c = Vec2::new(center[0], center[1]);
            let d = query - c;
            let n = d.norm();
            // Query at the exact center: every boundary point ties; pick
            // theta = 0 for determinism.
            let dir = if n < 1e-12 { Vec2::new(1.0, 0.0) } else { d / n };
            let p = c + dir * r;
            Some((p, (query - p).norm()))
        }
        Surface::Line { point, normal } => {
            let n = unit(normal);
            let signed = n.x * (query.x - point[0]) + n.y * (query.y - point[1]) - level;
            let p = query - n * signed;
            Some((p, signed.abs()))
        }
        Surface::Ellipse { .. } => {
            let f = |theta: f64| {
                let p = surface.boundary_point(level, theta)?;
                Some(((query - p).norm(), p))
            };
            f(0.0)?; // level set must be non-empty
            let mut best = (f64::INFINITY, 0.0);
            let n_seed = 64;
            for i in 0..n_seed {
                let th = 2.0 * std::f64::consts::PI * i as f64 / n_seed as f64;
                let (d, _) = f(th).unwrap();
                if d < best.0 {
                    best = (d, th);
                }
            }
            // Golden-section refinement in the bracket around the best seed.
            let span = 2.0 * std::f64::consts::PI / n_seed as f64;
            let (mut lo, mut hi) = (best.1 - span, best.1 + span);
            let phi = (5f64.sqrt() - 1.0) / 2.0;
            for _ in 0..60 {
                let a = hi - phi * (hi - lo);
                let b = lo + phi * (hi - lo);
                if f(a).unwrap().0 < f(b).unwrap().0 {
                    hi = b;
                } else {
                    lo = a;
                }
            }
            let (d, p) = f(0.5 * (lo + hi)).unwrap();
            Some((p, d))
        }
        Surface::Polynomial { coeffs } => {
            // y = poly(x) + level; search x in a window around the query.
            let y_of = |x: f64| polyval(coeffs, x) + level;
            let dist2 = |x: f64| {
                let dx = x - query.x;
                let dy = y_of(x) - query.y;
                dx * dx + dy * dy
            };
            let (half_w, n_seed) = (40.0, 161);
            let mut best = (f64::INFINITY, query.x);
            for i in 0..n_seed {
                let x = query.x - half_w + 2.0 * half_w * i as f64 / (n_seed - 1) as f64;
                let d = dist2(x);
                if d < best.0 {
                    best = (d, x);
                }
            }
            let step = 2.0 * half_w / (n_seed - 1) as f64;
            let (mut lo, mut hi) = (best.1 - step, best.1 + step);
            let phi = (5f64.sqrt() - 1.0) / 2.0;
            for _ in 0..80 {
                let a = hi - phi * (hi - lo);
                let b = lo + phi * (hi - lo);
                if dist2(a) < dist2(b) {
                    hi = b;
                } else {
                    lo = a;
                }
            }
            let x = 0.5 * (lo + hi);
            let p = Vec2::new(x, y_of(x));
            Some((p, (query - p).norm()))
        }
    }
}

fn body_frame(p: Vec2, center: &[f64; 2], rotation: f64) -> Vec2 {
    let (s, c) = rotation.sin_cos();
    let dx = p.x - center[0];
    let dy = p.y - center[1];
    Vec2::new(c * dx + s * dy, -s * dx + c * dy)
}

fn unit(v: &[f64; 2]) -> Vec2 {
    let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
    Vec2::new(v[0] / n, v[1] / n)
}

fn polyval(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

fn polyval_deriv(coeffs: &[f64], x: f64) -> f64 {
    coeffs
        .iter()
        .enumerate()
        .skip(1)
        .rev()
        .fold(0.0, |acc, (i, &c)| acc * x + i as f64 * c)
}

fn polyval_deriv2(coeffs: &[f64], x: f64) -> f64 {
    coeffs
        .iter()
        .enumerate()
        .skip(2)
        .rev()
        .fold(0.0, |acc, (i, &c)| acc * x + (i * (i - 1)) as f64 * c)
}
