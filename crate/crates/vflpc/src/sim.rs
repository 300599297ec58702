//! The evaluation plant: a dynamic bicycle model with linear tires,
//! integrated by classical RK4 with optional additive per-step Gaussian
//! noise, plus bookkeeping for proximity-triggered moving obstacles.
//!
//! States are `[X, Y, psi, v_x, v_y, omega]` (global position, yaw,
//! body-frame velocities, yaw rate); controls are `[a_x, delta_f]`
//! (longitudinal acceleration, front steering angle). The lateral tire
//! terms divide by `v_x`, so below a small speed floor the model degrades
//! to kinematic straight-line motion and reports it via a status flag.

use crate::vf::{ObstacleSpec, Vec2};
use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlantError {
    #[error("invalid vehicle parameters: {0}")]
    Params(String),
    #[error("non-finite state after integration step")]
    Diverged,
}

/// Chassis and tire parameters of the bicycle model. Defaults describe the
/// mid-size sedan used throughout the bundled scenes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct VehicleParams {
    /// Mass (kg).
    pub m: f64,
    /// Yaw moment of inertia (kg m^2).
    pub i_z: f64,
    /// CoG to front axle (m).
    pub l_f: f64,
    /// CoG to rear axle (m).
    pub l_r: f64,
    /// Front / rear cornering stiffness (N/rad).
    pub c_af: f64,
    pub c_ar: f64,
    /// Longitudinal speed below which lateral dynamics are frozen.
    pub v_floor: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        VehicleParams {
            m: 2257.0,
            i_z: 3524.9,
            l_f: 1.33,
            l_r: 1.81,
            c_af: 66900.0,
            c_ar: 62700.0,
            v_floor: 0.1,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<(), PlantError> {
        if !(self.m > 0.0 && self.i_z > 0.0) {
            return Err(PlantError::Params("mass and inertia must be positive".into()));
        }
        if !(self.l_f > 0.0 && self.l_r > 0.0) {
            return Err(PlantError::Params("axle distances must be positive".into()));
        }
        if !(self.c_af > 0.0 && self.c_ar > 0.0) {
            return Err(PlantError::Params("cornering stiffnesses must be positive".into()));
        }
        if !(self.v_floor > 0.0) {
            return Err(PlantError::Params("v_floor must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub v_x: f64,
    pub v_y: f64,
    pub omega: f64,
}

impl VehicleState {
    pub fn as_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&[self.x, self.y, self.psi, self.v_x, self.v_y, self.omega])
    }

    pub fn from_vector(v: &DVector<f64>) -> Self {
        VehicleState {
            x: v[0],
            y: v[1],
            psi: v[2],
            v_x: v[3],
            v_y: v[4],
            omega: v[5],
        }
    }

    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    /// Ground-frame velocity vector.
    pub fn world_velocity(&self) -> Vec2 {
        let (s, c) = self.psi.sin_cos();
        Vec2::new(
            self.v_x * c - self.v_y * s,
            self.v_x * s + self.v_y * c,
        )
    }

    pub fn speed(&self) -> f64 {
        (self.v_x * self.v_x + self.v_y * self.v_y).sqrt()
    }
}

/// Whether the lateral dynamics were active for a derivative evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpeedRegime {
    Dynamic,
    /// `v_x` below the floor: lateral dynamics frozen, longitudinal
    /// kinematics only.
    LowSpeedFallback,
}

/// Continuous-time derivative of the bicycle model.
pub fn bicycle_derivative(
    s: &VehicleState,
    u: [f64; 2],
    p: &VehicleParams,
) -> ([f64; 6], SpeedRegime) {
    let (sin_psi, cos_psi) = s.psi.sin_cos();
    let dx = s.v_x * cos_psi - s.v_y * sin_psi;
    let dy = s.v_x * sin_psi + s.v_y * cos_psi;
    let [a_x, delta_f] = u;
    if s.v_x < p.v_floor {
        // Lateral tire model is singular at standstill: freeze lateral
        // states and accelerate longitudinally.
        return ([dx, dy, s.omega, a_x, 0.0, 0.0], SpeedRegime::LowSpeedFallback);
    }
    let dvx = s.v_y * s.omega + a_x;
    let front_slip = delta_f - (s.v_y + p.l_f * s.omega) / s.v_x;
    let rear_term = (p.l_r * s.omega - s.v_y) / s.v_x;
    let dvy = 2.0 * p.c_af * front_slip / p.m + 2.0 * p.c_ar * rear_term / p.m
        - s.v_x * s.omega;
    let domega =
        2.0 / p.i_z * (p.l_f * p.c_af * front_slip - p.l_r * p.c_ar * rear_term);
    ([dx, dy, s.omega, dvx, dvy, domega], SpeedRegime::Dynamic)
}

/// Per-state standard deviations of additive Gaussian noise applied once
/// per integration step.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct NoiseConfig {
    pub std: [f64; 6],
}

impl NoiseConfig {
    /// The same standard deviation on every state.
    pub fn uniform(sigma: f64) -> Self {
        NoiseConfig { std: [sigma; 6] }
    }

    pub fn is_zero(&self) -> bool {
        self.std.iter().all(|&s| s == 0.0)
    }
}

/// One RK4 step of duration `dt`, then one draw of additive noise (when a
/// noise model and generator are supplied). The reported regime is the
/// worst across the four stage evaluations.
pub fn step(
    s: &VehicleState,
    u: [f64; 2],
    p: &VehicleParams,
    dt: f64,
    noise: Option<(&NoiseConfig, &mut ChaCha20Rng)>,
) -> Result<(VehicleState, SpeedRegime), PlantError> {
    let add = |s: &VehicleState, d: &[f64; 6], h: f64| VehicleState {
        x: s.x + d[0] * h,
        y: s.y + d[1] * h,
        psi: s.psi + d[2] * h,
        v_x: s.v_x + d[3] * h,
        v_y: s.v_y + d[4] * h,
        omega: s.omega + d[5] * h,
    };
    let (k1, r1) = bicycle_derivative(s, u, p);
    let (k2, r2) = bicycle_derivative(&add(s, &k1, dt / 2.0), u, p);
    let (k3, r3) = bicycle_derivative(&add(s, &k2, dt / 2.0), u, p);
    let (k4, r4) = bicycle_derivative(&add(s, &k3, dt), u, p);
    let mut out = *s;
    let fields: [fn(&mut VehicleState) -> &mut f64; 6] = [
        |s| &mut s.x,
        |s| &mut s.y,
        |s| &mut s.psi,
        |s| &mut s.v_x,
        |s| &mut s.v_y,
        |s| &mut s.omega,
    ];
    for (i, f) in fields.iter().enumerate() {
        *f(&mut out) += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    if let Some((cfg, rng)) = noise {
        for (i, f) in fields.iter().enumerate() {
            if cfg.std[i] > 0.0 {
                *f(&mut out) += gaussian(rng) * cfg.std[i];
            }
        }
    }
    let v = out.as_vector();
    if v.iter().any(|x| !x.is_finite()) {
        return Err(PlantError::Diverged);
    }
    let regime = [r1, r2, r3, r4]
        .into_iter()
        .find(|r| *r == SpeedRegime::LowSpeedFallback)
        .unwrap_or(SpeedRegime::Dynamic);
    Ok((out, regime))
}

/// Standard normal draw via Box-Muller (two uniforms per call keeps the
/// stream layout independent of any library distribution internals).
fn gaussian(rng: &mut ChaCha20Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Arm proximity-triggered obstacle motion: any not-yet-triggered mover
/// whose center is within its trigger distance of the robot starts moving
/// at time `t`. Returns how many movers were armed by this call.
pub fn advance_obstacles(obstacles: &mut [ObstacleSpec], robot: Vec2, t: f64) -> usize {
    let mut armed = 0;
    for o in obstacles.iter_mut() {
        let Some(center) = o.center(t) else { continue };
        if let Some(motion) = o.motion.as_mut() {
            if motion.triggered_at.is_none() && (center - robot).norm() < motion.trigger_distance {
                motion.triggered_at = Some(t);
                armed += 1;
            }
        }
    }
    armed
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vf::{Motion, Surface};
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    fn cruise_state(v: f64) -> VehicleState {
        VehicleState { x: 0.0, y: 0.0, psi: 0.0, v_x: v, v_y: 0.0, omega: 0.0 }
    }

    #[test]
    fn straight_rolling_has_pure_longitudinal_dynamics() {
        // No steering, no lateral velocity: only X and v_x rows move.
        let p = VehicleParams::default();
        let (d, regime) = bicycle_derivative(&cruise_state(15.0), [1.5, 0.0], &p);
        assert_eq!(regime, SpeedRegime::Dynamic);
        assert_relative_eq!(d[0], 15.0);
        assert_relative_eq!(d[1], 0.0);
        assert_relative_eq!(d[2], 0.0);
        assert_relative_eq!(d[3], 1.5);
        assert_relative_eq!(d[4], 0.0);
        assert_relative_eq!(d[5], 0.0);
    }

    #[test]
    fn steering_step_produces_consistent_lateral_response() {
        // Hand-evaluated derivative at v_x = 10, delta_f = 0.05, otherwise
        // straight: front slip = 0.05.
        let p = VehicleParams::default();
        let (d, _) = bicycle_derivative(&cruise_state(10.0), [0.0, 0.05], &p);
        let dvy = 2.0 * p.c_af * 0.05 / p.m;
        let domega = 2.0 / p.i_z * (p.l_f * p.c_af * 0.05);
        assert_relative_eq!(d[4], dvy, max_relative = 1e-12);
        assert_relative_eq!(d[5], domega, max_relative = 1e-12);
        assert!(d[4] > 0.0 && d[5] > 0.0);
    }

    #[test]
    fn low_speed_fallback_freezes_lateral_states() {
        let p = VehicleParams::default();
        let s = VehicleState { v_x: 0.05, ..cruise_state(0.0) };
        let (d, regime) = bicycle_derivative(&s, [2.0, 0.3], &p);
        assert_eq!(regime, SpeedRegime::LowSpeedFallback);
        assert_relative_eq!(d[3], 2.0);
        assert_relative_eq!(d[4], 0.0);
        assert_relative_eq!(d[5], 0.0);
    }

    #[test]
    fn rk4_is_fourth_order_on_curved_maneuver() {
        // Richardson check: against a dt/8 reference, halving dt shrinks
        // the endpoint error by ~2^4.
        let p = VehicleParams::default();
        let u = [0.5, 0.04];
        let horizon = 2.0;
        let run = |dt: f64| {
            let mut s = cruise_state(12.0);
            let n = (horizon / dt).round() as usize;
            for _ in 0..n {
                s = step(&s, u, &p, dt, None).unwrap().0;
            }
            s
        };
        let reference = run(0.0025);
        let err = |s: &VehicleState, r: &VehicleState| {
            ((s.x - r.x).powi(2) + (s.y - r.y).powi(2) + (s.psi - r.psi).powi(2)).sqrt()
        };
        let e1 = err(&run(0.02), &reference);
        let e2 = err(&run(0.01), &reference);
        let ratio = e1 / e2;
        assert!(
            (10.0..26.0).contains(&ratio),
            "expected ~16x error reduction, got {ratio:.2} (e1={e1:.3e}, e2={e2:.3e})"
        );
    }

    #[test]
    fn coasting_keeps_longitudinal_speed_bounded() {
        // With u = 0 the only longitudinal term is the lateral coupling
        // v_y * omega, which decays with the (stable) lateral transient:
        // v_x must stay within a small bound of its initial value and the
        // lateral states must die out.
        let p = VehicleParams::default();
        let mut s = VehicleState { v_y: 0.5, omega: 0.1, ..cruise_state(15.0) };
        let mut max_vx: f64 = s.v_x;
        for _ in 0..500 {
            s = step(&s, [0.0, 0.0], &p, 0.01, None).unwrap().0;
            max_vx = max_vx.max(s.v_x);
        }
        assert!(max_vx <= 15.0 + 0.05, "v_x grew to {max_vx}");
        assert!(s.v_y.abs() < 1e-3 && s.omega.abs() < 1e-3, "lateral transient persisted");
    }

    #[test]
    fn seeded_noise_is_reproducible_and_zero_noise_is_deterministic() {
        let p = VehicleParams::default();
        let cfg = NoiseConfig::uniform(0.002);
        let run = |seed: u64| {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let mut s = cruise_state(10.0);
            for _ in 0..50 {
                s = step(&s, [0.3, 0.01], &p, 0.02, Some((&cfg, &mut rng))).unwrap().0;
            }
            s
        };
        assert_eq!(run(7).as_vector(), run(7).as_vector());
        assert_ne!(run(7).as_vector(), run(8).as_vector());
        let clean = step(&cruise_state(10.0), [0.3, 0.01], &p, 0.02, None).unwrap().0;
        let clean2 = step(&cruise_state(10.0), [0.3, 0.01], &p, 0.02, None).unwrap().0;
        assert_eq!(clean.as_vector(), clean2.as_vector());
    }

    #[test]
    fn movers_arm_only_within_trigger_distance() {
        let mut obstacles = vec![ObstacleSpec {
            surface: Surface::Circle { center: [30.0, 0.0], radius: 2.0 },
            c: -2.0,
            gamma: 1.0,
            k_r: 1.0,
            l1: 1.0,
            l2: 1.0,
            virtual_of: None,
            k_c: 1.0,
            motion: Some(Motion {
                velocity: [0.0, 1.0],
                trigger_distance: 25.0,
                triggered_at: None,
            }),
        }];
        // Robot 30 m away: stays frozen.
        assert_eq!(advance_obstacles(&mut obstacles, Vec2::zeros(), 1.0), 0);
        assert!(obstacles[0].motion.as_ref().unwrap().triggered_at.is_none());
        assert_eq!(obstacles[0].offset(5.0), Vec2::zeros());
        // Robot within 25 m: arms at the current instant and moves from
        // then on.
        assert_eq!(advance_obstacles(&mut obstacles, Vec2::new(10.0, 0.0), 2.0), 1);
        assert_eq!(obstacles[0].motion.as_ref().unwrap().triggered_at, Some(2.0));
        let off = obstacles[0].offset(4.5);
        assert_relative_eq!(off.y, 2.5);
        // Second call does not re-arm.
        assert_eq!(advance_obstacles(&mut obstacles, Vec2::new(10.0, 0.0), 3.0), 0);
    }
}
