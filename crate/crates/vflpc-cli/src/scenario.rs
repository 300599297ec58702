//! Scenario files: one TOML document describing the plant, the path and
//! obstacle course, the model-fitting recipe, the controller weights, and
//! the episode schedule. Everything a run needs comes from here, so a
//! scenario plus a seed fully determines an episode.

use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;
use vflpc::koopman::Feature;
use vflpc::sim::{NoiseConfig, VehicleParams};
use vflpc::vf::{FieldConfig, ObstacleSpec, Surface};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("scenario parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("scenario invalid: {0}")]
    Invalid(String),
}

/// Ground-truth plant block: physical parameters plus optional additive
/// state noise.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlantBlock {
    pub m: f64,
    pub i_z: f64,
    pub l_f: f64,
    pub l_r: f64,
    pub c_af: f64,
    pub c_ar: f64,
    #[serde(default)]
    pub noise_std: [f64; 6],
}

impl PlantBlock {
    pub fn params(&self) -> VehicleParams {
        VehicleParams {
            m: self.m,
            i_z: self.i_z,
            l_f: self.l_f,
            l_r: self.l_r,
            c_af: self.c_af,
            c_ar: self.c_ar,
            ..VehicleParams::default()
        }
    }

    pub fn noise(&self) -> NoiseConfig {
        NoiseConfig { std: self.noise_std }
    }
}

/// Model-fitting recipe: excitation data generated on the nominal plant,
/// then a ridge-regularized lifted least-squares fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KoopmanBlock {
    #[serde(default = "default_features")]
    pub features: Vec<Feature>,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
    #[serde(default = "default_data_seed")]
    pub data_seed: u64,
    #[serde(default = "default_n_traj")]
    pub n_trajectories: usize,
    #[serde(default = "default_steps_per_traj")]
    pub steps_per_trajectory: usize,
    #[serde(default = "default_v_x_range")]
    pub v_x_range: [f64; 2],
    #[serde(default = "default_psi_range")]
    pub psi_range: [f64; 2],
    #[serde(default = "default_a_x_range")]
    pub a_x_range: [f64; 2],
    #[serde(default = "default_delta_range")]
    pub delta_range: [f64; 2],
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
}

/// Products of heading and velocity states that keep the lifted dynamics
/// near-linear over moderate heading swings: the kinematic rows need
/// `v sin(psi)`-type terms (captured to second order by these monomials)
/// and the tire rows need velocity products.
fn default_features() -> Vec<Feature> {
    let mono = |e: [u32; 6]| Feature::Monomial { exponents: e.to_vec() };
    vec![
        mono([0, 0, 1, 1, 0, 0]), // psi * v_x
        mono([0, 0, 2, 1, 0, 0]), // psi^2 * v_x
        mono([0, 0, 1, 0, 1, 0]), // psi * v_y
        mono([0, 0, 0, 1, 1, 0]), // v_x * v_y
        mono([0, 0, 0, 1, 0, 1]), // v_x * omega
        mono([0, 0, 0, 0, 1, 1]), // v_y * omega
    ]
}

fn default_ridge() -> f64 {
    1e-8
}
fn default_data_seed() -> u64 {
    7
}
fn default_n_traj() -> usize {
    48
}
fn default_steps_per_traj() -> usize {
    60
}
fn default_v_x_range() -> [f64; 2] {
    [3.0, 9.0]
}
fn default_psi_range() -> [f64; 2] {
    [-0.7, 0.7]
}
fn default_a_x_range() -> [f64; 2] {
    [-2.5, 2.5]
}
fn default_delta_range() -> [f64; 2] {
    [-0.35, 0.35]
}
fn default_holdout() -> f64 {
    0.2
}

/// Online residual-learning block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpBlock {
    #[serde(default = "default_true")]
    pub enabled: bool,
    /// Lifted rows the learned disturbance feeds (columns of the residual
    /// injection matrix).
    #[serde(default = "default_b_d_rows")]
    pub b_d_rows: Vec<usize>,
    #[serde(default = "default_n_inducing")]
    pub n_inducing_max: usize,
    #[serde(default = "default_ald_threshold")]
    pub ald_threshold: f64,
    #[serde(default = "default_refresh")]
    pub refresh_every: usize,
    #[serde(default = "default_max_data")]
    pub max_data: usize,
    #[serde(default = "default_min_points")]
    pub min_points: usize,
    #[serde(default = "default_sigma_f0")]
    pub sigma_f0: f64,
    #[serde(default = "default_ell0")]
    pub ell0: f64,
    #[serde(default = "default_sigma_n0")]
    pub sigma_n0: f64,
    #[serde(default = "default_true")]
    pub optimize_hypers: bool,
}

impl Default for GpBlock {
    fn default() -> Self {
        toml::from_str("").expect("all GpBlock fields have defaults")
    }
}

fn default_true() -> bool {
    true
}
fn default_b_d_rows() -> Vec<usize> {
    vec![0, 1, 2, 3, 4, 5]
}
fn default_n_inducing() -> usize {
    30
}
fn default_ald_threshold() -> f64 {
    1e-4
}
fn default_refresh() -> usize {
    50
}
fn default_max_data() -> usize {
    400
}
fn default_min_points() -> usize {
    10
}
fn default_sigma_f0() -> f64 {
    0.05
}
fn default_ell0() -> f64 {
    4.0
}
fn default_sigma_n0() -> f64 {
    1e-3
}

/// Receding-horizon controller block (scalar schema; the pipeline builds
/// the full matrix weights from these diagonals).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RhrlBlock {
    #[serde(default = "default_n_horizon")]
    pub n_horizon: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Diagonal weights on the six physical error states.
    #[serde(default = "default_q_state")]
    pub q_state: [f64; 6],
    /// Diagonal weight shared by all extra lifted coordinates.
    #[serde(default = "default_q_lift")]
    pub q_lift: f64,
    /// Diagonal control-error weights (longitudinal, steering).
    #[serde(default = "default_r")]
    pub r: [f64; 2],
    #[serde(default = "default_eta")]
    pub eta_a: f64,
    #[serde(default = "default_eta")]
    pub eta_c: f64,
    #[serde(default = "default_i_max")]
    pub i_max: usize,
    /// Error-control box (longitudinal, steering).
    #[serde(default = "default_u_b")]
    pub u_b: [f64; 2],
    #[serde(default = "default_tol_w")]
    pub tol_w: f64,
    #[serde(default = "default_kernel_max_centers")]
    pub kernel_max_centers: usize,
    #[serde(default = "default_kernel_ald_threshold")]
    pub kernel_ald_threshold: f64,
    #[serde(default = "default_kernel_seed")]
    pub kernel_seed: u64,
    /// Physical-state perturbation scales used to seed kernel centers.
    #[serde(default = "default_kernel_init_scale")]
    pub kernel_init_scale: [f64; 6],
    /// Solve the Riccati fixed point for the terminal weight (fall back
    /// to Q on failure).
    #[serde(default = "default_true")]
    pub terminal_from_riccati: bool,
}

impl Default for RhrlBlock {
    fn default() -> Self {
        toml::from_str("").expect("all RhrlBlock fields have defaults")
    }
}

fn default_n_horizon() -> usize {
    8
}
fn default_gamma() -> f64 {
    0.98
}
fn default_q_state() -> [f64; 6] {
    [0.5, 2.0, 6.0, 0.8, 0.2, 0.2]
}
fn default_q_lift() -> f64 {
    1e-3
}
fn default_r() -> [f64; 2] {
    [0.3, 8.0]
}
fn default_eta() -> f64 {
    0.8
}
fn default_i_max() -> usize {
    40
}
fn default_u_b() -> [f64; 2] {
    [2.5, 0.35]
}
fn default_tol_w() -> f64 {
    1e-6
}
fn default_kernel_max_centers() -> usize {
    60
}
fn default_kernel_ald_threshold() -> f64 {
    0.05
}
fn default_kernel_seed() -> u64 {
    11
}
fn default_kernel_init_scale() -> [f64; 6] {
    [1.0, 1.0, 0.3, 1.0, 0.5, 0.5]
}

/// Pursuit-evasion barrier block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SafetyBlock {
    #[serde(default = "default_l")]
    pub l: f64,
    #[serde(default = "default_l_safe")]
    pub l_safe: f64,
    #[serde(default = "default_mu_active")]
    pub mu_active: f64,
    /// Evader-speed fallback when the vehicle is at standstill.
    #[serde(default = "default_v_e_fallback")]
    pub v_e_fallback: f64,
}

impl Default for SafetyBlock {
    fn default() -> Self {
        toml::from_str("").expect("all SafetyBlock fields have defaults")
    }
}

fn default_l() -> f64 {
    6.0
}
fn default_l_safe() -> f64 {
    2.0
}
fn default_mu_active() -> f64 {
    1.0
}
fn default_v_e_fallback() -> f64 {
    5.0
}

/// Initial vehicle pose and speed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StartBlock {
    pub x: f64,
    pub y: f64,
    #[serde(default)]
    pub psi: f64,
    pub v_x: f64,
    #[serde(default)]
    pub v_y: f64,
    #[serde(default)]
    pub omega: f64,
}

/// Physical actuator limits applied to the emitted control.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControlLimits {
    #[serde(default = "default_a_x_limits")]
    pub a_x: [f64; 2],
    #[serde(default = "default_delta_limits")]
    pub delta: [f64; 2],
}

impl Default for ControlLimits {
    fn default() -> Self {
        ControlLimits { a_x: default_a_x_limits(), delta: default_delta_limits() }
    }
}

fn default_a_x_limits() -> [f64; 2] {
    [-6.0, 3.0]
}
fn default_delta_limits() -> [f64; 2] {
    [-0.54, 0.54]
}

/// Episode schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunBlock {
    #[serde(default = "default_t_max")]
    pub t_max: f64,
    #[serde(default = "default_dt_plant")]
    pub dt_plant: f64,
    #[serde(default = "default_dt_ctrl")]
    pub dt_ctrl: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub start: StartBlock,
    pub destination: [f64; 2],
    #[serde(default = "default_destination_radius")]
    pub destination_radius: f64,
    #[serde(default = "default_stuck_steps")]
    pub stuck_steps: usize,
    #[serde(default)]
    pub control_limits: ControlLimits,
}

fn default_t_max() -> f64 {
    120.0
}
fn default_dt_plant() -> f64 {
    0.02
}
fn default_dt_ctrl() -> f64 {
    0.1
}
fn default_seed() -> u64 {
    1
}
fn default_destination_radius() -> f64 {
    3.0
}
fn default_stuck_steps() -> usize {
    100
}

/// Metric weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsBlock {
    #[serde(default = "default_metric_weight")]
    pub q1: f64,
    #[serde(default = "default_metric_weight")]
    pub q2: f64,
}

impl Default for MetricsBlock {
    fn default() -> Self {
        MetricsBlock { q1: 1.0, q2: 1.0 }
    }
}

fn default_metric_weight() -> f64 {
    1.0
}

/// One complete scenario document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub plant: PlantBlock,
    /// Plant used to generate model-fitting data; defaults to `plant`.
    #[serde(default)]
    pub nominal_plant: Option<PlantBlock>,
    pub path: Surface,
    pub field: FieldConfig,
    #[serde(default)]
    pub obstacles: Vec<ObstacleSpec>,
    #[serde(default)]
    pub koopman: Option<KoopmanBlock>,
    #[serde(default)]
    pub gp: GpBlock,
    #[serde(default)]
    pub rhrl: RhrlBlock,
    #[serde(default)]
    pub safety: SafetyBlock,
    pub run: RunBlock,
    #[serde(default)]
    pub metrics: MetricsBlock,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Scenario, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let s: Scenario = toml::from_str(&text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn nominal(&self) -> &PlantBlock {
        self.nominal_plant.as_ref().unwrap_or(&self.plant)
    }

    pub fn koopman(&self) -> KoopmanBlock {
        self.koopman.clone().unwrap_or_else(|| {
            toml::from_str("").expect("all KoopmanBlock fields have defaults")
        })
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let err = |m: String| Err(ScenarioError::Invalid(m));
        self.plant
            .params()
            .validate()
            .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        if let Some(n) = &self.nominal_plant {
            n.params().validate().map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        }
        if self.plant.noise_std.iter().any(|&s| s < 0.0) {
            return err("noise stds must be non-negative".into());
        }
        self.field.validate().map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        vflpc::vf::validate_obstacle_set(&self.obstacles)
            .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        vflpc::vf::validate_virtual_placement(
            &self.path,
            &self.obstacles,
            (self.field.grid.x_min, self.field.grid.x_max),
            400,
        )
        .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        let k = self.koopman();
        if !(k.ridge >= 0.0) || !(k.holdout_fraction > 0.0 && k.holdout_fraction < 1.0) {
            return err("koopman ridge must be >= 0 and holdout in (0,1)".into());
        }
        if k.n_trajectories == 0 || k.steps_per_trajectory < 2 {
            return err("koopman data generation needs trajectories of at least 2 steps".into());
        }
        for f in &k.features {
            if let Feature::Monomial { exponents } = f {
                if exponents.len() != 6 {
                    return err("monomial exponents must cover the 6 vehicle states".into());
                }
            }
        }
        if self.gp.b_d_rows.is_empty() || self.gp.n_inducing_max == 0 {
            return err("gp needs at least one residual row and one inducing point".into());
        }
        if self.gp.b_d_rows.iter().any(|&r| r >= 6 + k.features.len()) {
            return err("gp residual row exceeds the lifted dimension".into());
        }
        if self.gp.refresh_every == 0 || self.gp.max_data < self.gp.min_points {
            return err("gp refresh cadence and window sizes are inconsistent".into());
        }
        let r = &self.rhrl;
        if r.n_horizon == 0
            || !(r.gamma > 0.0 && r.gamma <= 1.0)
            || r.q_state.iter().any(|&q| q < 0.0)
            || r.q_lift < 0.0
            || r.r.iter().any(|&v| !(v > 0.0))
            || r.u_b.iter().any(|&v| !(v > 0.0))
            || r.kernel_max_centers == 0
        {
            return err("rhrl block has out-of-range weights or limits".into());
        }
        if !(self.safety.l > 0.0) || self.safety.l_safe < 0.0 || self.safety.mu_active <= 0.0 {
            return err("safety block needs l > 0, l_safe >= 0, mu_active > 0".into());
        }
        let run = &self.run;
        if !(run.t_max > 0.0 && run.dt_plant > 0.0 && run.dt_ctrl > 0.0) {
            return err("run durations must be positive".into());
        }
        let ratio = run.dt_ctrl / run.dt_plant;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio < 1.0 {
            return err("dt_ctrl must be a whole multiple of dt_plant".into());
        }
        if !(run.destination_radius > 0.0) || run.stuck_steps == 0 {
            return err("destination radius and stuck window must be positive".into());
        }
        if run.control_limits.a_x[0] >= run.control_limits.a_x[1]
            || run.control_limits.delta[0] >= run.control_limits.delta[1]
        {
            return err("control limits must be ordered min < max".into());
        }
        if !self.field.grid.contains(vflpc::vf::Vec2::new(run.start.x, run.start.y)) {
            return err("start position lies outside the field grid".into());
        }
        if self.metrics.q1 < 0.0 || self.metrics.q2 < 0.0 {
            return err("metric weights must be non-negative".into());
        }
        Ok(())
    }

    /// Plant substeps per control period.
    pub fn substeps(&self) -> usize {
        (self.run.dt_ctrl / self.run.dt_plant).round() as usize
    }
}

#[cfg(test)]
pub mod tests {
    use super::*;

    pub fn minimal_toml() -> String {
        r#"
name = "test"

[plant]
m = 2257.0
i_z = 3524.9
l_f = 1.33
l_r = 1.81
c_af = 66900.0
c_ar = 62700.0

[path]
kind = "line"
point = [0.0, 0.0]
normal = [0.0, 1.0]

[field]
k_p = 0.6
beta = 0.25
v_d = 6.0
a_max = 4.0
grid = { x_min = -10.0, x_max = 120.0, y_min = -20.0, y_max = 20.0, resolution = 0.25 }

[run]
destination = [100.0, 0.0]
start = { x = 0.0, y = 0.0, v_x = 6.0 }
"#
        .to_string()
    }

    #[test]
    fn minimal_scenario_parses_with_defaults() {
        let s: Scenario = toml::from_str(&minimal_toml()).unwrap();
        s.validate().unwrap();
        assert_eq!(s.substeps(), 5);
        assert_eq!(s.koopman().features.len(), 6);
        assert!(s.gp.enabled);
        assert_eq!(s.rhrl.n_horizon, 8);
        assert!(s.obstacles.is_empty());
        assert_eq!(s.nominal().m, 2257.0);
    }

    #[test]
    fn validation_rejects_bad_blocks() {
        let mut s: Scenario = toml::from_str(&minimal_toml()).unwrap();
        s.run.dt_ctrl = 0.07; // not a multiple of 0.02
        assert!(s.validate().is_err());

        let mut s: Scenario = toml::from_str(&minimal_toml()).unwrap();
        s.rhrl.gamma = 0.0;
        assert!(s.validate().is_err());

        let mut s: Scenario = toml::from_str(&minimal_toml()).unwrap();
        s.gp.b_d_rows = vec![99];
        assert!(s.validate().is_err());

        let mut s: Scenario = toml::from_str(&minimal_toml()).unwrap();
        s.run.start.x = -1000.0; // outside grid
        assert!(s.validate().is_err());

        let mut s: Scenario = toml::from_str(&minimal_toml()).unwrap();
        s.plant.m = -1.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn obstacle_and_mismatch_blocks_round_trip() {
        let extra = r#"
[nominal_plant]
m = 1257.0
i_z = 1524.9
l_f = 1.33
l_r = 1.81
c_af = 8790.0
c_ar = 30400.0

[[obstacles]]
surface = { kind = "circle", center = [40.0, 0.0], radius = 4.0 }
c = -7.0

[[obstacles]]
surface = { kind = "circle", center = [32.0, 2.0], radius = 3.0 }
c = -5.0
virtual_of = 0

[[obstacles]]
surface = { kind = "circle", center = [70.0, 10.0], radius = 4.0 }
c = -7.0
motion = { velocity = [0.0, -1.0], trigger_distance = 25.0 }
"#;
        let s: Scenario = toml::from_str(&(minimal_toml() + extra)).unwrap();
        s.validate().unwrap();
        assert_eq!(s.obstacles.len(), 3);
        assert!(s.obstacles[1].is_virtual());
        assert!(s.obstacles[2].motion.is_some());
        assert_eq!(s.nominal().m, 1257.0);
        assert_eq!(s.plant.m, 2257.0);
    }
}
