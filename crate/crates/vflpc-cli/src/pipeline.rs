//! The end-to-end pipeline: excitation-data generation and model fitting
//! on the nominal plant, guiding-field planning, and the closed control
//! loop — per cycle: barrier switch, receding-horizon solve on the lifted
//! error dynamics, plant stepping, and online residual learning.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::time::Instant;
use thiserror::Error;

use crate::metrics::{compute_metrics, MetricsError, MetricsReport, RunRecord};
use crate::scenario::{ControlLimits, Scenario, ScenarioError};
use vflpc::gp::{
    ald_select_indices, ald_sparsify, compensated_step, gp_input, gp_input_from_lifted,
    linearize_lifted, optimize_hyperparams, residual_target, selection_matrix, GpDataset, GpError,
    GpHyperparams, HyperOptConfig, SparseGp,
};
use vflpc::koopman::{
    evaluate, fit_edmd, KoopmanModel, ModelError, ObservableDictionary, ResidualReport, Snapshot,
    TrajectoryDataset,
};
use vflpc::lpc::{
    actor_eval, rhrl_solve, saturate_open, terminal_penalty, warm_start_shift, HorizonModel,
    HorizonState, KernelFeatureSet, LpcError, RhrlConfig,
};
use vflpc::safety::{select_mu, BarrierConfig, GameGeometry, MuDecision};
use vflpc::sim::{advance_obstacles, step as plant_step, PlantError, VehicleState};
use vflpc::vf::{
    integrate_trajectory, nearest_boundary_point, precompute_grid, wrap_angle, FieldError,
    GuidingTrajectory, ObstacleSpec, Vec2,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("scenario: {0}")]
    Scenario(#[from] ScenarioError),
    #[error("model fit: {0}")]
    Model(#[from] ModelError),
    #[error("field planning: {0}")]
    Field(#[from] FieldError),
    #[error("residual learning: {0}")]
    Gp(#[from] GpError),
    #[error("controller: {0}")]
    Lpc(#[from] LpcError),
    #[error("plant: {0}")]
    Plant(#[from] PlantError),
    #[error("metrics: {0}")]
    Metrics(#[from] MetricsError),
    #[error("control step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<PipelineError>,
    },
    #[error("no progress for {0} consecutive control steps")]
    Stuck(usize),
    #[error("episode exceeded t_max = {0} s before reaching the destination")]
    Timeout(f64),
    #[error("guiding trajectory too short to follow")]
    PlanTooShort,
}

fn at_step<E: Into<PipelineError>>(step: usize) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError::Step { step, source: Box::new(e.into()) }
}

/// Generate seeded excitation data on the nominal plant: smoothed random
/// control walks from randomized initial speeds and headings, recorded at
/// the control period (noise off — the learned operator is the clean
/// nominal model; the online stage learns what the real plant does
/// differently).
pub fn generate_training_data(scenario: &Scenario) -> Result<TrajectoryDataset, PipelineError> {
    let k = scenario.koopman();
    let params = scenario.nominal().params();
    let mut rng = ChaCha20Rng::seed_from_u64(k.data_seed);
    let substeps = scenario.substeps();
    let dt_plant = scenario.run.dt_plant;
    let uni = |rng: &mut ChaCha20Rng, range: [f64; 2]| rng.gen_range(range[0]..=range[1]);
    let mut trajectories = Vec::with_capacity(k.n_trajectories);
    for _ in 0..k.n_trajectories {
        let mut state = VehicleState {
            x: 0.0,
            y: 0.0,
            psi: uni(&mut rng, k.psi_range),
            v_x: uni(&mut rng, k.v_x_range),
            v_y: uni(&mut rng, [-0.3, 0.3]),
            omega: uni(&mut rng, [-0.3, 0.3]),
        };
        let mut a_x = 0.0;
        let mut delta = 0.0;
        let mut snaps = Vec::with_capacity(k.steps_per_trajectory);
        for _ in 0..k.steps_per_trajectory {
            a_x = 0.7 * a_x + 0.3 * uni(&mut rng, k.a_x_range);
            delta = 0.7 * delta + 0.3 * uni(&mut rng, k.delta_range);
            let u = [a_x, delta];
            let before = state;
            for _ in 0..substeps {
                let (next, _) = plant_step(&state, u, &params, dt_plant, None)?;
                state = next;
            }
            snaps.push(Snapshot {
                x: before.as_vector(),
                u: DVector::from_column_slice(&u),
                x_next: state.as_vector(),
            });
        }
        trajectories.push(snaps);
    }
    Ok(TrajectoryDataset { trajectories, dt: scenario.run.dt_ctrl })
}

/// Fit the lifted linear model on generated data; returns the model and
/// its held-out residual report.
pub fn fit_model(scenario: &Scenario) -> Result<(KoopmanModel, ResidualReport), PipelineError> {
    let k = scenario.koopman();
    let data = generate_training_data(scenario)?;
    let dict = ObservableDictionary { n_x: 6, features: k.features.clone() };
    let (train, holdout) = data.split(1.0 - k.holdout_fraction);
    let (model, _) = fit_edmd(&train, &dict, k.ridge)?;
    let report = evaluate(&model, &holdout)?;
    Ok((model, report))
}

/// A planned guiding trajectory with its cumulative arc table.
pub struct PlannedPath {
    pub traj: GuidingTrajectory,
    pub cum_arc: Vec<f64>,
}

impl PlannedPath {
    fn new(traj: GuidingTrajectory) -> Result<Self, PipelineError> {
        if traj.points.len() < 3 {
            return Err(PipelineError::PlanTooShort);
        }
        let mut cum = Vec::with_capacity(traj.points.len());
        let mut s = 0.0;
        cum.push(0.0);
        for w in traj.points.windows(2) {
            s += (w[1] - w[0]).norm();
            cum.push(s);
        }
        Ok(PlannedPath { traj, cum_arc: cum })
    }

    pub fn arc_length(&self) -> f64 {
        *self.cum_arc.last().unwrap()
    }

    /// Nearest-sample progress update, searched monotonically in a
    /// forward window from the previous index.
    fn advance_progress(&self, pos: Vec2, from_idx: usize, window: usize) -> usize {
        let hi = (from_idx + window).min(self.traj.points.len() - 1);
        let mut best = from_idx;
        let mut best_d = (self.traj.points[from_idx] - pos).norm();
        for i in from_idx + 1..=hi {
            let d = (self.traj.points[i] - pos).norm();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    /// Signed lateral and heading error against the segment at `idx`.
    fn frenet_errors(&self, idx: usize, pos: Vec2, psi: f64) -> (f64, f64) {
        let seg = idx.min(self.traj.points.len() - 2);
        let p0 = self.traj.points[seg];
        let tangent = self.traj.points[seg + 1] - p0;
        let len = tangent.norm();
        if len == 0.0 {
            return (0.0, 0.0);
        }
        let t = tangent / len;
        let d = pos - p0;
        let e_y = t.x * d.y - t.y * d.x;
        let e_psi = wrap_angle(psi - t.y.atan2(t.x));
        (e_y, e_psi)
    }
}

/// Plan the guiding trajectory at time `t` from `start`, truncated at the
/// first sample inside the destination circle.
pub fn plan_guiding(
    scenario: &Scenario,
    obstacles: &[ObstacleSpec],
    t: f64,
    start: Vec2,
) -> Result<PlannedPath, PipelineError> {
    let cfg = &scenario.field;
    let grid = precompute_grid(&scenario.path, obstacles, cfg, t)?;
    let span = (cfg.grid.x_max - cfg.grid.x_min) + (cfg.grid.y_max - cfg.grid.y_min);
    let n_steps = ((2.5 * span / cfg.beta).ceil() as usize).clamp(10, 200_000);
    // Smooth out the per-cell direction quantization before planning speeds:
    // one meter of arc per window side.
    let half = ((1.0 / cfg.beta).ceil() as usize).max(1);
    let mut traj = integrate_trajectory(&grid, cfg, start, n_steps)?
        .smoothed(half, cfg)
        .smoothed(half, cfg);
    let dest = Vec2::new(scenario.run.destination[0], scenario.run.destination[1]);
    if let Some(cut) = traj
        .points
        .iter()
        .position(|p| (p - dest).norm() <= scenario.run.destination_radius)
    {
        let keep = (cut + 1).max(3).min(traj.points.len());
        traj.points.truncate(keep);
        traj.speeds.truncate(keep);
        traj.curvatures.truncate(keep);
    }
    PlannedPath::new(traj)
}

/// Stage references along the plan: raw states, lifted states, reference
/// controls, positions, and the per-stage reference-consistency residual
/// `A lift(x_r) + B u_r - lift(x_r')` that the lifted error dynamics
/// inherit when the (kinematic) reference is not an exact model rollout.
struct StageRefs {
    lift_r: Vec<DVector<f64>>,
    u_r: Vec<DVector<f64>>,
    pos: Vec<Vec2>,
    ref_residual: Vec<DVector<f64>>,
}

fn build_stage_refs(
    plan: &PlannedPath,
    model: &KoopmanModel,
    wheelbase: f64,
    s0: f64,
    n_horizon: usize,
    dt: f64,
    v_ref_floor: f64,
    limits: &ControlLimits,
) -> StageRefs {
    let n = n_horizon;
    let mut lift_r = Vec::with_capacity(n + 1);
    let mut u_r = Vec::with_capacity(n + 1);
    let mut pos = Vec::with_capacity(n + 1);
    let mut raw = Vec::with_capacity(n + 1);
    let mut s = s0;
    let mut speeds = Vec::with_capacity(n + 1);
    for _ in 0..=n {
        let smp = plan.traj.sample_at_arc(s);
        let v = smp.speed.max(v_ref_floor);
        let x_r = DVector::from_column_slice(&[
            smp.position.x,
            smp.position.y,
            smp.heading,
            v,
            0.0,
            smp.curvature * v,
        ]);
        let delta_r = (smp.curvature * wheelbase).atan();
        u_r.push(DVector::from_column_slice(&[0.0, delta_r]));
        lift_r.push(model.dict.lift(&x_r));
        pos.push(smp.position);
        speeds.push(v);
        raw.push(x_r);
        s += v * dt;
    }
    // Longitudinal feedforward from the speed profile differences.
    for tau in 0..n {
        u_r[tau][0] = (speeds[tau + 1] - speeds[tau]) / dt;
    }
    u_r[n][0] = if n > 0 { u_r[n - 1][0] } else { 0.0 };
    // Keep the feedforward inside the actuator range: a reference outside
    // it would pin the applied control at a limit regardless of feedback
    // (the increment is bounded), leaving no authority to stabilize. The
    // consistency bracket below is computed from the clamped values, so
    // the rolled references remain exact.
    for u in &mut u_r {
        u[0] = u[0].clamp(limits.a_x[0], limits.a_x[1]);
        u[1] = u[1].clamp(limits.delta[0], limits.delta[1]);
    }
    let mut ref_residual = Vec::with_capacity(n);
    for tau in 0..n {
        ref_residual.push(&model.a * &lift_r[tau] + &model.b * &u_r[tau] - &lift_r[tau + 1]);
    }
    StageRefs { lift_r, u_r, pos, ref_residual }
}

/// The lifted error dynamics the per-cycle solver rolls: nominal operator
/// plus learned residual, walked along the stage references, with the
/// barrier frozen to this cycle's decision.
struct ErrorModel<'a> {
    model: &'a KoopmanModel,
    gp: &'a SparseGp,
    refs: &'a StageRefs,
    mu: f64,
    x_p: Option<Vec2>,
}

impl HorizonModel for ErrorModel<'_> {
    fn n_k(&self) -> usize {
        self.model.dict.dim()
    }

    fn n_u(&self) -> usize {
        self.model.n_u
    }

    fn step(&self, tau: usize, x_tilde: &DVector<f64>, u_tilde: &DVector<f64>) -> DVector<f64> {
        let z = gp_input_from_lifted(&(&self.refs.lift_r[tau] + x_tilde), &(&self.refs.u_r[tau] + u_tilde));
        compensated_step(self.model, self.gp, x_tilde, u_tilde, &z) + &self.refs.ref_residual[tau]
    }

    fn linearize(&self, tau: usize, x_tilde: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        linearize_lifted(
            self.model,
            self.gp,
            &(&self.refs.lift_r[tau] + x_tilde),
            &self.refs.u_r[tau],
        )
    }

    fn barrier(&self, tau: usize, x_tilde: &DVector<f64>) -> (f64, DVector<f64>) {
        let Some(x_p) = self.x_p else {
            return (0.0, DVector::zeros(x_tilde.len()));
        };
        if self.mu == 0.0 {
            return (0.0, DVector::zeros(x_tilde.len()));
        }
        let ref_pos = self.refs.pos[tau];
        let pos = Vec2::new(x_tilde[0] + ref_pos.x, x_tilde[1] + ref_pos.y);
        let value = vflpc::safety::barrier_value(&pos, &x_p, self.mu);
        let (grad, _) = vflpc::safety::barrier_gradient(x_tilde, &ref_pos, &x_p, self.mu);
        (value, grad)
    }
}

/// Signed distance from `pos` to the nearest repulsive boundary across
/// all obstacles at time `t` (positive outside every repulsive region).
pub fn min_repulsive_distance(obstacles: &[ObstacleSpec], pos: Vec2, t: f64) -> Option<f64> {
    let mut min: Option<f64> = None;
    for o in obstacles {
        let local = pos - o.offset(t);
        let Some((_, dist)) = nearest_boundary_point(&o.surface, o.c, local) else {
            continue;
        };
        let signed = if o.surface.eval(local) >= o.c { dist } else { -dist };
        min = Some(match min {
            Some(cur) => cur.min(signed),
            None => signed,
        });
    }
    min
}

/// Initial kernel centers: lifted-error vectors of physical perturbations
/// around reference states sampled along the plan.
fn initial_feature_set(
    scenario: &Scenario,
    model: &KoopmanModel,
    plan: &PlannedPath,
) -> Result<KernelFeatureSet, PipelineError> {
    let r = &scenario.rhrl;
    let mut rng = ChaCha20Rng::seed_from_u64(r.kernel_seed);
    let n_k = model.dict.dim();
    let mut samples = vec![DVector::zeros(n_k)];
    let arcs = 8;
    let per_arc = 5;
    let total = plan.arc_length();
    for i in 0..arcs {
        let s = total * i as f64 / arcs as f64;
        let smp = plan.traj.sample_at_arc(s);
        let v = smp.speed.max(0.3 * scenario.field.v_d);
        let x_r = DVector::from_column_slice(&[
            smp.position.x,
            smp.position.y,
            smp.heading,
            v,
            0.0,
            smp.curvature * v,
        ]);
        let lift_ref = model.dict.lift(&x_r);
        for _ in 0..per_arc {
            let mut x = x_r.clone();
            for d in 0..6 {
                let scale = r.kernel_init_scale[d];
                x[d] += rng.gen_range(-scale..=scale);
            }
            samples.push(model.dict.lift(&x) - &lift_ref);
        }
    }
    let mut fs = KernelFeatureSet::from_samples(&samples, r.kernel_ald_threshold)?;
    if fs.centers.len() > r.kernel_max_centers {
        fs.centers.truncate(r.kernel_max_centers);
    }
    Ok(fs)
}

fn build_rhrl_config(
    scenario: &Scenario,
    model: &KoopmanModel,
) -> Result<RhrlConfig, PipelineError> {
    let r = &scenario.rhrl;
    let n_k = model.dict.dim();
    let mut q_diag = DVector::from_element(n_k, r.q_lift);
    for d in 0..6 {
        q_diag[d] = r.q_state[d];
    }
    let q = DMatrix::from_diagonal(&q_diag);
    let r_mat = DMatrix::from_diagonal(&DVector::from_column_slice(&r.r));
    let p = if r.terminal_from_riccati {
        match terminal_penalty(&model.a, &model.b, &q, &r_mat) {
            Ok(p) => p,
            Err(e) => {
                log::warn!("terminal Riccati fixed point unavailable ({e}); falling back to Q");
                // Q has zero diagonal entries only if configured so; jitter
                // keeps the terminal weight positive definite.
                &q + DMatrix::identity(n_k, n_k) * 1e-9
            }
        }
    } else {
        &q + DMatrix::identity(n_k, n_k) * 1e-9
    };
    let cfg = RhrlConfig {
        n_horizon: r.n_horizon,
        gamma: r.gamma,
        q,
        r: r_mat,
        p,
        eta_a: r.eta_a,
        eta_c: r.eta_c,
        i_max: r.i_max,
        u_b: DVector::from_column_slice(&r.u_b),
        tol_w: r.tol_w,
        loss_guard: 1e6,
        max_backtracks: 5,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Everything an episode produced.
pub struct EpisodeOutput {
    pub records: Vec<RunRecord>,
    pub report: MetricsReport,
    pub fit_report: ResidualReport,
    pub plan: PlannedPath,
}

/// An aborted episode: the cause plus every record produced before the
/// abort, for post-mortem.
pub struct EpisodeFailure {
    pub error: PipelineError,
    pub records: Vec<RunRecord>,
}

/// Run one closed-loop episode of the scenario. `gp_override` forces the
/// online residual learning on or off regardless of the scenario block
/// (the model-mismatch ablation flips it per arm).
pub fn run_episode(
    scenario: &Scenario,
    gp_override: Option<bool>,
) -> Result<EpisodeOutput, Box<EpisodeFailure>> {
    let mut records = Vec::new();
    let fail = |error: PipelineError, records: Vec<RunRecord>| {
        Box::new(EpisodeFailure { error, records })
    };
    match episode_loop(scenario, gp_override, &mut records) {
        Ok((fit_report, plan)) => {
            match compute_metrics(&records, scenario.metrics.q1, scenario.metrics.q2, scenario.rhrl.r)
            {
                Ok(report) => Ok(EpisodeOutput { records, report, fit_report, plan }),
                Err(e) => Err(fail(e.into(), records)),
            }
        }
        Err(e) => Err(fail(e, records)),
    }
}

fn episode_loop(
    scenario: &Scenario,
    gp_override: Option<bool>,
    records: &mut Vec<RunRecord>,
) -> Result<(ResidualReport, PlannedPath), PipelineError> {
    scenario.validate()?;
    let run = &scenario.run;
    let plant = scenario.plant.params();
    let noise = scenario.plant.noise();
    let mut rng = ChaCha20Rng::seed_from_u64(run.seed);
    let gp_enabled = gp_override.unwrap_or(scenario.gp.enabled);

    let (model, fit_report) = fit_model(scenario)?;
    let n_k = model.dict.dim();
    let n_z = n_k + model.n_u;

    let mut obstacles = scenario.obstacles.clone();
    let start_pos = Vec2::new(run.start.x, run.start.y);
    let mut plan = plan_guiding(scenario, &obstacles, 0.0, start_pos)?;

    let cfg = build_rhrl_config(scenario, &model)?;
    let mut fs = initial_feature_set(scenario, &model, &plan)?;
    let mut horizon = HorizonState::zeros(cfg.n_horizon, fs.len(), model.n_u, n_k);

    let b_d = selection_matrix(n_k, &scenario.gp.b_d_rows);
    let n_d = scenario.gp.b_d_rows.len();
    let mut hyper = GpHyperparams::uniform(
        n_d,
        scenario.gp.sigma_f0,
        scenario.gp.ell0,
        scenario.gp.sigma_n0,
    );
    let mut gp = SparseGp::empty(n_z, hyper.clone(), b_d.clone())?;
    let mut gp_data = GpDataset::new(n_z, n_d);
    let mut since_refresh = 0usize;

    let geom = GameGeometry {
        l: scenario.safety.l,
        l_safe: scenario.safety.l_safe,
        v_p: 0.0,
        v_e: scenario.safety.v_e_fallback,
    };
    let barrier_cfg = BarrierConfig { mu_active: scenario.safety.mu_active };

    let mut state = VehicleState {
        x: run.start.x,
        y: run.start.y,
        psi: run.start.psi,
        v_x: run.start.v_x,
        v_y: run.start.v_y,
        omega: run.start.omega,
    };
    let dest = Vec2::new(run.destination[0], run.destination[1]);
    let dt = run.dt_ctrl;
    let substeps = scenario.substeps();
    let wheelbase = plant.l_f + plant.l_r;
    let v_ref_floor = 0.3 * scenario.field.v_d;
    let search_window =
        ((scenario.field.v_d * dt * 3.0 + 3.0) / scenario.field.beta).ceil() as usize;

    let mut progress_idx = 0usize;
    let mut pending: Option<(DVector<f64>, DVector<f64>)> = None;
    let mut stuck_count = 0usize;
    let mut completed = false;
    let max_steps = (run.t_max / dt).ceil() as usize;

    for k in 0..=max_steps {
        let cycle_start = Instant::now();
        let t = k as f64 * dt;
        if t >= run.t_max {
            return Err(PipelineError::Timeout(run.t_max));
        }

        // Ingest the previous transition into the residual learner, and
        // periodically re-select the dictionary / re-fit (counted into
        // this step's solve time — it is part of the controller's work).
        if gp_enabled {
            if let Some((xp, up)) = pending.take() {
                let y = residual_target(&model, &b_d, &xp, &up, &state.as_vector())
                    .map_err(at_step(k))?;
                let z = gp_input(&model, &xp, &up);
                if gp_data.len() >= scenario.gp.max_data {
                    let keep: Vec<usize> = (1..gp_data.len()).collect();
                    gp_data = gp_data.subset(&keep);
                }
                gp_data.push(&z, &y).map_err(at_step(k))?;
                since_refresh += 1;
                if gp_data.len() >= scenario.gp.min_points
                    && since_refresh >= scenario.gp.refresh_every
                {
                    since_refresh = 0;
                    // The novelty threshold is a fraction of the prior
                    // variance so it survives hyperparameter rescaling.
                    let rel = |h: &GpHyperparams| {
                        scenario.gp.ald_threshold * h.dims[0].sigma_f * h.dims[0].sigma_f
                    };
                    if scenario.gp.optimize_hypers {
                        let mut subset = ald_sparsify(&gp_data, &hyper, rel(&hyper));
                        // Marginal-likelihood evaluations are cubic in the
                        // subset size; cap it with the most recent points so
                        // a refresh stays a fraction of the control period.
                        if subset.len() > 60 {
                            let idx: Vec<usize> = (subset.len() - 60..subset.len()).collect();
                            subset = subset.subset(&idx);
                        }
                        if subset.len() >= 5 {
                            // Keep the noise estimate at least a tenth of
                            // its configured starting value: letting it
                            // collapse makes the compensator reproduce
                            // transient residuals verbatim and extrapolate
                            // them into regions they do not describe.
                            let opt_cfg = HyperOptConfig {
                                max_rounds: 15,
                                initial_step: 0.5,
                                min_step: 0.02,
                                sigma_n_floor: 0.1 * scenario.gp.sigma_n0,
                            };
                            let (h, _) = optimize_hyperparams(&subset, &hyper, &opt_cfg)
                                .map_err(at_step(k))?;
                            hyper = h;
                        }
                    }
                    let sel = ald_select_indices(
                        &gp_data.inputs,
                        hyper.dims[0].sigma_f,
                        hyper.dims[0].length_scale,
                        rel(&hyper),
                    );
                    let inducing: Vec<usize> =
                        sel.into_iter().take(scenario.gp.n_inducing_max).collect();
                    if inducing.is_empty() {
                        log::warn!("step {k}: novelty selection kept no inducing points; keeping the previous model");
                    } else {
                        gp = SparseGp::fit(&gp_data, &inducing, &hyper, b_d.clone())
                            .map_err(at_step(k))?;
                    }
                }
            }
        }

        let armed = advance_obstacles(&mut obstacles, state.position(), t);

        // Completion check against the destination circle.
        if (state.position() - dest).norm() <= run.destination_radius {
            completed = true;
            break;
        }

        // Walk progress along the plan; replan when the remaining plan
        // cannot cover the horizon, when a mover just started, or
        // periodically while anything is in motion (the field was frozen
        // at the last plan's timestamp and goes stale as movers displace).
        let prev_idx = progress_idx;
        progress_idx = plan.advance_progress(state.position(), progress_idx, search_window);
        let horizon_arc = (cfg.n_horizon as f64 + 2.0) * scenario.field.v_d * dt;
        let any_moving = obstacles
            .iter()
            .any(|o| o.motion.as_ref().is_some_and(|m| m.triggered_at.is_some()));
        if plan.cum_arc[progress_idx] + horizon_arc >= plan.arc_length()
            || armed > 0
            || (any_moving && k % 10 == 0)
        {
            plan = plan_guiding(scenario, &obstacles, t, state.position())
                .map_err(at_step(k))?;
            progress_idx = plan.advance_progress(state.position(), 0, plan.traj.len());
        }
        if progress_idx == prev_idx && k > 0 {
            stuck_count += 1;
            if stuck_count >= run.stuck_steps {
                return Err(PipelineError::Stuck(run.stuck_steps));
            }
        } else {
            stuck_count = 0;
        }

        let (e_y, e_psi) = plan.frenet_errors(progress_idx, state.position(), state.psi);
        let refs = build_stage_refs(
            &plan,
            &model,
            wheelbase,
            plan.cum_arc[progress_idx],
            cfg.n_horizon,
            dt,
            v_ref_floor,
            &run.control_limits,
        );

        let decision: MuDecision = select_mu(&state, &obstacles, t, &geom, &barrier_cfg);

        let mut x_tilde = model.dict.lift(&state.as_vector()) - &refs.lift_r[0];
        x_tilde[2] = wrap_angle(x_tilde[2]);

        // Online feature dictionary: admit genuinely novel error states
        // and grow the carried stage weights to match.
        if fs.len() < scenario.rhrl.kernel_max_centers
            && fs.admit_if_novel(&x_tilde, scenario.rhrl.kernel_ald_threshold)
        {
            horizon.extend_features(1);
        }

        let warm = if k == 0 { horizon.clone() } else { warm_start_shift(&horizon) };
        let error_model =
            ErrorModel { model: &model, gp: &gp, refs: &refs, mu: decision.mu, x_p: decision.x_p };
        let (u_err, solved, report) =
            rhrl_solve(&error_model, &fs, &x_tilde, warm, &cfg).map_err(at_step(k))?;
        horizon = solved;
        let solve_time = cycle_start.elapsed().as_secs_f64();

        let u_sat = saturate_open(&u_err, &cfg.u_b);
        let lim = &run.control_limits;
        let u_apply = [
            (refs.u_r[0][0] + u_sat[0]).clamp(lim.a_x[0], lim.a_x[1]),
            (refs.u_r[0][1] + u_sat[1]).clamp(lim.delta[0], lim.delta[1]),
        ];

        records.push(RunRecord {
            step: k,
            t,
            state: [state.x, state.y, state.psi, state.v_x, state.v_y, state.omega],
            control: u_apply,
            control_ref: [refs.u_r[0][0], refs.u_r[0][1]],
            mu: decision.mu,
            in_pursuit_region: decision.in_region,
            no_escape: decision.no_escape,
            nearest_obstacle_distance: min_repulsive_distance(&obstacles, state.position(), t),
            e_y,
            e_psi,
            progress: plan.cum_arc[progress_idx],
            solve_time,
            iterations: report.iterations,
            converged: report.converged,
            critic_loss: report.critic_loss,
            actor_loss: report.actor_loss,
            gp_inducing: gp.n_inducing(),
            kernel_centers: fs.len(),
        });

        let x_before = state.as_vector();
        for _ in 0..substeps {
            let noise_arg = if noise.is_zero() { None } else { Some((&noise, &mut rng)) };
            let (next, _) = plant_step(&state, u_apply, &plant, run.dt_plant, noise_arg)
                .map_err(at_step(k))?;
            state = next;
        }
        state.psi = wrap_angle(state.psi);
        pending = Some((x_before, DVector::from_column_slice(&u_apply)));
    }

    if !completed {
        return Err(PipelineError::Timeout(run.t_max));
    }
    Ok((fit_report, plan))
}

/// Convenience wrapper used by the actor-critic stage: emitted control of
/// the current stage-0 policy (exposed for tests and tooling).
pub fn stage0_control(
    horizon: &HorizonState,
    fs: &KernelFeatureSet,
    x_tilde: &DVector<f64>,
    cfg: &RhrlConfig,
) -> DVector<f64> {
    saturate_open(&actor_eval(&horizon.stages[0], fs, x_tilde), &cfg.u_b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn test_scenario() -> Scenario {
        let mut toml = crate::scenario::tests::minimal_toml();
        toml = toml.replace(
            "[run]",
            "[koopman]\nn_trajectories = 4\nsteps_per_trajectory = 20\n\n[run]",
        );
        toml::from_str(&toml).expect("fixture parses")
    }

    fn straight_plan(n: usize, spacing: f64, speed: f64) -> PlannedPath {
        let points: Vec<Vec2> = (0..n).map(|i| Vec2::new(i as f64 * spacing, 0.0)).collect();
        let traj = GuidingTrajectory {
            points,
            speeds: vec![speed; n],
            curvatures: vec![0.0; n],
        };
        PlannedPath::new(traj).expect("plan builds")
    }

    #[test]
    fn planned_path_accumulates_arc_and_rejects_stubs() {
        let traj = GuidingTrajectory {
            points: vec![Vec2::new(0.0, 0.0), Vec2::new(1.0, 0.0), Vec2::new(1.0, 1.0)],
            speeds: vec![1.0; 3],
            curvatures: vec![0.0; 3],
        };
        let plan = PlannedPath::new(traj).unwrap();
        assert_eq!(plan.cum_arc, vec![0.0, 1.0, 2.0]);
        assert_relative_eq!(plan.arc_length(), 2.0);

        let stub = GuidingTrajectory {
            points: vec![Vec2::new(0.0, 0.0), Vec2::new(1.0, 0.0)],
            speeds: vec![1.0; 2],
            curvatures: vec![0.0; 2],
        };
        assert!(matches!(PlannedPath::new(stub), Err(PipelineError::PlanTooShort)));
    }

    #[test]
    fn progress_search_is_clamped_to_the_window() {
        let plan = straight_plan(11, 1.0, 5.0);
        // True nearest is index 7 but the window only reaches index 5.
        assert_eq!(plan.advance_progress(Vec2::new(7.2, 0.0), 2, 3), 5);
        // Within the window the true nearest wins.
        assert_eq!(plan.advance_progress(Vec2::new(3.4, 0.5), 2, 3), 3);
        // Never regresses below the starting index.
        assert_eq!(plan.advance_progress(Vec2::new(0.0, 0.0), 4, 3), 4);
    }

    #[test]
    fn frenet_errors_follow_the_left_positive_convention() {
        let plan = straight_plan(5, 1.0, 5.0);
        let (e_y, e_psi) = plan.frenet_errors(1, Vec2::new(1.5, 0.3), 0.1);
        assert_relative_eq!(e_y, 0.3, epsilon = 1e-12);
        assert_relative_eq!(e_psi, 0.1, epsilon = 1e-12);

        // A path heading +y: a point displaced toward +x is on the right.
        let up = GuidingTrajectory {
            points: vec![Vec2::new(0.0, 0.0), Vec2::new(0.0, 1.0), Vec2::new(0.0, 2.0)],
            speeds: vec![1.0; 3],
            curvatures: vec![0.0; 3],
        };
        let plan_up = PlannedPath::new(up).unwrap();
        let (e_y_up, _) = plan_up.frenet_errors(0, Vec2::new(0.2, 0.5), 0.0);
        assert_relative_eq!(e_y_up, -0.2, epsilon = 1e-12);
    }

    #[test]
    fn repulsive_distance_is_signed_about_the_reactive_boundary() {
        let spec: ObstacleSpec = toml::from_str(
            r#"
surface = { kind = "circle", center = [5.0, 0.0], radius = 2.0 }
c = -3.0
"#,
        )
        .unwrap();
        let obstacles = vec![spec];
        // Reactive boundary: dist^2 = 4 - 3 = 1.
        let outside = min_repulsive_distance(&obstacles, Vec2::new(5.0, 3.0), 0.0).unwrap();
        assert_relative_eq!(outside, 2.0, epsilon = 1e-9);
        let inside = min_repulsive_distance(&obstacles, Vec2::new(5.0, 0.5), 0.0).unwrap();
        assert_relative_eq!(inside, -0.5, epsilon = 1e-9);
        assert!(min_repulsive_distance(&[], Vec2::new(0.0, 0.0), 0.0).is_none());
    }

    #[test]
    fn training_data_is_seeded_and_shaped() {
        let scenario = test_scenario();
        let a = generate_training_data(&scenario).unwrap();
        let b = generate_training_data(&scenario).unwrap();
        assert_eq!(a.trajectories.len(), 4);
        assert!(a.trajectories.iter().all(|t| t.len() == 20));
        assert_eq!(a.dt, scenario.run.dt_ctrl);
        for (ta, tb) in a.trajectories.iter().zip(&b.trajectories) {
            for (sa, sb) in ta.iter().zip(tb) {
                assert_eq!(sa.x, sb.x);
                assert_eq!(sa.u, sb.u);
                assert_eq!(sa.x_next, sb.x_next);
            }
        }
        let mut other = test_scenario();
        other.koopman.as_mut().unwrap().data_seed += 1;
        let c = generate_training_data(&other).unwrap();
        assert_ne!(a.trajectories[0][0].x, c.trajectories[0][0].x);
    }

    #[test]
    fn fitted_model_reports_finite_holdout_residuals() {
        let scenario = test_scenario();
        let (model, report) = fit_model(&scenario).unwrap();
        assert_eq!(model.dict.n_x, 6);
        assert!(model.dict.dim() > 6);
        assert!(report.n_snapshots > 0);
        assert!(report.rmse_lifted.is_finite() && report.rmse_lifted >= 0.0);
        assert!(report.rmse_state.is_finite());
    }

    #[test]
    fn error_model_step_is_consistent_in_absolute_coordinates() {
        let scenario = test_scenario();
        let (model, _) = fit_model(&scenario).unwrap();
        let n_k = model.dict.dim();
        let plan = straight_plan(120, 0.25, 6.0);
        let refs = build_stage_refs(&plan, &model, 3.14, 0.0, 4, 0.1, 1.0, &ControlLimits::default());
        let hyper = GpHyperparams::uniform(2, 0.05, 4.0, 1e-3);
        let b_d = selection_matrix(n_k, &[3, 4]);
        let gp = SparseGp::empty(n_k + 2, hyper, b_d).unwrap();
        let em = ErrorModel { model: &model, gp: &gp, refs: &refs, mu: 0.0, x_p: None };

        let x_tilde = DVector::from_fn(n_k, |i, _| 0.01 * (i as f64 + 1.0));
        let u_tilde = DVector::from_column_slice(&[0.2, -0.05]);
        let stepped = em.step(0, &x_tilde, &u_tilde);
        // Stepping the error must equal stepping the absolute lifted state
        // with the nominal operator, re-expressed about the next reference.
        let absolute = &model.a * (&refs.lift_r[0] + &x_tilde)
            + &model.b * (&refs.u_r[0] + &u_tilde)
            - &refs.lift_r[1];
        assert_relative_eq!((stepped - absolute).norm(), 0.0, epsilon = 1e-10);

        // With an empty GP the linearization is exactly the nominal pair.
        let (a_d, b_ctrl) = em.linearize(0, &x_tilde);
        assert_relative_eq!((a_d - &model.a).norm(), 0.0, epsilon = 1e-12);
        assert_relative_eq!((b_ctrl - &model.b).norm(), 0.0, epsilon = 1e-12);

        // Barrier inactive without a pursuer.
        let (h, grad) = em.barrier(0, &x_tilde);
        assert_eq!(h, 0.0);
        assert_eq!(grad.norm(), 0.0);
    }

    #[test]
    fn stage_references_track_the_plan_forward() {
        let scenario = test_scenario();
        let (model, _) = fit_model(&scenario).unwrap();
        let plan = straight_plan(200, 0.25, 6.0);
        let refs = build_stage_refs(&plan, &model, 3.14, 2.0, 5, 0.1, 1.0, &ControlLimits::default());
        assert_eq!(refs.lift_r.len(), 6);
        assert_eq!(refs.u_r.len(), 6);
        assert_eq!(refs.pos.len(), 6);
        assert_eq!(refs.ref_residual.len(), 5);
        // Positions advance down the straight plan by v * dt = 0.6 m.
        for w in refs.pos.windows(2) {
            assert_relative_eq!(w[1].x - w[0].x, 0.6, epsilon = 1e-9);
            assert_relative_eq!(w[1].y, 0.0, epsilon = 1e-12);
        }
        // Straight constant-speed references need no feedforward.
        for u in &refs.u_r {
            assert_relative_eq!(u[0], 0.0, epsilon = 1e-9);
            assert_relative_eq!(u[1], 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn initial_feature_set_is_deterministic() {
        let scenario = test_scenario();
        let (model, _) = fit_model(&scenario).unwrap();
        let plan = straight_plan(200, 0.25, 6.0);
        let a = initial_feature_set(&scenario, &model, &plan).unwrap();
        let b = initial_feature_set(&scenario, &model, &plan).unwrap();
        assert!(!a.centers.is_empty());
        assert!(a.centers.len() <= scenario.rhrl.kernel_max_centers);
        assert_eq!(a.centers.len(), b.centers.len());
        assert_eq!(a.centers[0], b.centers[0]);
        assert_eq!(a.width, b.width);
    }

    #[test]
    fn rhrl_config_builds_with_a_positive_definite_terminal_weight() {
        let scenario = test_scenario();
        let (model, _) = fit_model(&scenario).unwrap();
        let cfg = build_rhrl_config(&scenario, &model).unwrap();
        assert_eq!(cfg.q.nrows(), model.dict.dim());
        assert_eq!(cfg.r.nrows(), 2);
        // The terminal weight must dominate Q (Riccati fixed points do).
        assert!(cfg.p.trace() >= cfg.q.trace() - 1e-9);
        assert!(cfg.p.clone().cholesky().is_some());
    }
}
