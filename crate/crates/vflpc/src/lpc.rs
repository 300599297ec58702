//! Receding-horizon kernel actor-critic controller.
//!
//! Each control cycle solves a finite-horizon optimal regulation problem
//! on the lifted error dynamics by dual heuristic programming: one
//! actor-critic pair per horizon stage, sharing a Gaussian kernel feature
//! set. The critic of stage `tau` learns the costate (value gradient) at
//! the rolled state of its stage; the actor learns the saturated target
//! control derived from the next stage's costate. Stage weights warm-start
//! from the previous cycle shifted by one stage, so successive cycles
//! refine rather than restart.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LpcError {
    #[error("controller configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training loss {loss:.3e} exceeded the divergence guard")]
    Divergence { loss: f64 },
    #[error("non-finite rollout state at iteration {iteration}, stage {stage}")]
    ModelBlowup { iteration: usize, stage: usize },
    #[error("Riccati iteration did not converge: (A, B) not stabilizable or weights ill-posed")]
    Stabilizability,
}

/// Weights and limits of the receding-horizon solver.
#[derive(Debug, Clone)]
pub struct RhrlConfig {
    /// Horizon length N (stages 0..=N, the final one terminal).
    pub n_horizon: usize,
    /// Discount factor in (0, 1].
    pub gamma: f64,
    /// State weight (n_K x n_K, positive semidefinite).
    pub q: DMatrix<f64>,
    /// Control weight (n_u x n_u, positive definite).
    pub r: DMatrix<f64>,
    /// Terminal weight (n_K x n_K, positive definite).
    pub p: DMatrix<f64>,
    pub eta_a: f64,
    pub eta_c: f64,
    pub i_max: usize,
    /// Per-channel control magnitude bounds.
    pub u_b: DVector<f64>,
    /// Convergence threshold on the max-abs weight change per iteration.
    pub tol_w: f64,
    /// Abort threshold on either training loss.
    pub loss_guard: f64,
    /// Learning-rate halvings attempted before skipping an update.
    pub max_backtracks: usize,
}

impl RhrlConfig {
    pub fn validate(&self) -> Result<(), LpcError> {
        let err = |m: &str| Err(LpcError::Config(m.into()));
        if self.n_horizon == 0 {
            return err("horizon must be at least 1");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return err("gamma must lie in (0, 1]");
        }
        if !(self.eta_a > 0.0 && self.eta_c > 0.0) {
            return err("learning rates must be positive");
        }
        if self.i_max == 0 {
            return err("i_max must be at least 1");
        }
        if !(self.tol_w > 0.0) {
            return err("tol_w must be positive");
        }
        if !(self.loss_guard > 0.0) {
            return err("loss_guard must be positive");
        }
        let n_k = self.q.nrows();
        let n_u = self.r.nrows();
        if self.q.ncols() != n_k || self.p.nrows() != n_k || self.p.ncols() != n_k {
            return err("Q and P must be square with matching dimension");
        }
        if self.r.ncols() != n_u || self.u_b.len() != n_u {
            return err("R must be square and u_b must match its dimension");
        }
        if self.u_b.iter().any(|&b| !(b > 0.0)) {
            return err("control bounds must be positive");
        }
        // Q PSD (jittered factorization), R and P strictly PD.
        let jitter = DMatrix::identity(n_k, n_k) * 1e-12;
        if nalgebra::Cholesky::new(&self.q + &jitter).is_none() {
            return err("Q must be positive semidefinite");
        }
        if nalgebra::Cholesky::new(self.r.clone()).is_none() {
            return err("R must be positive definite");
        }
        if nalgebra::Cholesky::new(self.p.clone()).is_none() {
            return err("P must be positive definite");
        }
        Ok(())
    }
}

/// Shared Gaussian kernel features over the lifted error state.
#[derive(Debug, Clone)]
pub struct KernelFeatureSet {
    pub centers: Vec<DVector<f64>>,
    pub width: f64,
}

impl KernelFeatureSet {
    pub fn new(centers: Vec<DVector<f64>>, width: f64) -> Result<Self, LpcError> {
        if centers.is_empty() {
            return Err(LpcError::Config("at least one kernel center".into()));
        }
        if !(width > 0.0) {
            return Err(LpcError::Config("kernel width must be positive".into()));
        }
        for i in 0..centers.len() {
            for j in i + 1..centers.len() {
                if (&centers[i] - &centers[j]).norm() < 1e-12 {
                    return Err(LpcError::Config(format!(
                        "kernel centers {i} and {j} coincide"
                    )));
                }
            }
        }
        Ok(KernelFeatureSet { centers, width })
    }

    /// Build a feature set from state samples: kernel-space deduplication
    /// keeps representative points (in input order), and the width
    /// defaults to the median pairwise distance of the kept centers.
    pub fn from_samples(samples: &[DVector<f64>], ald_threshold: f64) -> Result<Self, LpcError> {
        if samples.is_empty() {
            return Err(LpcError::Config("no samples for kernel centers".into()));
        }
        let probe_width = median_pairwise_distance(samples).max(1e-9);
        let n_z = samples[0].len();
        let mat = DMatrix::from_fn(samples.len(), n_z, |i, j| samples[i][j]);
        let idx = crate::gp::ald_select_indices(&mat, 1.0, probe_width, ald_threshold);
        let centers: Vec<DVector<f64>> = idx.iter().map(|&i| samples[i].clone()).collect();
        let width = if centers.len() >= 2 {
            median_pairwise_distance(&centers).max(1e-9)
        } else {
            probe_width
        };
        KernelFeatureSet::new(centers, width)
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// Unit-peak Gaussian kernel against each center.
    pub fn feature_vector(&self, x_tilde: &DVector<f64>) -> DVector<f64> {
        let w2 = 2.0 * self.width * self.width;
        DVector::from_fn(self.centers.len(), |j, _| {
            (-(x_tilde - &self.centers[j]).norm_squared() / w2).exp()
        })
    }

    /// Admit `x_tilde` as a new center iff its kernel-space projection
    /// residual onto the current centers exceeds `threshold`. Returns
    /// whether a center was added.
    pub fn admit_if_novel(&mut self, x_tilde: &DVector<f64>, threshold: f64) -> bool {
        let n = self.centers.len();
        let kern = |a: &DVector<f64>, b: &DVector<f64>| {
            (-(a - b).norm_squared() / (2.0 * self.width * self.width)).exp()
        };
        let mut k_dd = DMatrix::from_fn(n, n, |i, j| kern(&self.centers[i], &self.centers[j]));
        for i in 0..n {
            k_dd[(i, i)] += 1e-12;
        }
        let k_d = DVector::from_fn(n, |i, _| kern(&self.centers[i], x_tilde));
        let delta = match nalgebra::Cholesky::new(k_dd) {
            Some(chol) => 1.0 - k_d.dot(&chol.solve(&k_d)),
            None => 1.0,
        };
        if delta > threshold {
            self.centers.push(x_tilde.clone());
            true
        } else {
            false
        }
    }
}

/// Median of all pairwise Euclidean distances (0 when fewer than 2 points).
pub fn median_pairwise_distance(points: &[DVector<f64>]) -> f64 {
    let mut dists = Vec::new();
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            dists.push((&points[i] - &points[j]).norm());
        }
    }
    if dists.is_empty() {
        return 0.0;
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    dists[dists.len() / 2]
}

/// Actor and critic weights of one horizon stage.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorCriticStage {
    /// n_phi x n_u.
    pub w_a: DMatrix<f64>,
    /// n_phi x n_K.
    pub w_c: DMatrix<f64>,
}

impl ActorCriticStage {
    pub fn zeros(n_phi: usize, n_u: usize, n_k: usize) -> Self {
        ActorCriticStage { w_a: DMatrix::zeros(n_phi, n_u), w_c: DMatrix::zeros(n_phi, n_k) }
    }
}

/// The N+1 stage networks carried across receding-horizon cycles.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonState {
    pub stages: Vec<ActorCriticStage>,
    pub iteration: usize,
}

impl HorizonState {
    pub fn zeros(n_horizon: usize, n_phi: usize, n_u: usize, n_k: usize) -> Self {
        HorizonState {
            stages: (0..=n_horizon).map(|_| ActorCriticStage::zeros(n_phi, n_u, n_k)).collect(),
            iteration: 0,
        }
    }

    pub fn validate(&self, cfg: &RhrlConfig, n_phi: usize) -> Result<(), LpcError> {
        if self.stages.len() != cfg.n_horizon + 1 {
            return Err(LpcError::Shape(format!(
                "horizon state has {} stages, expected {}",
                self.stages.len(),
                cfg.n_horizon + 1
            )));
        }
        let n_k = cfg.q.nrows();
        let n_u = cfg.r.nrows();
        for (i, s) in self.stages.iter().enumerate() {
            if s.w_a.nrows() != n_phi
                || s.w_a.ncols() != n_u
                || s.w_c.nrows() != n_phi
                || s.w_c.ncols() != n_k
            {
                return Err(LpcError::Shape(format!("stage {i} weight shapes inconsistent")));
            }
            if s.w_a.iter().chain(s.w_c.iter()).any(|v| !v.is_finite()) {
                return Err(LpcError::Shape(format!("stage {i} has non-finite weights")));
            }
        }
        Ok(())
    }

    /// Grow all stage weights by zero rows for newly admitted kernel
    /// centers; outputs are unchanged until training moves the new rows.
    pub fn extend_features(&mut self, n_new: usize) {
        if n_new == 0 {
            return;
        }
        for s in &mut self.stages {
            let at = s.w_a.nrows();
            s.w_a = s.w_a.clone().insert_rows(at, n_new, 0.0);
            s.w_c = s.w_c.clone().insert_rows(at, n_new, 0.0);
        }
    }
}

/// `W_a^T Phi(x)`.
pub fn actor_eval(stage: &ActorCriticStage, fs: &KernelFeatureSet, x_tilde: &DVector<f64>) -> DVector<f64> {
    stage.w_a.transpose() * fs.feature_vector(x_tilde)
}

/// `W_c^T Phi(x)`.
pub fn critic_eval(stage: &ActorCriticStage, fs: &KernelFeatureSet, x_tilde: &DVector<f64>) -> DVector<f64> {
    stage.w_c.transpose() * fs.feature_vector(x_tilde)
}

/// Saturated target control `u_b . tanh(-(gamma/2) R^-1 B^T lambda_next)`
/// (elementwise product), clamped strictly inside the control box (tanh
/// rounds to exactly 1 in floating point for large arguments).
pub fn target_control(
    lambda_next: &DVector<f64>,
    b_ctrl: &DMatrix<f64>,
    cfg: &RhrlConfig,
) -> DVector<f64> {
    let r_chol = nalgebra::Cholesky::new(cfg.r.clone()).expect("R validated positive definite");
    let pre = r_chol.solve(&(b_ctrl.transpose() * lambda_next)) * (-0.5 * cfg.gamma);
    let raw = DVector::from_fn(cfg.u_b.len(), |j, _| cfg.u_b[j] * pre[j].tanh());
    saturate_open(&raw, &cfg.u_b)
}

/// Which costate formula applies at a stage.
pub enum CostateStage<'a> {
    Interior { lambda_next: &'a DVector<f64>, a_d: &'a DMatrix<f64> },
    Terminal,
}

/// Target costate: `2 Q x + gamma A_d^T lambda_next + grad h` on interior
/// stages, `2 P x + grad h` at the terminal stage.
pub fn target_costate(
    x_tilde: &DVector<f64>,
    stage: CostateStage,
    barrier_grad: &DVector<f64>,
    cfg: &RhrlConfig,
) -> DVector<f64> {
    match stage {
        CostateStage::Interior { lambda_next, a_d } => {
            2.0 * &cfg.q * x_tilde + cfg.gamma * a_d.transpose() * lambda_next + barrier_grad
        }
        CostateStage::Terminal => 2.0 * &cfg.p * x_tilde + barrier_grad,
    }
}

/// Training targets for one stage; the terminal stage has no actor.
pub struct StageTargets {
    pub costate: DVector<f64>,
    pub control: Option<DVector<f64>>,
}

/// What one stage update did.
#[derive(Debug, Clone, Copy)]
pub struct UpdateReport {
    pub max_delta: f64,
    pub critic_loss: f64,
    pub actor_loss: f64,
}

/// One backtracked gradient step of `W` toward `target` on the squared
/// error `1/2 |W^T phi - target|^2`. The effective rate is capped at the
/// per-point optimum `1 / |phi|^2` — any larger step overshoots the
/// minimum along the gradient ray, and steps past `2 / |phi|^2` reflect
/// the error, which lets the coupled stage iteration limit-cycle instead
/// of settling. Returns the max-abs weight change and the pre-step loss.
fn descend(
    w: &mut DMatrix<f64>,
    phi: &DVector<f64>,
    target: &DVector<f64>,
    eta0: f64,
    max_backtracks: usize,
) -> (f64, f64) {
    let loss_of = |m: &DMatrix<f64>| 0.5 * (m.transpose() * phi - target).norm_squared();
    let l0 = loss_of(w);
    let err = w.transpose() * phi - target;
    let phi_sq = phi.norm_squared();
    let mut eta = if phi_sq > 0.0 { eta0.min(1.0 / phi_sq) } else { eta0 };
    for _ in 0..=max_backtracks {
        let cand = &*w - eta * phi * err.transpose();
        if loss_of(&cand) <= l0 {
            let delta = (&cand - &*w).amax();
            *w = cand;
            return (delta, l0);
        }
        eta *= 0.5;
    }
    (0.0, l0) // every step overshot: skip this update
}

/// Gradient-descend both networks of a stage toward frozen targets,
/// halving the learning rate on overshoot. Losses are measured before
/// the update; exceeding the divergence guard aborts.
pub fn update_stage(
    stage: &mut ActorCriticStage,
    fs: &KernelFeatureSet,
    x_tilde: &DVector<f64>,
    targets: &StageTargets,
    cfg: &RhrlConfig,
) -> Result<UpdateReport, LpcError> {
    let phi = fs.feature_vector(x_tilde);
    let (dc, critic_loss) =
        descend(&mut stage.w_c, &phi, &targets.costate, cfg.eta_c, cfg.max_backtracks);
    if critic_loss > cfg.loss_guard {
        return Err(LpcError::Divergence { loss: critic_loss });
    }
    let (da, actor_loss) = match &targets.control {
        Some(u_target) => {
            let (da, al) = descend(&mut stage.w_a, &phi, u_target, cfg.eta_a, cfg.max_backtracks);
            if al > cfg.loss_guard {
                return Err(LpcError::Divergence { loss: al });
            }
            (da, al)
        }
        None => (0.0, 0.0),
    };
    Ok(UpdateReport { max_delta: dc.max(da), critic_loss, actor_loss })
}

/// Shift stage weights one step forward for the next cycle: stage `tau`
/// inherits the old `tau + 1`, and the terminal stage inherits the old
/// last interior stage.
pub fn warm_start_shift(h: &HorizonState) -> HorizonState {
    let n = h.stages.len() - 1;
    let mut stages = Vec::with_capacity(n + 1);
    for tau in 0..n {
        stages.push(h.stages[tau + 1].clone());
    }
    stages.push(h.stages[n - 1].clone());
    HorizonState { stages, iteration: 0 }
}

/// The model surface the solver rolls against: compensated error
/// dynamics, their local linearization, and the barrier term, all
/// addressed by horizon stage so the adapter can walk its references.
pub trait HorizonModel {
    fn n_k(&self) -> usize;
    fn n_u(&self) -> usize;
    fn step(&self, tau: usize, x_tilde: &DVector<f64>, u_tilde: &DVector<f64>) -> DVector<f64>;
    fn linearize(&self, tau: usize, x_tilde: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>);
    /// Barrier value and its gradient with respect to the error state.
    fn barrier(&self, tau: usize, x_tilde: &DVector<f64>) -> (f64, DVector<f64>) {
        let _ = tau;
        (0.0, DVector::zeros(x_tilde.len()))
    }
}

/// Solve trace of one receding-horizon cycle.
#[derive(Debug, Clone, Copy)]
pub struct SolveReport {
    pub iterations: usize,
    pub converged: bool,
    pub max_delta: f64,
    pub critic_loss: f64,
    pub actor_loss: f64,
}

/// Clamp a control strictly inside the box `(-u_b, u_b)`.
pub fn saturate_open(u: &DVector<f64>, u_b: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(u.len(), |j, _| {
        let lim = u_b[j] * (1.0 - 1e-9);
        u[j].clamp(-lim, lim)
    })
}

/// Run the actor-critic iteration for one control cycle and return the
/// first-stage control, the updated stage weights, and the solve trace.
///
/// Each iteration sweeps the horizon forward: roll with the pre-update
/// actor, refresh the local linearization, form the saturated control
/// target and the costate target from the next stage's critic, and
/// gradient-step both networks. Converged when the largest weight change
/// in a sweep drops below `tol_w`; hitting `i_max` first is reported as a
/// status, not an error.
pub fn rhrl_solve(
    model: &dyn HorizonModel,
    fs: &KernelFeatureSet,
    x_k: &DVector<f64>,
    warm: HorizonState,
    cfg: &RhrlConfig,
) -> Result<(DVector<f64>, HorizonState, SolveReport), LpcError> {
    cfg.validate()?;
    warm.validate(cfg, fs.len())?;
    if x_k.len() != cfg.q.nrows() {
        return Err(LpcError::Shape("state dimension does not match Q".into()));
    }
    let n = cfg.n_horizon;
    let mut state = warm;
    let mut report = SolveReport {
        iterations: 0,
        converged: false,
        max_delta: f64::INFINITY,
        critic_loss: 0.0,
        actor_loss: 0.0,
    };
    for i in 1..=cfg.i_max {
        let mut x = x_k.clone();
        let mut max_delta: f64 = 0.0;
        let mut critic_loss: f64 = 0.0;
        let mut actor_loss: f64 = 0.0;
        for tau in 0..=n {
            if x.iter().any(|v| !v.is_finite()) {
                return Err(LpcError::ModelBlowup { iteration: i, stage: tau });
            }
            let (_, h_grad) = model.barrier(tau, &x);
            if tau == n {
                let costate = target_costate(&x, CostateStage::Terminal, &h_grad, cfg);
                let rep = update_stage(
                    &mut state.stages[tau],
                    fs,
                    &x,
                    &StageTargets { costate, control: None },
                    cfg,
                )?;
                max_delta = max_delta.max(rep.max_delta);
                critic_loss += rep.critic_loss;
            } else {
                let u_hat = saturate_open(&actor_eval(&state.stages[tau], fs, &x), &cfg.u_b);
                let x_next = model.step(tau, &x, &u_hat);
                let (a_d, b_ctrl) = model.linearize(tau, &x);
                let lambda_next = critic_eval(&state.stages[tau + 1], fs, &x_next);
                let u_target = target_control(&lambda_next, &b_ctrl, cfg);
                let costate = target_costate(
                    &x,
                    CostateStage::Interior { lambda_next: &lambda_next, a_d: &a_d },
                    &h_grad,
                    cfg,
                );
                let rep = update_stage(
                    &mut state.stages[tau],
                    fs,
                    &x,
                    &StageTargets { costate, control: Some(u_target) },
                    cfg,
                )?;
                max_delta = max_delta.max(rep.max_delta);
                critic_loss += rep.critic_loss;
                actor_loss += rep.actor_loss;
                x = x_next;
            }
        }
        state.iteration = i;
        report = SolveReport {
            iterations: i,
            converged: max_delta < cfg.tol_w,
            max_delta,
            critic_loss,
            actor_loss,
        };
        if report.converged {
            break;
        }
    }
    let control = saturate_open(&actor_eval(&state.stages[0], fs, x_k), &cfg.u_b);
    Ok((control, state, report))
}

/// Discounted horizon cost of an arbitrary policy rolled through the
/// model: running quadratic-plus-barrier stages and a terminal
/// `x^T P x + h` weighted by the accumulated discount.
pub fn horizon_cost(
    model: &dyn HorizonModel,
    x0: &DVector<f64>,
    cfg: &RhrlConfig,
    mut policy: impl FnMut(usize, &DVector<f64>) -> DVector<f64>,
) -> f64 {
    let mut x = x0.clone();
    let mut cost = 0.0;
    let mut disc = 1.0;
    for tau in 0..cfg.n_horizon {
        let u = policy(tau, &x);
        let (h, _) = model.barrier(tau, &x);
        cost += disc * (x.dot(&(&cfg.q * &x)) + u.dot(&(&cfg.r * &u)) + h);
        x = model.step(tau, &x, &u);
        disc *= cfg.gamma;
    }
    let (h_n, _) = model.barrier(cfg.n_horizon, &x);
    cost + disc * (x.dot(&(&cfg.p * &x)) + h_n)
}

/// Fixed point of the (undiscounted) discrete algebraic Riccati
/// recursion for `(A, B, Q, R)`, used as the terminal weight. Iterated to
/// 1e-10; failure to converge within 10^4 sweeps reports the pair as not
/// stabilizable.
pub fn terminal_penalty(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>, LpcError> {
    let n = a.nrows();
    if a.ncols() != n || q.nrows() != n || q.ncols() != n || b.nrows() != n {
        return Err(LpcError::Shape("Riccati operand dimensions inconsistent".into()));
    }
    let n_u = b.ncols();
    if r.nrows() != n_u || r.ncols() != n_u {
        return Err(LpcError::Shape("R dimension does not match B".into()));
    }
    let mut p = q.clone();
    for _ in 0..10_000 {
        let btp = b.transpose() * &p;
        let gram = r + &btp * b;
        let chol = nalgebra::Cholesky::new(gram).ok_or(LpcError::Stabilizability)?;
        let k = chol.solve(&(&btp * a));
        let next = q + a.transpose() * &p * a - a.transpose() * &p * b * k;
        let next = (&next + next.transpose()) * 0.5;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(LpcError::Stabilizability);
        }
        let delta = (&next - &p).amax();
        p = next;
        if delta < 1e-10 {
            return Ok(p);
        }
    }
    Err(LpcError::Stabilizability)
}
