//! Online model compensation: a sparse Gaussian-process regressor learns
//! the residual between plant transitions and the nominal lifted linear
//! model, and exposes the compensated one-step map plus its Jacobians.
//!
//! The GP input is `z = [lift(x); u]`; targets are the residual components
//! selected by the disturbance matrix `B_d`. Predictions use the fully
//! independent training conditional (FITC) approximation with an inducing
//! set; when the inducing set equals the training set, FITC reproduces the
//! exact posterior, and in that regime the analytic mean gradient below is
//! the exact Jacobian of the predictive mean.

use crate::koopman::KoopmanModel;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GpError {
    #[error("hyperparameters: {0}")]
    Hyper(String),
    #[error("dataset: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("disturbance matrix is rank-deficient")]
    RankDeficient,
}

/// Squared-exponential kernel parameters for one output dimension.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DimHyper {
    pub sigma_f: f64,
    pub length_scale: f64,
    pub sigma_n: f64,
}

impl DimHyper {
    fn validate(&self) -> Result<(), GpError> {
        if !(self.sigma_f > 0.0 && self.length_scale > 0.0 && self.sigma_n > 0.0) {
            return Err(GpError::Hyper(format!(
                "sigma_f, length_scale, sigma_n must all be positive, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// One kernel per output dimension (shared inputs).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GpHyperparams {
    pub dims: Vec<DimHyper>,
}

impl GpHyperparams {
    pub fn uniform(n_y: usize, sigma_f: f64, length_scale: f64, sigma_n: f64) -> Self {
        GpHyperparams {
            dims: vec![DimHyper { sigma_f, length_scale, sigma_n }; n_y],
        }
    }

    pub fn validate(&self) -> Result<(), GpError> {
        if self.dims.is_empty() {
            return Err(GpError::Hyper("at least one output dimension".into()));
        }
        for d in &self.dims {
            d.validate()?;
        }
        Ok(())
    }
}

/// `sigma_f^2 exp(-|z_i - z_j|^2 / (2 l^2))`.
pub fn se_kernel(hp: &DimHyper, z_i: &DVector<f64>, z_j: &DVector<f64>) -> f64 {
    let r2 = (z_i - z_j).norm_squared();
    hp.sigma_f * hp.sigma_f * (-r2 / (2.0 * hp.length_scale * hp.length_scale)).exp()
}

/// Rows of shared inputs with one target column per output dimension.
#[derive(Debug, Clone, Default)]
pub struct GpDataset {
    /// n x n_z.
    pub inputs: DMatrix<f64>,
    /// n x n_y.
    pub targets: DMatrix<f64>,
}

impl GpDataset {
    pub fn new(n_z: usize, n_y: usize) -> Self {
        GpDataset {
            inputs: DMatrix::zeros(0, n_z),
            targets: DMatrix::zeros(0, n_y),
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input(&self, i: usize) -> DVector<f64> {
        self.inputs.row(i).transpose()
    }

    pub fn target(&self, i: usize) -> DVector<f64> {
        self.targets.row(i).transpose()
    }

    pub fn push(&mut self, z: &DVector<f64>, y: &DVector<f64>) -> Result<(), GpError> {
        if z.len() != self.inputs.ncols() || y.len() != self.targets.ncols() {
            return Err(GpError::Shape(format!(
                "sample dims ({}, {}) do not match dataset ({}, {})",
                z.len(),
                y.len(),
                self.inputs.ncols(),
                self.targets.ncols()
            )));
        }
        if z.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(GpError::Data("non-finite sample".into()));
        }
        let n = self.len();
        self.inputs = self.inputs.clone().insert_row(n, 0.0);
        self.inputs.row_mut(n).copy_from(&z.transpose());
        self.targets = self.targets.clone().insert_row(n, 0.0);
        self.targets.row_mut(n).copy_from(&y.transpose());
        Ok(())
    }

    pub fn subset(&self, indices: &[usize]) -> GpDataset {
        let rows: Vec<usize> = indices.to_vec();
        GpDataset {
            inputs: self.inputs.select_rows(rows.iter()),
            targets: self.targets.select_rows(rows.iter()),
        }
    }
}

/// Exact posterior mean and variance at `z_star`, one pair per output
/// dimension. O(n^3) per call — the reference implementation.
pub fn full_gp_posterior(
    data: &GpDataset,
    hp: &GpHyperparams,
    z_star: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>), GpError> {
    hp.validate()?;
    let n = data.len();
    let n_y = data.targets.ncols();
    if n == 0 {
        return Err(GpError::Data("empty dataset".into()));
    }
    if hp.dims.len() != n_y {
        return Err(GpError::Shape("hyperparameter count != output dims".into()));
    }
    let mut mean = DVector::zeros(n_y);
    let mut var = DVector::zeros(n_y);
    for (a, dim) in hp.dims.iter().enumerate() {
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = se_kernel(dim, &data.input(i), &data.input(j));
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
            k[(i, i)] += dim.sigma_n * dim.sigma_n;
        }
        let chol = Cholesky::new(k)
            .ok_or_else(|| GpError::Numerical("kernel matrix not positive definite".into()))?;
        let y_a: DVector<f64> = data.targets.column(a).into_owned();
        let alpha = chol.solve(&y_a);
        let k_star = DVector::from_fn(n, |i, _| se_kernel(dim, &data.input(i), z_star));
        mean[a] = k_star.dot(&alpha);
        let v = chol.solve(&k_star);
        let raw = se_kernel(dim, z_star, z_star) - k_star.dot(&v);
        var[a] = clamp_variance(raw);
    }
    Ok((mean, var))
}

fn clamp_variance(raw: f64) -> f64 {
    if raw < -1e-10 {
        log::warn!("posterior variance clamped from {raw}");
    }
    raw.max(0.0)
}

/// Per-output-dimension FITC caches.
#[derive(Debug, Clone)]
struct DimCache {
    /// (Q + Lambda)^-1 y over training points.
    alpha: DVector<f64>,
    /// K_uu^-1 K_uZ alpha — the mean is k_u(z*) . w.
    w: DVector<f64>,
    chol_uu: Cholesky<f64, Dyn>,
    /// n_ind x n cross-covariance between inducing and training inputs.
    k_uz: DMatrix<f64>,
    /// FITC diagonal: clamp(diag(K - Q), 0) + sigma_n^2.
    lambda: DVector<f64>,
    /// L^-1 K_uZ.
    v: DMatrix<f64>,
    chol_aw: Cholesky<f64, Dyn>,
}

impl DimCache {
    /// `(Q + Lambda)^-1 r` by the matrix-inversion lemma.
    fn solve_qlam(&self, r: &DVector<f64>) -> DVector<f64> {
        let lam_inv_r = r.component_div(&self.lambda);
        let s = &self.v * &lam_inv_r;
        let t = self.chol_aw.solve(&s);
        let back = self.v.transpose() * t;
        &lam_inv_r - back.component_div(&self.lambda)
    }
}

/// Sparse GP over residual targets, with the disturbance injection matrix
/// that maps its outputs back into lifted space.
#[derive(Debug, Clone)]
pub struct SparseGp {
    pub z_train: DMatrix<f64>,
    pub z_ind: DMatrix<f64>,
    pub targets: DMatrix<f64>,
    pub hyper: GpHyperparams,
    /// n_K x n_y.
    pub b_d: DMatrix<f64>,
    caches: Vec<DimCache>,
}

impl SparseGp {
    /// A GP with no data: zero mean, prior variance, zero Jacobian.
    pub fn empty(n_z: usize, hyper: GpHyperparams, b_d: DMatrix<f64>) -> Result<Self, GpError> {
        hyper.validate()?;
        if b_d.ncols() != hyper.dims.len() {
            return Err(GpError::Shape("b_d columns != output dims".into()));
        }
        let n_y = hyper.dims.len();
        Ok(SparseGp {
            z_train: DMatrix::zeros(0, n_z),
            z_ind: DMatrix::zeros(0, n_z),
            targets: DMatrix::zeros(0, n_y),
            hyper,
            b_d,
            caches: Vec::new(),
        })
    }

    pub fn is_empty(&self) -> bool {
        self.z_train.nrows() == 0
    }

    pub fn n_inducing(&self) -> usize {
        self.z_ind.nrows()
    }

    /// Fit FITC caches from `data` with the inducing set given as row
    /// indices into the dataset (order preserved).
    pub fn fit(
        data: &GpDataset,
        inducing: &[usize],
        hyper: &GpHyperparams,
        b_d: DMatrix<f64>,
    ) -> Result<Self, GpError> {
        hyper.validate()?;
        let n = data.len();
        let n_y = data.targets.ncols();
        if n == 0 {
            return Err(GpError::Data("empty dataset (use SparseGp::empty)".into()));
        }
        if hyper.dims.len() != n_y {
            return Err(GpError::Shape("hyperparameter count != output dims".into()));
        }
        if b_d.ncols() != n_y {
            return Err(GpError::Shape("b_d columns != output dims".into()));
        }
        if inducing.is_empty() || inducing.len() > n {
            return Err(GpError::Data(format!(
                "inducing count {} must be in 1..={n}",
                inducing.len()
            )));
        }
        if inducing.iter().any(|&i| i >= n) {
            return Err(GpError::Data("inducing index out of range".into()));
        }
        let z_ind = data.inputs.select_rows(inducing.iter());
        let n_ind = z_ind.nrows();
        let mut caches = Vec::with_capacity(n_y);
        for (a, dim) in hyper.dims.iter().enumerate() {
            let row = |m: &DMatrix<f64>, i: usize| m.row(i).transpose();
            let jitter = 1e-10 * dim.sigma_f * dim.sigma_f + 1e-12;
            let mut k_uu = DMatrix::zeros(n_ind, n_ind);
            for i in 0..n_ind {
                for j in i..n_ind {
                    let v = se_kernel(dim, &row(&z_ind, i), &row(&z_ind, j));
                    k_uu[(i, j)] = v;
                    k_uu[(j, i)] = v;
                }
                k_uu[(i, i)] += jitter;
            }
            let chol_uu = Cholesky::new(k_uu)
                .ok_or_else(|| GpError::Numerical("inducing kernel matrix not PD".into()))?;
            let k_uz = DMatrix::from_fn(n_ind, n, |i, j| {
                se_kernel(dim, &row(&z_ind, i), &data.input(j))
            });
            let v = chol_uu
                .l()
                .solve_lower_triangular(&k_uz)
                .ok_or_else(|| GpError::Numerical("triangular solve failed".into()))?;
            let mut lambda = DVector::zeros(n);
            for j in 0..n {
                let kjj = dim.sigma_f * dim.sigma_f;
                let qjj = v.column(j).norm_squared();
                lambda[j] = (kjj - qjj).max(0.0) + dim.sigma_n * dim.sigma_n;
                lambda[j] = lambda[j].max(1e-12);
            }
            // A_w = I + V diag(1/lambda) V^T via scaled columns.
            let mut vh = v.clone();
            for j in 0..n {
                let s = 1.0 / lambda[j].sqrt();
                vh.column_mut(j).scale_mut(s);
            }
            let aw = DMatrix::identity(n_ind, n_ind) + &vh * vh.transpose();
            let chol_aw = Cholesky::new(aw)
                .ok_or_else(|| GpError::Numerical("Woodbury core not PD".into()))?;
            let mut cache = DimCache {
                alpha: DVector::zeros(n),
                w: DVector::zeros(n_ind),
                chol_uu,
                k_uz,
                lambda,
                v,
                chol_aw,
            };
            let y_a: DVector<f64> = data.targets.column(a).into_owned();
            cache.alpha = cache.solve_qlam(&y_a);
            cache.w = cache.chol_uu.solve(&(&cache.k_uz * &cache.alpha));
            caches.push(cache);
        }
        Ok(SparseGp {
            z_train: data.inputs.clone(),
            z_ind,
            targets: data.targets.clone(),
            hyper: hyper.clone(),
            b_d,
            caches,
        })
    }

    /// FITC posterior mean and variance at `z_star`.
    pub fn posterior(&self, z_star: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let n_y = self.hyper.dims.len();
        let mut mean = DVector::zeros(n_y);
        let mut var = DVector::zeros(n_y);
        for (a, dim) in self.hyper.dims.iter().enumerate() {
            if self.is_empty() {
                var[a] = dim.sigma_f * dim.sigma_f;
                continue;
            }
            let cache = &self.caches[a];
            let n_ind = self.z_ind.nrows();
            let k_u_star =
                DVector::from_fn(n_ind, |i, _| se_kernel(dim, &self.z_ind.row(i).transpose(), z_star));
            mean[a] = cache.w.dot(&k_u_star);
            let b = cache.chol_uu.solve(&k_u_star);
            let q_star = cache.k_uz.transpose() * b;
            let raw = se_kernel(dim, z_star, z_star) - q_star.dot(&cache.solve_qlam(&q_star));
            var[a] = clamp_variance(raw);
        }
        (mean, var)
    }

    pub fn mean(&self, z_star: &DVector<f64>) -> DVector<f64> {
        self.posterior(z_star).0
    }

    /// Analytic gradient of the FITC mean:
    /// `(1/l^2) sum_i (z_i - z*) Q_{z* z_i} alpha_i` over training points.
    /// Exact when the inducing set equals the training set.
    pub fn mean_jacobian(&self, z_star: &DVector<f64>) -> DMatrix<f64> {
        let n_y = self.hyper.dims.len();
        let n_z = self.z_train.ncols();
        let mut jac = DMatrix::zeros(n_y, n_z);
        if self.is_empty() {
            return jac;
        }
        let n = self.z_train.nrows();
        for (a, dim) in self.hyper.dims.iter().enumerate() {
            let cache = &self.caches[a];
            let n_ind = self.z_ind.nrows();
            let k_u_star =
                DVector::from_fn(n_ind, |i, _| se_kernel(dim, &self.z_ind.row(i).transpose(), z_star));
            let b = cache.chol_uu.solve(&k_u_star);
            let q_star = cache.k_uz.transpose() * b;
            let inv_l2 = 1.0 / (dim.length_scale * dim.length_scale);
            for i in 0..n {
                let coeff = inv_l2 * cache.alpha[i] * q_star[i];
                for j in 0..n_z {
                    jac[(a, j)] += coeff * (self.z_train[(i, j)] - z_star[j]);
                }
            }
        }
        jac
    }
}

/// Residual target `B_d^+ (lift(x_{k+1}) - A lift(x_k) - B u_k)`.
pub fn residual_target(
    model: &KoopmanModel,
    b_d: &DMatrix<f64>,
    x_k: &DVector<f64>,
    u_k: &DVector<f64>,
    x_next: &DVector<f64>,
) -> Result<DVector<f64>, GpError> {
    let pinv = pseudo_inverse_full_rank(b_d)?;
    let (pred, _) = crate::koopman::predict(model, x_k, u_k);
    let resid = model.dict.lift(x_next) - pred;
    Ok(pinv * resid)
}

fn pseudo_inverse_full_rank(m: &DMatrix<f64>) -> Result<DMatrix<f64>, GpError> {
    let svd = m.clone().svd(true, true);
    let tol = 1e-12 * svd.singular_values.max().max(1.0);
    if svd.rank(tol) < m.ncols() {
        return Err(GpError::RankDeficient);
    }
    svd.pseudo_inverse(tol)
        .map_err(|e| GpError::Numerical(e.to_string()))
}

/// `[0 I 0]^T`-style selection matrix: n_k x rows.len() with a 1 at
/// (rows[j], j).
pub fn selection_matrix(n_k: usize, rows: &[usize]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n_k, rows.len());
    for (j, &r) in rows.iter().enumerate() {
        m[(r, j)] = 1.0;
    }
    m
}

/// GP input `z = [lift(x); u]`.
pub fn gp_input(model: &KoopmanModel, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    gp_input_from_lifted(&model.dict.lift(x), u)
}

/// GP input from an already-lifted state.
pub fn gp_input_from_lifted(lifted: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    let mut z = DVector::zeros(lifted.len() + u.len());
    z.rows_mut(0, lifted.len()).copy_from(lifted);
    z.rows_mut(lifted.len(), u.len()).copy_from(u);
    z
}

/// Greedy approximate-linear-dependence selection: a point is admitted iff
/// its squared kernel-space distance to the span of the admitted set
/// exceeds `threshold`. Returns admitted indices in input order.
pub fn ald_select_indices(
    points: &DMatrix<f64>,
    sigma_f: f64,
    length_scale: f64,
    threshold: f64,
) -> Vec<usize> {
    assert!(threshold > 0.0 && sigma_f > 0.0 && length_scale > 0.0);
    let hp = DimHyper { sigma_f, length_scale, sigma_n: 1.0 };
    let n = points.nrows();
    let mut selected: Vec<usize> = Vec::new();
    // Lower Cholesky factor of the admitted set's Gram matrix, grown a row
    // at a time.
    let mut l: DMatrix<f64> = DMatrix::zeros(0, 0);
    for i in 0..n {
        let zi = points.row(i).transpose();
        let kzz = se_kernel(&hp, &zi, &zi);
        let delta = if selected.is_empty() {
            kzz
        } else {
            let k_d = DVector::from_fn(selected.len(), |j, _| {
                se_kernel(&hp, &points.row(selected[j]).transpose(), &zi)
            });
            match l.solve_lower_triangular(&k_d) {
                Some(c) => kzz - c.norm_squared(),
                None => kzz,
            }
        };
        if delta > threshold {
            let m = selected.len();
            let mut grown = DMatrix::zeros(m + 1, m + 1);
            grown.view_mut((0, 0), (m, m)).copy_from(&l);
            if m > 0 {
                let k_d = DVector::from_fn(m, |j, _| {
                    se_kernel(&hp, &points.row(selected[j]).transpose(), &zi)
                });
                let c = l.solve_lower_triangular(&k_d).expect("factor is nonsingular");
                grown.view_mut((m, 0), (1, m)).copy_from(&c.transpose());
            }
            grown[(m, m)] = delta.sqrt();
            l = grown;
            selected.push(i);
        }
    }
    selected
}

/// ALD sparsification of a dataset, keeping retained samples in order.
/// The first output dimension's kernel defines the feature space.
pub fn ald_sparsify(data: &GpDataset, hp: &GpHyperparams, threshold: f64) -> GpDataset {
    if data.is_empty() {
        return data.clone();
    }
    let d0 = &hp.dims[0];
    let idx = ald_select_indices(&data.inputs, d0.sigma_f, d0.length_scale, threshold);
    data.subset(&idx)
}

/// Compensated one-step error dynamics `A x~ + B u~ + B_d mean(z)`.
pub fn compensated_step(
    model: &KoopmanModel,
    sgp: &SparseGp,
    x_tilde: &DVector<f64>,
    u_tilde: &DVector<f64>,
    z: &DVector<f64>,
) -> DVector<f64> {
    let nominal = &model.a * x_tilde + &model.b * u_tilde;
    if sgp.is_empty() {
        return nominal;
    }
    nominal + &sgp.b_d * sgp.mean(z)
}

/// Local linear model about `(x_r, u_r)`:
/// `A_d = A + B_d (dm/d lift)`, `B_ctrl = B + B_d (dm/du)`.
pub fn linearize(
    model: &KoopmanModel,
    sgp: &SparseGp,
    x_r: &DVector<f64>,
    u_r: &DVector<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    linearize_lifted(model, sgp, &model.dict.lift(x_r), u_r)
}

/// `linearize` at an already-lifted expansion point.
pub fn linearize_lifted(
    model: &KoopmanModel,
    sgp: &SparseGp,
    lifted: &DVector<f64>,
    u_r: &DVector<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    if sgp.is_empty() {
        return (model.a.clone(), model.b.clone());
    }
    let n_k = model.dict.dim();
    let n_u = model.n_u;
    let z_r = gp_input_from_lifted(lifted, u_r);
    let jac = sgp.mean_jacobian(&z_r);
    let a_d = &model.a + &sgp.b_d * jac.columns(0, n_k);
    let b_ctrl = &model.b + &sgp.b_d * jac.columns(n_k, n_u);
    (a_d, b_ctrl)
}

/// Hyperparameter search settings for the marginal-likelihood ascent.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HyperOptConfig {
    pub max_rounds: usize,
    pub initial_step: f64,
    pub min_step: f64,
    pub sigma_n_floor: f64,
}

impl Default for HyperOptConfig {
    fn default() -> Self {
        HyperOptConfig {
            max_rounds: 60,
            initial_step: 0.7,
            min_step: 1e-3,
            sigma_n_floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HyperOptStatus {
    Converged,
    MaxRounds,
}

/// Exact log marginal likelihood of one output dimension.
pub fn log_marginal_likelihood(
    data: &GpDataset,
    dim_index: usize,
    hp: &DimHyper,
) -> Result<f64, GpError> {
    let n = data.len();
    if n == 0 {
        return Err(GpError::Data("empty dataset".into()));
    }
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = se_kernel(hp, &data.input(i), &data.input(j));
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
        k[(i, i)] += hp.sigma_n * hp.sigma_n;
    }
    let chol =
        Cholesky::new(k).ok_or_else(|| GpError::Numerical("kernel matrix not PD".into()))?;
    let y: DVector<f64> = data.targets.column(dim_index).into_owned();
    let alpha = chol.solve(&y);
    let log_det: f64 = (0..n).map(|i| chol.l()[(i, i)].ln()).sum::<f64>() * 2.0;
    Ok(-0.5 * y.dot(&alpha)
        - 0.5 * log_det
        - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln())
}

/// Deterministic coordinate ascent on the log marginal likelihood, per
/// output dimension, in log-parameter space. Monotone: the returned
/// likelihood never falls below the initial one.
pub fn optimize_hyperparams(
    data: &GpDataset,
    init: &GpHyperparams,
    cfg: &HyperOptConfig,
) -> Result<(GpHyperparams, HyperOptStatus), GpError> {
    init.validate()?;
    if data.is_empty() {
        return Err(GpError::Data("empty dataset".into()));
    }
    let mut out = init.clone();
    let mut status = HyperOptStatus::Converged;
    for (a, dim) in out.dims.iter_mut().enumerate() {
        let eval = |p: &[f64; 3]| -> f64 {
            let hp = DimHyper {
                sigma_f: p[0].exp(),
                length_scale: p[1].exp(),
                sigma_n: p[2].exp().max(cfg.sigma_n_floor),
            };
            log_marginal_likelihood(data, a, &hp).unwrap_or(f64::NEG_INFINITY)
        };
        let mut p = [dim.sigma_f.ln(), dim.length_scale.ln(), dim.sigma_n.ln()];
        let mut best = eval(&p);
        let mut step = cfg.initial_step;
        let mut rounds = 0;
        while step >= cfg.min_step {
            if rounds >= cfg.max_rounds {
                status = HyperOptStatus::MaxRounds;
                break;
            }
            rounds += 1;
            let mut improved = false;
            for c in 0..3 {
                for dir in [1.0, -1.0] {
                    let mut cand = p;
                    cand[c] += dir * step;
                    let val = eval(&cand);
                    if val > best {
                        best = val;
                        p = cand;
                        improved = true;
                    }
                }
            }
            if !improved {
                step *= 0.5;
            }
        }
        dim.sigma_f = p[0].exp();
        dim.length_scale = p[1].exp();
        dim.sigma_n = p[2].exp().max(cfg.sigma_n_floor);
    }
    Ok((out, status))
}

/// Serializable GP state: training rows double as the inducing set, which
/// is the configuration the pipeline maintains after ALD sparsification.
#[derive(Debug, Serialize, Deserialize)]
pub struct GpSnapshot {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    pub hyper: GpHyperparams,
    pub b_d: Vec<Vec<f64>>,
}

impl SparseGp {
    pub fn snapshot(&self) -> GpSnapshot {
        let rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
            (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
        };
        GpSnapshot {
            inputs: rows(&self.z_train),
            targets: rows(&self.targets),
            hyper: self.hyper.clone(),
            b_d: rows(&self.b_d),
        }
    }

    pub fn from_snapshot(snap: &GpSnapshot) -> Result<Self, GpError> {
        let n_y = snap.hyper.dims.len();
        let n_k = snap.b_d.len();
        if n_k == 0 || snap.b_d.iter().any(|r| r.len() != n_y) {
            return Err(GpError::Shape("b_d shape inconsistent with hyperparams".into()));
        }
        let b_d =
            DMatrix::from_row_iterator(n_k, n_y, snap.b_d.iter().flatten().copied());
        if snap.inputs.is_empty() {
            let n_z = n_k; // placeholder width; empty GP never reads it
            return SparseGp::empty(n_z, snap.hyper.clone(), b_d);
        }
        let n_z = snap.inputs[0].len();
        let mut data = GpDataset::new(n_z, n_y);
        for (z, y) in snap.inputs.iter().zip(&snap.targets) {
            data.push(
                &DVector::from_column_slice(z),
                &DVector::from_column_slice(y),
            )?;
        }
        let all: Vec<usize> = (0..data.len()).collect();
        SparseGp::fit(&data, &all, &snap.hyper, b_d)
    }
}
