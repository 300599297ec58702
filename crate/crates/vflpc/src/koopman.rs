//! Lifted linear modeling: a fixed observable dictionary maps the state
//! into a higher-dimensional space where one-step dynamics are fitted as a
//! linear map by ridge-regularized least squares over snapshot data
//! (extended dynamic mode decomposition with control).
//!
//! The lifted state is `[x; rho(x)]` — identity coordinates first, then the
//! dictionary features — so the physical state is always recoverable as the
//! leading block of a lifted vector.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dictionary configuration: {0}")]
    Dictionary(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("normal equations are not positive definite; data is rank-deficient (add ridge regularization or richer data)")]
    IllConditioned,
    #[error("model i/o: {0}")]
    Io(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// One scalar observable appended to the identity coordinates.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Feature {
    /// `exp(-|x[dims] - center|^2 / (2 width^2))` — unit peak at the center.
    Gaussian {
        center: Vec<f64>,
        width: f64,
        dims: Vec<usize>,
    },
    /// `r^2 ln r` with `r = |x[dims] - center|` (0 at the center).
    ThinPlate { center: Vec<f64>, dims: Vec<usize> },
    /// `prod_i x_i^exponents[i]` over the full state.
    Monomial { exponents: Vec<u32> },
}

impl Feature {
    fn eval(&self, x: &DVector<f64>) -> f64 {
        match self {
            Feature::Gaussian { center, width, dims } => {
                let r2: f64 = dims
                    .iter()
                    .zip(center)
                    .map(|(&d, &c)| (x[d] - c).powi(2))
                    .sum();
                (-r2 / (2.0 * width * width)).exp()
            }
            Feature::ThinPlate { center, dims } => {
                let r2: f64 = dims
                    .iter()
                    .zip(center)
                    .map(|(&d, &c)| (x[d] - c).powi(2))
                    .sum();
                if r2 == 0.0 {
                    0.0
                } else {
                    r2 * 0.5 * r2.ln() // r^2 ln r = r^2 * ln(sqrt(r2))
                }
            }
            Feature::Monomial { exponents } => exponents
                .iter()
                .enumerate()
                .map(|(i, &e)| x[i].powi(e as i32))
                .product(),
        }
    }

    fn validate(&self, n_x: usize) -> Result<(), ModelError> {
        let check_dims = |center: &[f64], dims: &[usize]| {
            if center.len() != dims.len() {
                return Err(ModelError::Dictionary(format!(
                    "center length {} != dims length {}",
                    center.len(),
                    dims.len()
                )));
            }
            if dims.iter().any(|&d| d >= n_x) {
                return Err(ModelError::Dictionary(format!(
                    "feature dim out of range (n_x = {n_x})"
                )));
            }
            Ok(())
        };
        match self {
            Feature::Gaussian { center, width, dims } => {
                if !(*width > 0.0) {
                    return Err(ModelError::Dictionary("gaussian width must be positive".into()));
                }
                check_dims(center, dims)
            }
            Feature::ThinPlate { center, dims } => check_dims(center, dims),
            Feature::Monomial { exponents } => {
                if exponents.len() != n_x {
                    return Err(ModelError::Dictionary(format!(
                        "monomial exponents length {} != n_x {n_x}",
                        exponents.len()
                    )));
                }
                Ok(())
            }
        }
    }
}

/// The fixed observable dictionary: identity coordinates plus features.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ObservableDictionary {
    pub n_x: usize,
    pub features: Vec<Feature>,
}

impl ObservableDictionary {
    /// Identity lift only (the dictionary of a plain linear model).
    pub fn identity(n_x: usize) -> Self {
        ObservableDictionary { n_x, features: Vec::new() }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_x == 0 {
            return Err(ModelError::Dictionary("n_x must be positive".into()));
        }
        for f in &self.features {
            f.validate(self.n_x)?;
        }
        Ok(())
    }

    /// Lifted dimension `n_K`.
    pub fn dim(&self) -> usize {
        self.n_x + self.features.len()
    }

    /// `[x; rho(x)]`.
    pub fn lift(&self, x: &DVector<f64>) -> DVector<f64> {
        debug_assert_eq!(x.len(), self.n_x);
        let mut out = DVector::zeros(self.dim());
        out.rows_mut(0, self.n_x).copy_from(x);
        for (i, f) in self.features.iter().enumerate() {
            out[self.n_x + i] = f.eval(x);
        }
        out
    }
}

/// One `(x_k, u_k, x_{k+1})` snapshot.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub x_next: DVector<f64>,
}

/// Snapshot data grouped by trajectory (splits and holdouts are taken per
/// trajectory so test snapshots are never time-adjacent to training ones).
#[derive(Debug, Clone)]
pub struct TrajectoryDataset {
    pub trajectories: Vec<Vec<Snapshot>>,
    pub dt: f64,
}

impl TrajectoryDataset {
    pub fn n_snapshots(&self) -> usize {
        self.trajectories.iter().map(|t| t.len()).sum()
    }

    pub fn snapshots(&self) -> impl Iterator<Item = &Snapshot> {
        self.trajectories.iter().flatten()
    }

    /// Split trajectories into (train, holdout) by a fraction of
    /// trajectories (rounded down, at least one on each side when there
    /// are two or more trajectories).
    pub fn split(&self, train_fraction: f64) -> (TrajectoryDataset, TrajectoryDataset) {
        let n = self.trajectories.len();
        let mut n_train = ((n as f64) * train_fraction).floor() as usize;
        n_train = n_train.clamp(usize::from(n >= 2), n - usize::from(n >= 2));
        let (a, b) = self.trajectories.split_at(n_train);
        (
            TrajectoryDataset { trajectories: a.to_vec(), dt: self.dt },
            TrajectoryDataset { trajectories: b.to_vec(), dt: self.dt },
        )
    }

    /// Read `t, x1..xn, u1..um` rows. Column counts come from the header;
    /// a decrease in `t` starts a new trajectory; the sample period is
    /// inferred from the data and must be uniform.
    pub fn load_csv(path: &Path) -> Result<Self, ModelError> {
        let err = |m: String| ModelError::Io(m);
        let mut rdr = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
        let headers = rdr.headers().map_err(|e| err(e.to_string()))?.clone();
        let names: Vec<&str> = headers.iter().map(|h| h.trim()).collect();
        if names.first() != Some(&"t") {
            return Err(err("first column must be t".into()));
        }
        let n_x = names.iter().skip(1).take_while(|n| n.starts_with('x')).count();
        let n_u = names.iter().skip(1 + n_x).take_while(|n| n.starts_with('u')).count();
        if n_x == 0 || n_u == 0 || 1 + n_x + n_u != names.len() {
            return Err(err(format!(
                "header must be t, x1..x{{n}}, u1..u{{m}}; got {names:?}"
            )));
        }
        let mut rows: Vec<(f64, DVector<f64>, DVector<f64>)> = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| err(e.to_string()))?;
            if rec.len() != names.len() {
                return Err(err(format!("row with {} fields, expected {}", rec.len(), names.len())));
            }
            let vals: Vec<f64> = rec
                .iter()
                .map(|v| v.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| err(format!("parse: {e}")))?;
            rows.push((
                vals[0],
                DVector::from_column_slice(&vals[1..1 + n_x]),
                DVector::from_column_slice(&vals[1 + n_x..]),
            ));
        }
        if rows.len() < 2 {
            return Err(err("need at least two rows".into()));
        }
        let mut trajectories = Vec::new();
        let mut current: Vec<(f64, DVector<f64>, DVector<f64>)> = Vec::new();
        for row in rows {
            if let Some(last) = current.last() {
                if row.0 <= last.0 {
                    trajectories.push(std::mem::take(&mut current));
                }
            }
            current.push(row);
        }
        trajectories.push(current);
        let dt = {
            let first = trajectories
                .iter()
                .find(|t| t.len() >= 2)
                .ok_or_else(|| err("no trajectory with two or more rows".into()))?;
            first[1].0 - first[0].0
        };
        let mut out = Vec::new();
        for t in &trajectories {
            let mut snaps = Vec::new();
            for w in t.windows(2) {
                let step = w[1].0 - w[0].0;
                if ((step - dt) / dt).abs() > 1e-6 {
                    return Err(err(format!(
                        "non-uniform sample period: {step} vs {dt}"
                    )));
                }
                snaps.push(Snapshot {
                    x: w[0].1.clone(),
                    u: w[0].2.clone(),
                    x_next: w[1].1.clone(),
                });
            }
            if !snaps.is_empty() {
                out.push(snaps);
            }
        }
        Ok(TrajectoryDataset { trajectories: out, dt })
    }
}

/// Lifted linear model `lift(x_{k+1}) ~= A lift(x_k) + B u_k`.
#[derive(Debug, Clone)]
pub struct KoopmanModel {
    pub dict: ObservableDictionary,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub n_u: usize,
    pub dt: f64,
}

/// Training / evaluation residuals of a fitted model.
#[derive(Debug, Clone, Serialize)]
pub struct ResidualReport {
    pub n_snapshots: usize,
    /// RMSE over all lifted rows.
    pub rmse_lifted: f64,
    /// RMSE over the physical-state rows only.
    pub rmse_state: f64,
    pub max_abs_residual: f64,
}

/// Fit `[A B]` by ridge-regularized least squares over all snapshots:
/// minimizes `|Y - [A B] G|_F^2 + ridge |[A B]|_F^2` with
/// `G = [lift(x); u]` and `Y = lift(x_next)` stacked column-wise.
pub fn fit_edmd(
    data: &TrajectoryDataset,
    dict: &ObservableDictionary,
    ridge: f64,
) -> Result<(KoopmanModel, ResidualReport), ModelError> {
    dict.validate()?;
    if ridge < 0.0 {
        return Err(ModelError::Dataset("ridge must be non-negative".into()));
    }
    let m = data.n_snapshots();
    if m == 0 {
        return Err(ModelError::Dataset("no snapshots".into()));
    }
    let first = data.snapshots().next().unwrap();
    if first.x.len() != dict.n_x {
        return Err(ModelError::Shape(format!(
            "state dim {} != dictionary n_x {}",
            first.x.len(),
            dict.n_x
        )));
    }
    let n_u = first.u.len();
    let n_k = dict.dim();
    let p = n_k + n_u;
    let mut g = DMatrix::zeros(p, m);
    let mut y = DMatrix::zeros(n_k, m);
    for (j, s) in data.snapshots().enumerate() {
        if s.x.len() != dict.n_x || s.x_next.len() != dict.n_x || s.u.len() != n_u {
            return Err(ModelError::Shape(format!("snapshot {j} has inconsistent dims")));
        }
        g.view_mut((0, j), (n_k, 1)).copy_from(&dict.lift(&s.x));
        g.view_mut((n_k, j), (n_u, 1)).copy_from(&s.u);
        y.view_mut((0, j), (n_k, 1)).copy_from(&dict.lift(&s.x_next));
    }
    let mut gram = &g * g.transpose();
    for i in 0..p {
        gram[(i, i)] += ridge;
    }
    let chol = nalgebra::Cholesky::new(gram).ok_or(ModelError::IllConditioned)?;
    let rhs = &g * y.transpose(); // p x n_k
    let ab = chol.solve(&rhs).transpose(); // n_k x p
    let a = ab.columns(0, n_k).into_owned();
    let b = ab.columns(n_k, n_u).into_owned();
    let model = KoopmanModel { dict: dict.clone(), a, b, n_u, dt: data.dt };
    let report = evaluate(&model, data)?;
    Ok((model, report))
}

/// One-step prediction residuals of `model` on `data`.
pub fn evaluate(model: &KoopmanModel, data: &TrajectoryDataset) -> Result<ResidualReport, ModelError> {
    let n_k = model.dict.dim();
    let n_x = model.dict.n_x;
    let m = data.n_snapshots();
    if m == 0 {
        return Err(ModelError::Dataset("no snapshots".into()));
    }
    let mut sq_lifted = 0.0;
    let mut sq_state = 0.0;
    let mut max_abs: f64 = 0.0;
    for s in data.snapshots() {
        let (pred, _) = predict(model, &s.x, &s.u);
        let truth = model.dict.lift(&s.x_next);
        let r = truth - pred;
        sq_lifted += r.norm_squared();
        sq_state += r.rows(0, n_x).norm_squared();
        max_abs = max_abs.max(r.amax());
    }
    Ok(ResidualReport {
        n_snapshots: m,
        rmse_lifted: (sq_lifted / (m * n_k) as f64).sqrt(),
        rmse_state: (sq_state / (m * n_x) as f64).sqrt(),
        max_abs_residual: max_abs,
    })
}

/// One nominal step in lifted space; also returns the predicted physical
/// state (the leading identity block).
pub fn predict(model: &KoopmanModel, x: &DVector<f64>, u: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let lifted = model.dict.lift(x);
    let next = &model.a * lifted + &model.b * u;
    let state = next.rows(0, model.dict.n_x).into_owned();
    (next, state)
}

/// Lifted error coordinates and their nominal propagation:
/// `x_tilde = lift(x) - lift(x_r)`, `u_tilde = u - u_r`, and the nominal
/// next error `A x_tilde + B u_tilde`.
pub fn error_dynamics(
    model: &KoopmanModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
    x_r: &DVector<f64>,
    u_r: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
    let x_tilde = model.dict.lift(x) - model.dict.lift(x_r);
    let u_tilde = u - u_r;
    let next = &model.a * &x_tilde + &model.b * &u_tilde;
    (x_tilde, u_tilde, next)
}

/// Deterministic k-means over points projected to `dims`, for placing
/// radial feature centers. Initialization draws a seeded random subset;
/// empty clusters re-seed from the farthest point.
pub fn kmeans_centers(
    points: &[DVector<f64>],
    dims: &[usize],
    k: usize,
    seed: u64,
    iters: usize,
) -> Vec<Vec<f64>> {
    assert!(k > 0 && !points.is_empty());
    let proj: Vec<Vec<f64>> = points
        .iter()
        .map(|p| dims.iter().map(|&d| p[d]).collect())
        .collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut centers: Vec<Vec<f64>> = (0..k)
        .map(|_| proj[rng.gen_range(0..proj.len())].clone())
        .collect();
    let d2 = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    };
    let mut assign = vec![0usize; proj.len()];
    for _ in 0..iters {
        for (i, p) in proj.iter().enumerate() {
            assign[i] = (0..k)
                .min_by(|&a, &b| d2(p, &centers[a]).partial_cmp(&d2(p, &centers[b])).unwrap())
                .unwrap();
        }
        for c in 0..k {
            let members: Vec<&Vec<f64>> =
                proj.iter().zip(&assign).filter(|(_, &a)| a == c).map(|(p, _)| p).collect();
            if members.is_empty() {
                // Re-seed at the point farthest from its center.
                let far = (0..proj.len())
                    .max_by(|&a, &b| {
                        d2(&proj[a], &centers[assign[a]])
                            .partial_cmp(&d2(&proj[b], &centers[assign[b]]))
                            .unwrap()
                    })
                    .unwrap();
                centers[c] = proj[far].clone();
                continue;
            }
            let mut mean = vec![0.0; dims.len()];
            for p in &members {
                for (m, v) in mean.iter_mut().zip(p.iter()) {
                    *m += v;
                }
            }
            for v in &mut mean {
                *v /= members.len() as f64;
            }
            centers[c] = mean;
        }
    }
    centers
}

/// Serialized model layout: explicit row-major matrices.
#[derive(Serialize, Deserialize)]
struct ModelFile {
    dt: f64,
    n_x: usize,
    n_u: usize,
    features: Vec<Feature>,
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
}

impl KoopmanModel {
    pub fn save_json(&self, path: &Path) -> Result<(), ModelError> {
        let rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
            (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
        };
        let file = ModelFile {
            dt: self.dt,
            n_x: self.dict.n_x,
            n_u: self.n_u,
            features: self.dict.features.clone(),
            a: rows(&self.a),
            b: rows(&self.b),
        };
        let json = serde_json::to_string_pretty(&file).map_err(|e| ModelError::Io(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| ModelError::Io(e.to_string()))
    }

    pub fn load_json(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path).map_err(|e| ModelError::Io(e.to_string()))?;
        let file: ModelFile =
            serde_json::from_str(&text).map_err(|e| ModelError::Io(e.to_string()))?;
        let dict = ObservableDictionary { n_x: file.n_x, features: file.features };
        dict.validate()?;
        let n_k = dict.dim();
        let from_rows = |rows: &[Vec<f64>], nr: usize, nc: usize, name: &str| {
            if rows.len() != nr || rows.iter().any(|r| r.len() != nc) {
                return Err(ModelError::Io(format!("matrix {name} is not {nr} x {nc}")));
            }
            Ok(DMatrix::from_row_iterator(nr, nc, rows.iter().flatten().copied()))
        };
        let a = from_rows(&file.a, n_k, n_k, "a")?;
        let b = from_rows(&file.b, n_k, file.n_u, "b")?;
        if !(file.dt > 0.0) {
            return Err(ModelError::Io("dt must be positive".into()));
        }
        Ok(KoopmanModel { dict, a, b, n_u: file.n_u, dt: file.dt })
    }
}
