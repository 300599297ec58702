//! Guiding-vector-field planning and learning predictive control for wheeled
//! robots, closed against a dynamic bicycle plant.
//!
//! The crate is organized around one pipeline:
//!
//! 1. [`vf`] — composite guiding vector fields over implicit surfaces
//!    (a desired path plus reactive obstacle regions), kinodynamic virtual
//!    obstacles, grid precomputation, trajectory integration, and
//!    curvature-limited speed planning.
//! 2. [`koopman`] — a lifted linear model of the vehicle fitted from
//!    trajectory data by ridge-regularized least squares over a fixed
//!    observable dictionary.
//! 3. [`gp`] — online residual learning: full and sparse (FITC) Gaussian
//!    process posteriors, dictionary sparsification, analytic posterior-mean
//!    Jacobians, and model compensation hooks for the controller.
//! 4. [`safety`] — a pursuit-evasion barrier: evader-frame capture-region
//!    membership tests and an exponential barrier with its gradient.
//! 5. [`lpc`] — the receding-horizon kernel actor-critic controller that
//!    consumes the compensated model, the barrier, and a terminal penalty
//!    from a discounted Riccati recursion.
//! 6. [`sim`] — the analytic bicycle plant (RK4 + seeded noise) and moving
//!    obstacle bookkeeping used to exercise the full loop.
//!
//! [`scenario`], [`pipeline`], and [`metrics`] tie the stages into
//! reproducible closed-loop episodes with JSON-lines run records and
//! summary reports.

pub mod gp;
pub mod koopman;
pub mod lpc;
pub mod safety;
pub mod sim;
pub mod vf;
