//! Scenario loading, closed-loop pipeline, and run metrics for the
//! vector-field-guided learning predictive controller.

pub mod metrics;
pub mod pipeline;
pub mod scenario;
