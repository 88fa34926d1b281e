//! The optimal design problem: objective, penalties, optimizer and continuation.

pub mod continuation;
pub mod objective;
pub mod optimizer;
pub mod penalty;

pub use continuation::{bisect_gamma, continuation_solve, solve_design, threshold_l1_design, ContinuationConfig, ContinuationResult};
pub use objective::{ObjectiveValue, OedObjective, TraceEstimatorSet};
pub use optimizer::{minimize, Evaluation, OptimizerConfig, OptimizerResult, Status};
pub use penalty::Penalty;
