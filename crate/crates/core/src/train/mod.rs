//! Tuning, evaluation and ablation runs.

pub mod metrics;
pub mod optim;
pub mod tune;
pub mod checkpoint;
pub mod eval;
pub mod ablation;
pub mod report;
