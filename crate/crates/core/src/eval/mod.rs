//! Ranking metrics, behavior-stratified evaluation, the few-shot omission
//! harness, hyperparameter sweeps and finite-difference gradient checks.

mod few_shot;
mod gradcheck;
mod metrics;
mod sweep;

pub use few_shot::{few_shot_curve, few_shot_drop, FewShotPoint};
pub use gradcheck::{grad_check, relative_error, GradReport, GradTarget, TensorError, FD_STEP};
pub use metrics::{evaluate, evaluate_baseline, ndcg_at_k, recall_at_k, EvalReport, Metrics};
pub use sweep::{sweep, SweepAxis, SweepResult};
