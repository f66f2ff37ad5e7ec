//! Synthetic tasks, evaluation and ablation grids.

pub mod ablation;
pub mod eval;
pub mod synthetic;

pub use ablation::{run_ablation, run_cell, ExperimentConfig, RunReport, Variant};
pub use eval::{evaluate, inference_cost_check, Metrics};
pub use synthetic::{gen_synthetic_task, SyntheticTask, SyntheticTaskSpec};
