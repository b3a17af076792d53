//! Task-oriented multi-objective weighting for multi-task adversarial
//! attacks.
//!
//! An attack is a set of tasks sharing one perturbation: fooling each
//! member of an ensemble, fooling a model on each input of a group, or
//! surviving each of several input transformations. Every outer step the
//! per-task input gradients are combined with weights chosen by a
//! [`Strategy`]: uniform, min-max over losses, min-norm over gradients, or
//! the task-oriented variant that shifts weight away from tasks already
//! achieved.

pub mod checkpoint;
pub mod data;
pub mod engine;
pub mod error;
pub mod harness;
pub mod models;
pub mod report;
pub mod simplex;
pub mod solvers;
pub mod tasks;
pub mod transforms;

pub use engine::{
    adversarial_train, evaluate_metrics, evaluate_robustness, run_attack, AdvTrainMethod, AttackConfig, AttackOutcome,
    AttackReport, GradientCache, Metrics, Strategy,
};
pub use error::{Error, Result};
pub use harness::{run_experiment, solve_demo, ExperimentSpec, Scenario};
pub use models::{ArchSpec, Classifier, Dataset, LossKind, TrainConfig};
pub use report::{read_report, write_report, ResultRow, ResultTable};
pub use simplex::{project_extended_simplex, project_simplex, TaskStatus, WeightVector};
pub use solvers::{solve_minmax, solve_moo, solve_tamoo, solve_uniform, GramMatrix, SolverConfig, SolverState};
pub use tasks::{DomainBox, TaskBundle};
