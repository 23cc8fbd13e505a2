//! Fast/slow arbitration between a learned reactive solver and an exact
//! planner on constrained grid worlds.
//!
//! The crate is split along the agent's parts: [`world`] holds the task model,
//! [`self_model`] the experience store, [`solvers`] the two solvers,
//! [`metacognition`] the arbitration rules and [`orchestrator`] the episode
//! loop, trace output and a brute-force oracle.

pub mod metacognition;
pub mod orchestrator;
pub mod rng;
pub mod self_model;
pub mod solvers;
pub mod world;

pub use metacognition::{ArbitrationConfig, Diagnostics, MemoryLimit, ResourceBudget, Source};
pub use orchestrator::{
    oracle_optimal_return, run_experiment, ClockKind, EpisodeResult, ExperimentReport, Mode,
    Orchestrator, RunConfig, TraceRecord,
};
pub use self_model::{ExperienceStore, LearningParams, StoreError};
pub use solvers::{s1_decide, s2_decide, S1Params, S2Solver, SolverOutput, ValueTable};
pub use world::{load_task, reference_task, Action, Cell, GridSpec, State, TaskError, TaskSpec};
