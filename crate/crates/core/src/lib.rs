//! Elastic multi-gradient descent (EMGD) for parallel continual learning.
//!
//! The crate is split along the training pipeline:
//!
//! - [`moo_solver`]: elastic factors and the min-norm dual solvers that turn a
//!   set of task gradients into a Pareto descent direction.
//! - [`tinynet`]: a small dense network with a shared backbone and per-task
//!   heads, exposing parameter and input gradients.
//! - [`streams`]: parallel-split task construction, timelines and batching.
//! - [`rehearsal`]: the class-balanced memory buffer and memory editing.
//! - [`experiment`]: the timeline-driven training loop, the two-function toy
//!   problem and continual-learning metrics.

pub mod error;
pub mod experiment;
pub mod moo_solver;
pub mod rehearsal;
pub mod seeding;
pub mod streams;
pub mod tinynet;

pub use error::{Error, Result};

/// Task index. Index 0 is reserved for the rehearsal (memory) pseudo-task.
pub type TaskId = usize;

/// The memory stream's task index.
pub const MEMORY_TASK: TaskId = 0;
