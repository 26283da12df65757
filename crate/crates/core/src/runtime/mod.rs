//! Continual protocol: per-task training, memory, inference and baselines.

pub mod buffer;
pub mod ensemble;
pub mod ewc;
pub mod experiment;
pub mod infer;

pub use buffer::{update_buffer, BufferSlice, ExemplarBuffer};
pub use ensemble::{majority_vote, ModelCounter, VoteTally};
pub use ewc::EwcState;
pub use experiment::{run_experiment, thread_count, write_results, ExperimentState, Method, TaskDiagnostics};
pub use infer::{fine_tune, EvalTarget, Inference};
