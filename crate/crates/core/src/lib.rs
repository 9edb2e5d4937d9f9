//! Executable task environments for software-engineering agents: task
//! datasets, sandboxed patch/test execution, instance validation, agent
//! rollouts, test-based and verifier rewards, trajectory curation for
//! rejection-sampling fine-tuning, and best-of-n evaluation metrics.

pub mod curation;
pub mod diff;
pub mod metrics;
pub mod render;
pub mod reward;
pub mod rollout;
pub mod sandbox;
pub mod seed;
pub mod store;
pub mod task;
pub mod toy;
pub mod validation;
