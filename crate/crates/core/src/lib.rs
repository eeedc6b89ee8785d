//! Evolution strategies whose mean update is delegated to a text-completion
//! model, together with classical baselines, benchmark problems and an
//! experiment harness.
//!
//! The moving parts:
//!
//! * [`archive`] keeps every told generation and answers "best so far"
//!   queries.
//! * [`codec`] maps coordinates onto integer bins so that solutions print as
//!   short integer tokens.
//! * [`prompt`] turns the archive into the query text and parses completions.
//! * [`llm`] holds the completion backends (HTTP and offline oracles).
//! * [`strategies`] implements the ask/tell optimizers.
//! * [`tasks`] provides synthetic functions and control-policy problems.
//! * [`harness`] runs configured experiments and writes logs, summaries and
//!   fine-tuning datasets.

pub mod archive;
pub mod codec;
pub mod error;
pub mod harness;
pub mod llm;
pub mod prompt;
pub mod search;
pub mod strategies;
pub mod tasks;

pub use archive::{ArchiveBuffer, Evaluation, Generation};
pub use codec::{Bin, DiscretizationSpec};
pub use error::{BackendFailure, Error, ParseFailure, Result};
pub use search::{EvalBudget, Phase, SearchBounds, SearchState};
pub use llm::{BackendConfig, CompletionBackend};
pub use strategies::{EvoLlm, EvoLlmConfig, HillClimb, RandomSearch, Snes, Strategy};
pub use tasks::{Problem, TaskSpec};
pub use harness::{ExperimentConfig, FinetuneConfig};
