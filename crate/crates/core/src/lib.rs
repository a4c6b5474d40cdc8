//! Continual instruction tuning of a small multimodal language model with
//! per-task prompt pools, dual-modality guidance, train-time prompt fusion and
//! inference-time prompt selection.

use std::fmt;

use serde::{Deserialize, Serialize};

pub mod archive;
pub mod backbone;
pub mod error;
pub mod evaluation;
pub mod experiments;
pub mod fixtures;
pub mod guidance;
pub mod nn;
pub mod optim;
pub mod plot;
pub mod prompt_store;
pub mod selection;
pub mod tasks;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};

/// 1-based position of a task in the continual sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(pub u32);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}
