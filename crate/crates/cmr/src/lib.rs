//! Cross-modality relevance over text and visual entity sets.
//!
//! The pipeline encodes each modality, aligns everything in one
//! representation space with a joint self-attention stack, and scores the
//! aligned sets against each other two ways: an entity affinity matrix fed
//! through a small CNN, and a ranked top-K set of intra-modality relations
//! whose cross-modality affinity is scored the same way. The concatenated
//! relevance features drive a task classifier trained end to end with Adam.
//!
//! Everything runs on an in-crate reverse-mode tape with a finite-difference
//! oracle, so every gradient path is checkable.

pub mod config;
pub mod checkpoint;
pub mod cross_modality;
pub mod data;
pub mod encoders;
pub mod entity_relevance;
pub mod error;
pub mod model;
pub mod optim;
pub mod params;
pub mod relational;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use config::{ModelConfig, OptimizerConfig, RunConfig, TaskKind, TrainingConfig};
pub use error::{CmrError, Result};
