//! Lossless context management engine.
//!
//! Every message is persisted verbatim in an append-only [`store::Store`].
//! What the model sees is an active context of raw messages and summary
//! nodes; when it grows past configurable thresholds the
//! [`controller::Controller`] compacts its oldest block into a summary node
//! while the originals stay retrievable through the summary DAG.

pub mod controller;
pub mod delegation;
pub mod engine;
pub mod error;
pub mod file_gateway;
pub mod ids;
pub mod map_engine;
pub mod memory_tools;
pub mod provider;
pub mod runtime;
pub mod schema;
pub mod store;
pub mod summarizer;
pub mod tokenizer;

pub use error::{LcmError, Result};
pub use lcm_model as model;
