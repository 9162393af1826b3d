// SPDX-License-Identifier: Apache-2.0

//! Split persistence: a schema-checked metadata store, the in-memory task
//! queue, and a write-once artifact store.

mod artifacts;
mod metadata;
mod queue;
mod schema;

pub use artifacts::{
    run_artifact_key, task_artifact_key, ArtifactStore, METRICS_ARTIFACT, RESULT_ARTIFACT, TRAJECTORY_ARTIFACT,
};
pub use metadata::MetadataStore;
pub use queue::{QueueEntry, TaskQueue};
pub use schema::{Document, FieldRule, FieldType, Schema};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StoreError {
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("unknown schema {0}")]
    UnknownSchema(String),
    #[error("version conflict on {key}: expected {expected}, found {actual}")]
    VersionConflict { key: String, expected: u64, actual: u64 },
    #[error("task {0} is already queued")]
    DuplicateEnqueue(String),
    #[error("artifact {0} already exists")]
    KeyExists(String),
    #[error("artifact {0} not found")]
    KeyNotFound(String),
    #[error("invalid artifact key {0:?}")]
    InvalidKey(String),
    #[error("io: {0}")]
    Io(String),
    #[error("serialization: {0}")]
    Serde(String),
}

impl From<std::io::Error> for StoreError {
    fn from(e: std::io::Error) -> Self {
        StoreError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for StoreError {
    fn from(e: serde_json::Error) -> Self {
        StoreError::Serde(e.to_string())
    }
}
