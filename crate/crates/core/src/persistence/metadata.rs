// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::schema::{Document, Schema};
use super::StoreError;

#[derive(Debug, Clone)]
struct Versioned {
    schema: &'static str,
    version: u64,
    doc: Value,
}

#[derive(Serialize, Deserialize)]
struct JournalEntry {
    key: String,
    schema: String,
    version: u64,
    doc: Value,
}

/// Schema-validated document store with per-key optimistic versioning.
///
/// Every committed write is appended to an optional JSON-lines journal that
/// [`MetadataStore::open`] replays on restart.
pub struct MetadataStore {
    schemas: BTreeMap<&'static str, Schema>,
    docs: RwLock<BTreeMap<String, Versioned>>,
    journal: Option<Mutex<BufWriter<File>>>,
}

impl MetadataStore {
    /// In-memory store with the task and instance schemas registered.
    pub fn new() -> Self {
        let mut schemas = BTreeMap::new();
        for s in [Schema::task_record(), Schema::instance()] {
            schemas.insert(s.name, s);
        }
        Self { schemas, docs: RwLock::new(BTreeMap::new()), journal: None }
    }

    pub fn register(&mut self, schema: Schema) {
        self.schemas.insert(schema.name, schema);
    }

    /// Opens (or creates) a journal-backed store, replaying existing entries.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref();
        let mut store = Self::new();
        let mut needs_newline = false;
        if path.exists() {
            let content = std::fs::read_to_string(path)?;
            needs_newline = !content.is_empty() && !content.ends_with('\n');
            let docs = store.docs.get_mut();
            for line in content.lines() {
                if line.trim().is_empty() {
                    continue;
                }
                // a torn final line from a crash is dropped
                let Ok(entry) = serde_json::from_str::<JournalEntry>(line) else { continue };
                let Some(schema) = store.schemas.get(entry.schema.as_str()) else {
                    return Err(StoreError::UnknownSchema(entry.schema));
                };
                docs.insert(entry.key, Versioned { schema: schema.name, version: entry.version, doc: entry.doc });
            }
        }
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        if needs_newline {
            file.write_all(b"\n")?;
        }
        store.journal = Some(Mutex::new(BufWriter::new(file)));
        Ok(store)
    }

    /// Validates and commits `doc`, returning the new version.
    pub fn put_record(&self, key: &str, schema: &str, doc: Value, expected_version: Option<u64>) -> Result<u64, StoreError> {
        let schema = self.schemas.get(schema).ok_or_else(|| StoreError::UnknownSchema(schema.to_string()))?;
        schema.validate(&doc).map_err(StoreError::SchemaViolation)?;
        let mut docs = self.docs.write();
        let current = docs.get(key);
        if let Some(existing) = current {
            if existing.schema != schema.name {
                return Err(StoreError::SchemaViolation(format!(
                    "key {key} holds {} documents, not {}",
                    existing.schema, schema.name
                )));
            }
        }
        let current_version = current.map_or(0, |v| v.version);
        if let Some(expected) = expected_version {
            if expected != current_version {
                return Err(StoreError::VersionConflict { key: key.to_string(), expected, actual: current_version });
            }
        }
        let version = current_version + 1;
        if let Some(journal) = &self.journal {
            let entry = JournalEntry { key: key.to_string(), schema: schema.name.to_string(), version, doc: doc.clone() };
            let mut w = journal.lock();
            serde_json::to_writer(&mut *w, &entry)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        docs.insert(key.to_string(), Versioned { schema: schema.name, version, doc });
        Ok(version)
    }

    pub fn put<T: Document>(&self, key: &str, doc: &T, expected_version: Option<u64>) -> Result<u64, StoreError> {
        self.put_record(key, T::SCHEMA, serde_json::to_value(doc)?, expected_version)
    }

    pub fn get_raw(&self, key: &str) -> Option<(u64, Value)> {
        self.docs.read().get(key).map(|v| (v.version, v.doc.clone()))
    }

    pub fn get<T: Document>(&self, key: &str) -> Result<Option<(u64, T)>, StoreError> {
        match self.docs.read().get(key) {
            None => Ok(None),
            Some(v) => Ok(Some((v.version, serde_json::from_value(v.doc.clone())?))),
        }
    }

    pub fn version(&self, key: &str) -> u64 {
        self.docs.read().get(key).map_or(0, |v| v.version)
    }

    pub fn keys_with_prefix(&self, prefix: &str) -> Vec<String> {
        self.docs.read().range(prefix.to_string()..).take_while(|(k, _)| k.starts_with(prefix)).map(|(k, _)| k.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.docs.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Default for MetadataStore {
    fn default() -> Self {
        Self::new()
    }
}

impl std::fmt::Debug for MetadataStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MetadataStore").field("docs", &self.len()).field("journaled", &self.journal.is_some()).finish()
    }
}
