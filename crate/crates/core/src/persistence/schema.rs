// SPDX-License-Identifier: Apache-2.0

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::model::{InstanceDescriptor, TaskRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldType {
    String,
    Integer,
    Number,
    Boolean,
    Object,
    Array,
    Any,
}

impl FieldType {
    fn accepts(self, v: &Value) -> bool {
        match self {
            FieldType::String => v.is_string(),
            FieldType::Integer => v.is_u64() || v.is_i64(),
            FieldType::Number => v.is_number(),
            FieldType::Boolean => v.is_boolean(),
            FieldType::Object => v.is_object(),
            FieldType::Array => v.is_array(),
            FieldType::Any => true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FieldRule {
    pub name: &'static str,
    pub ty: FieldType,
    pub required: bool,
    pub nullable: bool,
}

impl FieldRule {
    pub const fn required(name: &'static str, ty: FieldType) -> Self {
        Self { name, ty, required: true, nullable: false }
    }

    pub const fn optional(name: &'static str, ty: FieldType) -> Self {
        Self { name, ty, required: false, nullable: true }
    }
}

/// Top-level field rules for one document type.
#[derive(Debug, Clone)]
pub struct Schema {
    pub name: &'static str,
    pub fields: Vec<FieldRule>,
}

impl Schema {
    pub fn task_record() -> Self {
        use FieldType::*;
        Self {
            name: TaskRecord::SCHEMA,
            fields: vec![
                FieldRule::required("task_id", String),
                FieldRule::required("spec", Object),
                FieldRule::required("status", String),
                FieldRule::required("attempt", Integer),
                FieldRule::required("enqueue_seq", Integer),
                FieldRule::required("phase_timestamps", Object),
                FieldRule::optional("result_ref", String),
                FieldRule::optional("instance_id", String),
                FieldRule::optional("last_error", String),
            ],
        }
    }

    pub fn instance() -> Self {
        use FieldType::*;
        Self {
            name: InstanceDescriptor::SCHEMA,
            fields: vec![
                FieldRule::required("instance_id", String),
                FieldRule::required("profile", Object),
                FieldRule::required("state", String),
                FieldRule::required("active_tasks", Array),
                FieldRule::required("mode", String),
                FieldRule::required("created_at", Integer),
                FieldRule::optional("terminated_at", Integer),
                FieldRule::optional("tasks_served", Integer),
            ],
        }
    }

    pub fn validate(&self, doc: &Value) -> Result<(), String> {
        let obj = doc.as_object().ok_or_else(|| format!("{}: document is not an object", self.name))?;
        for rule in &self.fields {
            match obj.get(rule.name) {
                None if rule.required => return Err(format!("{}: missing field `{}`", self.name, rule.name)),
                None => {}
                Some(Value::Null) if rule.nullable => {}
                Some(v) if !rule.ty.accepts(v) => {
                    return Err(format!("{}: field `{}` must be {:?}", self.name, rule.name, rule.ty));
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}

/// A typed document stored under a registered schema.
pub trait Document: Serialize + DeserializeOwned {
    const SCHEMA: &'static str;
}

impl Document for TaskRecord {
    const SCHEMA: &'static str = "task_record";
}

impl Document for InstanceDescriptor {
    const SCHEMA: &'static str = "instance";
}
