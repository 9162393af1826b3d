// SPDX-License-Identifier: Apache-2.0

//! Frozen CSV layouts. Timestamps are integer virtual milliseconds.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ExperimentError, LatencyRow, StartupRow, TaskTiming, ThroughputRow};
use crate::env::UtilizationSample;
use crate::model::InstanceDescriptor;
use crate::time::Millis;

/// `task_id,submitted,scheduled,env_ready,exec_start,exec_end`
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRow {
    pub task_id: String,
    pub submitted: Millis,
    pub scheduled: Millis,
    pub env_ready: Millis,
    pub exec_start: Millis,
    pub exec_end: Millis,
}

/// `instance_id,profile,mode,created_at,terminated_at,hourly_rate_usd`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRow {
    pub instance_id: String,
    pub profile: String,
    pub mode: String,
    pub created_at: Millis,
    pub terminated_at: Millis,
    pub hourly_rate_usd: f64,
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<PathBuf, ExperimentError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(path.to_path_buf())
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, ExperimentError> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<Result<Vec<T>, _>>()?;
    Ok(rows)
}

pub(super) fn write_task_csv(path: &Path, tasks: &[TaskTiming]) -> Result<PathBuf, ExperimentError> {
    write_rows(
        path,
        tasks.iter().map(|t| TaskRow {
            task_id: t.task_id.clone(),
            submitted: t.submitted,
            scheduled: t.scheduled,
            env_ready: t.env_ready,
            exec_start: t.exec_start,
            exec_end: t.exec_end,
        }),
    )
}

pub(super) fn write_instance_csv(path: &Path, instances: &[InstanceDescriptor]) -> Result<PathBuf, ExperimentError> {
    write_rows(
        path,
        instances.iter().map(|i| InstanceRow {
            instance_id: i.instance_id.clone(),
            profile: i.profile.name.clone(),
            mode: i.mode.as_str().to_string(),
            created_at: i.created_at,
            terminated_at: i.terminated_at.unwrap_or(i.created_at),
            hourly_rate_usd: i.profile.hourly_rate_usd,
        }),
    )
}

pub fn read_task_csv(path: &Path) -> Result<Vec<TaskRow>, ExperimentError> {
    read_rows(path)
}

pub fn read_instance_csv(path: &Path) -> Result<Vec<InstanceRow>, ExperimentError> {
    read_rows(path)
}

#[derive(Serialize)]
struct FlatThroughput {
    tasks: u32,
    makespan_min: f64,
    cost_usd: f64,
    instance_hours: f64,
    completion_mean_min: f64,
    completion_ci_lo: f64,
    completion_ci_hi: f64,
}

pub(super) fn write_throughput_csv(path: &Path, rows: &[ThroughputRow]) -> Result<PathBuf, ExperimentError> {
    write_rows(
        path,
        rows.iter().map(|r| FlatThroughput {
            tasks: r.tasks,
            makespan_min: r.makespan_min,
            cost_usd: r.cost_usd,
            instance_hours: r.instance_hours,
            completion_mean_min: r.completion.mean,
            completion_ci_lo: r.completion.lo,
            completion_ci_hi: r.completion.hi,
        }),
    )
}

#[derive(Serialize)]
struct FlatLatency<'a> {
    config: &'a str,
    tasks: u32,
    submission_min: f64,
    startup_min: f64,
    scheduling_min: f64,
    execution_min: f64,
    total_min: f64,
}

pub(super) fn write_latency_csv(path: &Path, rows: &[LatencyRow]) -> Result<PathBuf, ExperimentError> {
    write_rows(
        path,
        rows.iter().map(|r| FlatLatency {
            config: r.config.as_str(),
            tasks: r.tasks,
            submission_min: r.phases.submission_min,
            startup_min: r.phases.startup_min,
            scheduling_min: r.phases.scheduling_min,
            execution_min: r.phases.execution_min,
            total_min: r.phases.total_min,
        }),
    )
}

pub(super) fn write_utilization_csv(path: &Path, trace: &[UtilizationSample]) -> Result<PathBuf, ExperimentError> {
    write_rows(path, trace)
}

pub(super) fn write_startup_csv(path: &Path, rows: &[StartupRow]) -> Result<PathBuf, ExperimentError> {
    write_rows(path, rows)
}
