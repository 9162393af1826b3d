// SPDX-License-Identifier: Apache-2.0

//! Follow the control plane's event log while a small batch runs, then
//! resume a second subscriber from a saved cursor.
//!
//!     cargo run --example event_stream

use std::sync::Arc;

use fleetflow::env::SimConfig;
use fleetflow::limits::Limits;
use fleetflow::model::{AgentTask, EventKind, ExecutionMode, TaskSpec, WorkloadSpec};
use fleetflow::persistence::MetadataStore;
use fleetflow::runtime::SimRuntime;
use fleetflow::scheduler::SchedulerConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rt = SimRuntime::build(SimConfig::distributed(), SchedulerConfig::default(), Arc::new(Limits::new(2)), Arc::new(MetadataStore::new()));
    let bus = rt.control().bus().clone();
    let mut tasks = bus.subscribe([EventKind::TaskCompleted, EventKind::TaskFailed], 0);
    let mut all = bus.subscribe(EventKind::ALL, 0);

    for (i, mode) in [ExecutionMode::Persistent, ExecutionMode::Ephemeral, ExecutionMode::Persistent].into_iter().enumerate() {
        let spec = TaskSpec::new(AgentTask::new(format!("job-{i}"), "python:3.11"))
            .mode(mode)
            .workload(WorkloadSpec::Fixed { duration_ms: (10 + 5 * i as u64) * 60_000 });
        rt.submit_at(spec, 0)?;
    }
    // Read half the log, remember where we stopped, then let the run finish.
    rt.run_until(30 * 60_000);
    let head = all.poll()?;
    let cursor = head.last().map_or(0, |e| e.seq);
    all.ack(cursor);
    rt.run_until_idle()?;

    for e in head.iter().chain(all.poll()?.iter()) {
        println!("{:>4} {:>8.2} min  {:<22} {}", e.seq, e.timestamp as f64 / 60_000.0, format!("{:?}", e.kind), e.subject_id);
    }
    let resumed = bus.subscribe(EventKind::ALL, cursor).poll()?;
    println!("resuming from seq {cursor} replays {} events", resumed.len());
    println!("{} task outcomes seen by the filtered subscriber", tasks.poll()?.len());
    Ok(())
}
