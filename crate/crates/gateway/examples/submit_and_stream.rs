// SPDX-License-Identifier: Apache-2.0

//! Start the HTTP gateway in-process on an ephemeral port, submit tasks,
//! and follow the server-sent event stream until they complete.
//!
//!     cargo run -p fleetflow-gateway --example submit_and_stream

use std::io::{BufRead, BufReader};

use serde_json::{json, Value};

use fleetflow::config::Config;
use fleetflow_gateway::server::{router, AppState, Backend};

fn main() -> anyhow::Result<()> {
    let state = AppState::build(&Config::default(), Backend::Sim, None)?;
    let driver = state.spawn_driver();
    let listener = std::net::TcpListener::bind("127.0.0.1:0")?;
    let base = format!("http://{}", listener.local_addr()?);
    listener.set_nonblocking(true)?;
    let app = router(state.clone());
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().expect("runtime");
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener).expect("listener");
            axum::serve(listener, app).await.expect("serve");
        });
    });

    println!("gateway at {base}");
    let http = reqwest::blocking::Client::new();
    let mut ids = Vec::new();
    for (key, minutes) in [("lint", 5), ("unit-tests", 12)] {
        let spec = json!({
            "task": {"task_key": key, "env_spec": {"image": "python:3.11"}},
            "mode": "persistent",
            "workload": {"kind": "fixed", "duration_ms": minutes * 60_000},
        });
        let resp: Value = http.post(format!("{base}/v1/tasks")).json(&spec).send()?.error_for_status()?.json()?;
        println!("submitted {key}: {}", resp["task_id"]);
        ids.push(resp["task_id"].as_str().unwrap_or_default().to_string());
    }

    let stream = http.get(format!("{base}/v1/events?from_seq=0")).send()?.error_for_status()?;
    let mut done = 0;
    let mut event = String::new();
    for line in BufReader::new(stream).lines() {
        let line = line?;
        if let Some(kind) = line.strip_prefix("event:") {
            event = kind.trim().to_string();
        } else if let Some(data) = line.strip_prefix("data:") {
            let ev: Value = serde_json::from_str(data.trim())?;
            println!("{:>3} {:<22} {:<12} t={} ms", ev["seq"], event, ev["subject_id"].as_str().unwrap_or(""), ev["timestamp"]);
            if event == "TaskCompleted" && ids.iter().any(|id| ev["subject_id"] == id.as_str()) {
                done += 1;
                if done == ids.len() {
                    break;
                }
            }
        }
    }
    for id in &ids {
        let view: Value = http.get(format!("{base}/v1/tasks/{id}")).send()?.json()?;
        println!("{id}: {} (version {})", view["status"], view["version"]);
    }
    state.stop();
    driver.join().ok();
    Ok(())
}
