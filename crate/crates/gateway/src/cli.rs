// SPDX-License-Identifier: Apache-2.0

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use fleetflow::config::Config;
use fleetflow::env::Strategy;
use fleetflow::experiments::{load_report, render_summary, run_experiment, ExperimentKind, ExperimentSpec};
use fleetflow::model::{AgentTask, ExecutionMode, TaskSpec, WorkloadSpec};
use fleetflow::persistence::{task_artifact_key, RESULT_ARTIFACT};
use fleetflow::policy::ScriptedPolicy;
use fleetflow::time::ms_to_minutes;

use crate::server::{self, AppState, Backend, TaskView};

#[derive(Debug, Parser)]
#[command(name = "fleetflow", version, about = "Elastic environment fleet for agent rollouts")]
pub struct Cli {
    /// TOML or JSON config; falls back to $MEGAFLOW_CONFIG.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value = "sim")]
    pub backend: Backend,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the HTTP API.
    Serve {
        #[arg(long)]
        bind: Option<String>,
        /// Scripted policies (JSON or JSONL), registered as `scripted`.
        #[arg(long)]
        scripts: Option<PathBuf>,
    },
    /// Submit a task to a running server.
    Submit(SubmitArgs),
    /// Show one task, or list all of them.
    Status {
        task_id: Option<String>,
        #[arg(long)]
        server: Option<String>,
    },
    /// Print a rollout's result artifact, or a task's phase timings.
    Results {
        task_id: String,
        #[arg(long)]
        server: Option<String>,
    },
    #[command(subcommand)]
    Experiment(ExperimentCmd),
}

#[derive(Debug, Args)]
pub struct SubmitArgs {
    #[arg(long)]
    pub server: Option<String>,
    /// A task spec as JSON, or JSONL with one spec per line.
    #[arg(long, conflicts_with_all = ["task_key", "image"])]
    pub file: Option<PathBuf>,
    #[arg(long, required_unless_present = "file")]
    pub task_key: Option<String>,
    #[arg(long, required_unless_present = "file")]
    pub image: Option<String>,
    #[arg(long)]
    pub mode: Option<ExecutionMode>,
    #[arg(long, default_value = "default")]
    pub owner: String,
    /// Fixed execution time instead of a sampled one.
    #[arg(long, conflicts_with = "policy")]
    pub duration_ms: Option<u64>,
    /// Run an agent loop with this registered policy.
    #[arg(long)]
    pub policy: Option<String>,
    #[arg(long, default_value = "cli")]
    pub run_id: String,
    #[arg(long, default_value_t = 100)]
    pub max_steps: u32,
}

#[derive(Debug, Subcommand)]
pub enum ExperimentCmd {
    /// Run an experiment in virtual time and write its CSV outputs.
    Run {
        #[arg(long)]
        kind: ExperimentKind,
        #[arg(long, default_value = "distributed")]
        strategy: Strategy,
        /// Comma-separated grid; defaults depend on the experiment.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<u32>>,
        #[arg(long, default_value_t = 1)]
        reps: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the summary of a finished run.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

fn server_url(cfg: &Config, explicit: Option<&str>) -> String {
    let raw = explicit.map(str::to_string).unwrap_or_else(|| cfg.gateway.bind.clone());
    let raw = raw.trim_end_matches('/');
    if raw.starts_with("http://") || raw.starts_with("https://") {
        raw.to_string()
    } else {
        format!("http://{raw}")
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = Config::resolve(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    match cli.command {
        Command::Serve { bind, scripts } => serve(cfg, cli.backend, bind, scripts.as_deref()),
        Command::Submit(args) => submit(&cfg, args),
        Command::Status { task_id, server } => status(&cfg, server.as_deref(), task_id.as_deref()),
        Command::Results { task_id, server } => results(&cfg, server.as_deref(), &task_id),
        Command::Experiment(ExperimentCmd::Run { kind, strategy, grid, reps, out }) => {
            if cli.backend == Backend::Local {
                bail!("experiments run in virtual time; use --backend sim");
            }
            let mut spec = ExperimentSpec::new(kind, strategy);
            if let Some(g) = grid {
                spec.grid = g;
            }
            spec.repetitions = reps;
            spec.seed = cli.seed.unwrap_or(cfg.sim.seed);
            experiment_run(&spec, &out)
        }
        Command::Experiment(ExperimentCmd::Report { out }) => {
            let report = load_report(&out)?;
            print!("{}", render_summary(&report.summary));
            Ok(())
        }
    }
}

fn serve(mut cfg: Config, backend: Backend, bind: Option<String>, scripts: Option<&Path>) -> anyhow::Result<()> {
    if let Some(b) = bind {
        cfg.gateway.bind = b;
    }
    let scripts = scripts.map(ScriptedPolicy::load).transpose()?;
    let state = AppState::build(&cfg, backend, scripts)?;
    let driver = state.spawn_driver();
    let rt = tokio::runtime::Runtime::new()?;
    let res = rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&cfg.gateway.bind).await.with_context(|| format!("binding {}", cfg.gateway.bind))?;
        log::info!("listening on {} with {}", listener.local_addr()?, server::describe(&cfg, backend));
        axum::serve(listener, server::router(state.clone()))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        anyhow::Ok(())
    });
    state.stop();
    let _ = driver.join();
    res
}

fn specs_from_args(args: &SubmitArgs) -> anyhow::Result<Vec<Value>> {
    if let Some(path) = &args.file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        if let Ok(v) = serde_json::from_str::<Value>(&text) {
            return Ok(match v {
                Value::Array(items) => items,
                other => vec![other],
            });
        }
        return text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).context("parsing spec line"))
            .collect();
    }
    let (Some(key), Some(image)) = (&args.task_key, &args.image) else {
        bail!("--task-key and --image are required without --file");
    };
    let mut task = AgentTask::new(key, image);
    task.max_steps = args.max_steps;
    let mut spec = TaskSpec::new(task).owner(args.owner.clone());
    spec.mode = args.mode;
    if let Some(ms) = args.duration_ms {
        spec = spec.workload(WorkloadSpec::Fixed { duration_ms: ms });
    }
    if let Some(policy) = &args.policy {
        spec = spec.workload(WorkloadSpec::Rollout {
            policy_id: policy.clone(),
            run_id: args.run_id.clone(),
            replica_index: 0,
            seed: 0,
        });
    }
    Ok(vec![serde_json::to_value(spec)?])
}

fn check(resp: reqwest::blocking::Response) -> anyhow::Result<reqwest::blocking::Response> {
    if resp.status().is_success() {
        return Ok(resp);
    }
    let status = resp.status();
    let body = resp.text().unwrap_or_default();
    bail!("{status}: {body}")
}

fn submit(cfg: &Config, args: SubmitArgs) -> anyhow::Result<()> {
    let base = server_url(cfg, args.server.as_deref());
    let client = reqwest::blocking::Client::new();
    for spec in specs_from_args(&args)? {
        let resp = check(client.post(format!("{base}/v1/tasks")).json(&spec).send()?)?;
        let sub: server::Submitted = resp.json()?;
        println!("{}", sub.task_id);
    }
    Ok(())
}

fn status(cfg: &Config, server: Option<&str>, task_id: Option<&str>) -> anyhow::Result<()> {
    let base = server_url(cfg, server);
    let client = reqwest::blocking::Client::new();
    match task_id {
        Some(id) => {
            let view: TaskView = check(client.get(format!("{base}/v1/tasks/{id}")).send()?)?.json()?;
            let attempt = view.record.as_ref().map_or(0, |r| r.attempt);
            println!("{}\t{}\tattempt={}\tversion={}", view.task_id, view.status, attempt, view.version);
        }
        None => {
            let list: Vec<Value> = check(client.get(format!("{base}/v1/tasks")).send()?)?.json()?;
            for t in list {
                println!("{}\t{}\tattempt={}", t["task_id"].as_str().unwrap_or(""), t["status"].as_str().unwrap_or(""), t["attempt"]);
            }
        }
    }
    Ok(())
}

fn results(cfg: &Config, server: Option<&str>, task_id: &str) -> anyhow::Result<()> {
    let base = server_url(cfg, server);
    let client = reqwest::blocking::Client::new();
    let view: TaskView = check(client.get(format!("{base}/v1/tasks/{task_id}")).send()?)?.json()?;
    let Some(rec) = view.record else {
        bail!("{task_id} has not reached the control plane yet");
    };
    if let WorkloadSpec::Rollout { run_id, .. } = &rec.spec.workload {
        let key = task_artifact_key(run_id, task_id, RESULT_ARTIFACT);
        let resp = client.get(format!("{base}/v1/artifacts/{key}")).send()?;
        if resp.status().is_success() {
            println!("{}", resp.text()?);
            return Ok(());
        }
    }
    let ts = &rec.phase_timestamps;
    let fmt = |t: Option<u64>| t.map_or("-".to_string(), |ms| format!("{:.2}", ms_to_minutes(ms)));
    println!("{task_id}\t{:?}", rec.status);
    println!("submitted  {} min", fmt(ts.submitted));
    println!("scheduled  {} min", fmt(ts.scheduled));
    println!("env_ready  {} min", fmt(ts.env_ready));
    println!("exec_start {} min", fmt(ts.exec_start));
    println!("exec_end   {} min", fmt(ts.exec_end));
    Ok(())
}

fn experiment_run(spec: &ExperimentSpec, out: &Path) -> anyhow::Result<()> {
    let started = Instant::now();
    let report = run_experiment(spec, out)?;
    print!("{}", render_summary(&report.summary));
    println!(
        "virtual {:.1} min, wall {:.2} s, {} files in {}",
        ms_to_minutes(report.virtual_ms),
        started.elapsed().as_secs_f64(),
        report.files.len() + 1,
        out.display()
    );
    Ok(())
}
