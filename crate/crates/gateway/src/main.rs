// SPDX-License-Identifier: Apache-2.0

use clap::Parser;
use fleetflow_gateway::cli::{self, Cli, Command};

fn main() -> anyhow::Result<()> {
    let args = Cli::parse();
    // Per-dispatch logging is useful from a server, noise from a batch run.
    let default = if matches!(args.command, Command::Serve { .. }) { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(default)).init();
    cli::run(args)
}
