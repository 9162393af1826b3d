// SPDX-License-Identifier: Apache-2.0

//! HTTP API and command-line front end.

pub mod cli;
pub mod server;
