// SPDX-License-Identifier: Apache-2.0

pub mod model;
pub mod time;
pub mod persistence;
pub mod bus;
pub mod limits;
pub mod sim;
pub mod env;
pub mod scheduler;
pub mod runtime;
pub mod policy;
pub mod agent;
pub mod experiments;
pub mod config;
