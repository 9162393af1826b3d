// SPDX-License-Identifier: Apache-2.0

// Shared between the individual suites and the acceptance run.
#![allow(dead_code)]

pub mod reference;
pub mod safety;
