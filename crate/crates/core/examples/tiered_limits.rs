// SPDX-License-Identifier: Apache-2.0

//! Model-call rate gate, capacity semaphore and owner quotas, each refusing
//! in turn.
//!
//!     cargo run --example tiered_limits

use std::collections::BTreeMap;

use fleetflow::limits::{Limits, OwnerQuota, RateConfig, RateLimiter};

fn main() {
    let mut limits = Limits::new(3);
    limits.rate = RateLimiter::new(
        Some(RateConfig { rate_per_sec: 2.0, burst: 2 }),
        BTreeMap::from([("batch".to_string(), RateConfig { rate_per_sec: 10.0, burst: 10 })]),
    );
    limits.quota.set_quota("alice", OwnerQuota { instance_hours: Some(1.0), max_in_flight: None });

    println!("-- rate: 2/s burst 2 for everyone but 'batch'");
    for t in [0, 0, 0, 500] {
        println!("  alice call at {t:>4} ms: {:?}", limits.model_call("alice", t));
    }

    println!("-- capacity: 3 slots");
    let held: Vec<_> = (0..3).map(|_| limits.admit_task("bob", 0.1, 1).unwrap()).collect();
    println!("  fourth task: {:?}", limits.admit_task("bob", 0.1, 1).err());
    for a in held {
        limits.finish_task(a, 0.1).unwrap();
    }

    println!("-- quota: alice has 1.0 instance-hour");
    let a = limits.admit_task("alice", 0.75, 1).unwrap();
    println!("  second 0.75 h task: {:?}", limits.admit_task("alice", 0.75, 1).err());
    limits.finish_task(a, 0.5).unwrap();
    println!("  after settling at 0.5 h: {:?}", limits.quota.usage("alice"));
}
