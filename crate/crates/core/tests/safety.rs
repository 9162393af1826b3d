// SPDX-License-Identifier: Apache-2.0

mod support;

use std::cell::Cell;
use std::time::Instant;

use support::safety::*;

fn each_schedule(check: impl Fn(&Outcome)) {
    let started = Instant::now();
    for seed in 0..SCHEDULES {
        check(&schedule(seed));
    }
    assert!(started.elapsed().as_secs() < 300, "suite took {:?}", started.elapsed());
}

#[test]
fn executing_never_exceeds_capacity() {
    each_schedule(check_capacity);
}

#[test]
fn admission_follows_enqueue_order() {
    each_schedule(check_fifo);
}

#[test]
fn ephemeral_instances_are_single_use() {
    each_schedule(check_single_use);
}

#[test]
fn dispatch_only_to_running_instances() {
    each_schedule(check_running);
}

#[test]
fn duplicate_delivery_never_double_releases() {
    let with_duplicates = Cell::new(0);
    each_schedule(|o| {
        check_no_double_release(o);
        with_duplicates.set(with_duplicates.get() + (o.duplicates > 0) as u64);
    });
    assert!(with_duplicates.get() > SCHEDULES / 2);
}
