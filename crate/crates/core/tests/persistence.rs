// SPDX-License-Identifier: Apache-2.0

use std::collections::VecDeque;
use std::io::{self, Read};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Barrier};

use proptest::prelude::*;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use fleetflow::model::{AgentTask, TaskRecord, TaskSpec};
use fleetflow::persistence::{ArtifactStore, MetadataStore, StoreError, TaskQueue};

#[test]
fn concurrent_compare_and_set_counts_every_success() {
    let store = Arc::new(MetadataStore::new());
    let rec = TaskRecord::new("task-000001", TaskSpec::new(AgentTask::new("k", "img")), 0);
    store.put("tasks/task-000001", &rec, None).unwrap();
    let successes = Arc::new(AtomicU64::new(0));
    let writers = 8;
    let barrier = Arc::new(Barrier::new(writers));
    let handles: Vec<_> = (0..writers)
        .map(|w| {
            let (store, successes, barrier) = (store.clone(), successes.clone(), barrier.clone());
            std::thread::spawn(move || {
                barrier.wait();
                let mut conflicts = 0;
                for i in 0..500 {
                    let (v, mut doc): (u64, TaskRecord) = store.get("tasks/task-000001").unwrap().unwrap();
                    doc.attempt = doc.attempt.wrapping_add(1);
                    doc.last_error = Some(format!("writer {w} round {i}"));
                    match store.put("tasks/task-000001", &doc, Some(v)) {
                        Ok(_) => {
                            successes.fetch_add(1, Ordering::SeqCst);
                        }
                        Err(StoreError::VersionConflict { .. }) => conflicts += 1,
                        Err(e) => panic!("{e}"),
                    }
                }
                conflicts
            })
        })
        .collect();
    let conflicts: u64 = handles.into_iter().map(|h| h.join().unwrap()).sum();
    let ok = successes.load(Ordering::SeqCst);
    assert_eq!(ok + conflicts, writers as u64 * 500);
    // Version 1 was the seed write; each successful CAS adds exactly one.
    assert_eq!(store.version("tasks/task-000001"), 1 + ok);
    let (_, last): (u64, TaskRecord) = store.get("tasks/task-000001").unwrap().unwrap();
    assert_eq!(last.attempt as u64, ok);
}

#[test]
fn fifo_matches_reference_over_random_interleavings() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let q = TaskQueue::new();
    let mut reference = VecDeque::new();
    let mut next = 0u64;
    let mut last_seq = 0;
    for _ in 0..10_000 {
        if reference.is_empty() || rng.random_bool(0.55) {
            let id = format!("t{next}");
            next += 1;
            q.enqueue(&id).unwrap();
            reference.push_back(id);
        } else {
            let got = q.dequeue().expect("reference is non-empty");
            assert_eq!(Some(got.task_id), reference.pop_front());
            assert!(got.seq > last_seq);
            last_seq = got.seq;
        }
    }
    while let Some(got) = q.dequeue() {
        assert_eq!(Some(got.task_id), reference.pop_front());
    }
    assert!(reference.is_empty());
    assert!(q.dequeue().is_none());
}

#[test]
fn concurrent_consumers_each_get_distinct_increasing_items() {
    let q = Arc::new(TaskQueue::new());
    let producers: Vec<_> = (0..4)
        .map(|p| {
            let q = q.clone();
            std::thread::spawn(move || {
                for i in 0..1_000 {
                    q.enqueue(&format!("p{p}-{i}")).unwrap();
                }
            })
        })
        .collect();
    let consumers: Vec<_> = (0..4)
        .map(|_| {
            let q = q.clone();
            std::thread::spawn(move || {
                let mut seen = Vec::new();
                let mut idle = 0;
                while idle < 1_000 {
                    match q.dequeue() {
                        Some(e) => {
                            seen.push(e.seq);
                            idle = 0;
                        }
                        None => {
                            idle += 1;
                            std::thread::yield_now();
                        }
                    }
                }
                seen
            })
        })
        .collect();
    for p in producers {
        p.join().unwrap();
    }
    let mut all = Vec::new();
    for c in consumers {
        let seen = c.join().unwrap();
        assert!(seen.windows(2).all(|w| w[0] < w[1]), "each consumer sees increasing seqs");
        all.extend(seen);
    }
    while let Some(e) = q.dequeue() {
        all.push(e.seq);
    }
    all.sort_unstable();
    assert_eq!(all, (1..=4_000).collect::<Vec<u64>>(), "every item delivered exactly once");
}

#[test]
fn one_mib_round_trip_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let store = ArtifactStore::open(dir.path()).unwrap();
    let mut blob = vec![0u8; 1 << 20];
    ChaCha8Rng::seed_from_u64(5).fill_bytes(&mut blob);
    store.put_artifact("runs/r/tasks/t/result.json", &blob).unwrap();
    assert_eq!(store.get_artifact("runs/r/tasks/t/result.json").unwrap(), blob);
    assert!(matches!(store.get_artifact("runs/r/tasks/t/missing.json"), Err(StoreError::KeyNotFound(_))));
}

/// Yields `good` bytes and then an I/O error, as a writer crashing mid-stream would.
struct Crashing {
    good: usize,
}

impl Read for Crashing {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        if self.good == 0 {
            return Err(io::Error::other("injected crash"));
        }
        let n = buf.len().min(self.good);
        buf[..n].fill(0xAB);
        self.good -= n;
        Ok(n)
    }
}

#[test]
fn crash_mid_put_leaves_no_key() {
    let dir = tempfile::tempdir().unwrap();
    for store in [ArtifactStore::open(dir.path()).unwrap(), ArtifactStore::in_memory()] {
        let key = "runs/r/tasks/t/trajectory.jsonl";
        assert!(store.put_from_reader(key, Crashing { good: 300_000 }).is_err());
        assert!(!store.exists(key));
        assert!(matches!(store.get_artifact(key), Err(StoreError::KeyNotFound(_))));
        // No partial object is visible through listing, and the key is still writable.
        assert!(store.list("runs/r").unwrap().is_empty());
        store.put_artifact(key, b"{}\n").unwrap();
        assert_eq!(store.get_artifact(key).unwrap(), b"{}\n");
    }
}

#[test]
fn metadata_rejects_schema_violations() {
    let store = MetadataStore::new();
    let doc = json!({"task_id": "x", "spec": {}, "attempt": 0});
    assert!(matches!(store.put_record("tasks/x", "task_record", doc, None), Err(StoreError::SchemaViolation(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn artifact_round_trip_is_bit_exact(bytes in proptest::collection::vec(any::<u8>(), 0..4096), name in "[a-z]{1,8}") {
        let store = ArtifactStore::in_memory();
        let key = format!("runs/p/tasks/{name}/result.json");
        store.put_artifact(&key, &bytes).unwrap();
        prop_assert_eq!(store.get_artifact(&key).unwrap(), bytes);
    }
}
