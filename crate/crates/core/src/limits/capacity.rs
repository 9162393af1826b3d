// SPDX-License-Identifier: Apache-2.0

use std::collections::{BTreeMap, VecDeque};

use parking_lot::{Condvar, Mutex};

use super::LimitError;

/// Proof of `n` held slots. Releasing the same ticket twice is an error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Ticket {
    pub id: u64,
    pub n: u32,
}

#[derive(Debug, Default)]
struct State {
    held: u32,
    max_held: u32,
    next_id: u64,
    outstanding: BTreeMap<u64, u32>,
    waiters: VecDeque<u64>,
}

impl State {
    fn grant(&mut self, n: u32) -> Ticket {
        self.next_id += 1;
        self.held += n;
        self.max_held = self.max_held.max(self.held);
        self.outstanding.insert(self.next_id, n);
        Ticket { id: self.next_id, n }
    }
}

/// Tier 2: a single authoritative slot counter with FIFO waiters.
#[derive(Debug)]
pub struct CapacitySemaphore {
    capacity: u32,
    state: Mutex<State>,
    freed: Condvar,
}

impl CapacitySemaphore {
    pub fn new(capacity: u32) -> Self {
        assert!(capacity >= 1, "capacity must be positive");
        Self { capacity, state: Mutex::new(State::default()), freed: Condvar::new() }
    }

    pub fn capacity(&self) -> u32 {
        self.capacity
    }

    pub fn held(&self) -> u32 {
        self.state.lock().held
    }

    /// High-water mark of `held` since creation.
    pub fn max_held(&self) -> u32 {
        self.state.lock().max_held
    }

    pub fn outstanding(&self) -> usize {
        self.state.lock().outstanding.len()
    }

    fn check(&self, n: u32) -> Result<(), LimitError> {
        if n == 0 || n > self.capacity {
            return Err(LimitError::RequestExceedsTotalCapacity { requested: n, capacity: self.capacity });
        }
        Ok(())
    }

    /// Grants immediately or returns `None`. Never overtakes queued waiters.
    pub fn try_acquire(&self, n: u32) -> Result<Option<Ticket>, LimitError> {
        self.check(n)?;
        let mut s = self.state.lock();
        if s.waiters.is_empty() && s.held + n <= self.capacity {
            Ok(Some(s.grant(n)))
        } else {
            Ok(None)
        }
    }

    /// Blocks until `n` slots are free and every earlier waiter is served.
    pub fn acquire(&self, n: u32) -> Result<Ticket, LimitError> {
        self.check(n)?;
        let mut s = self.state.lock();
        if s.waiters.is_empty() && s.held + n <= self.capacity {
            return Ok(s.grant(n));
        }
        s.next_id += 1;
        let me = s.next_id;
        s.waiters.push_back(me);
        while !(s.waiters.front() == Some(&me) && s.held + n <= self.capacity) {
            self.freed.wait(&mut s);
        }
        s.waiters.pop_front();
        let t = s.grant(n);
        drop(s);
        // The next waiter may fit too.
        self.freed.notify_all();
        Ok(t)
    }

    pub fn release(&self, ticket: Ticket) -> Result<(), LimitError> {
        let mut s = self.state.lock();
        match s.outstanding.remove(&ticket.id) {
            Some(n) => {
                s.held -= n;
                drop(s);
                self.freed.notify_all();
                Ok(())
            }
            None => Err(LimitError::DoubleRelease(ticket.id)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;
    use std::time::Duration;

    #[test]
    fn third_waits_until_release() {
        let sem = Arc::new(CapacitySemaphore::new(2));
        let a = sem.acquire(1).unwrap();
        let _b = sem.acquire(1).unwrap();
        assert_eq!(sem.try_acquire(1).unwrap(), None);
        let s2 = sem.clone();
        let h = std::thread::spawn(move || s2.acquire(1).unwrap());
        std::thread::sleep(Duration::from_millis(30));
        assert!(!h.is_finished());
        sem.release(a).unwrap();
        h.join().unwrap();
        assert_eq!(sem.held(), 2);
    }

    #[test]
    fn oversized_and_double_release() {
        let sem = CapacitySemaphore::new(2);
        assert!(matches!(sem.acquire(3), Err(LimitError::RequestExceedsTotalCapacity { .. })));
        let t = sem.try_acquire(2).unwrap().unwrap();
        sem.release(t).unwrap();
        assert_eq!(sem.release(t), Err(LimitError::DoubleRelease(t.id)));
        assert_eq!(sem.held(), 0);
    }

    #[test]
    fn waiters_are_served_in_arrival_order() {
        let sem = Arc::new(CapacitySemaphore::new(1));
        let first = sem.acquire(1).unwrap();
        let order = Arc::new(Mutex::new(Vec::new()));
        let mut hs = Vec::new();
        for i in 0..4 {
            let (s, o) = (sem.clone(), order.clone());
            hs.push(std::thread::spawn(move || {
                let t = s.acquire(1).unwrap();
                o.lock().push(i);
                s.release(t).unwrap();
            }));
            // Let each thread enqueue before the next one starts.
            while sem.state.lock().waiters.len() < i + 1 {
                std::thread::yield_now();
            }
        }
        sem.release(first).unwrap();
        for h in hs {
            h.join().unwrap();
        }
        assert_eq!(*order.lock(), [0, 1, 2, 3]);
        assert_eq!(sem.max_held(), 1);
    }
}
