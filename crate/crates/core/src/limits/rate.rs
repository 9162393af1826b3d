// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;

use parking_lot::Mutex;

use crate::time::Millis;

// Float slack so that e.g. ten 0.1-token refills count as one whole token.
const EPS: f64 = 1e-9;

/// Token bucket: holds at most `burst` tokens, refilled continuously at
/// `rate_per_sec`. Starts full.
#[derive(Debug, Clone, PartialEq)]
pub struct RateGate {
    rate_per_sec: f64,
    burst: u32,
    tokens: f64,
    last_refill: Millis,
}

impl RateGate {
    pub fn new(rate_per_sec: f64, burst: u32, now: Millis) -> Self {
        assert!(rate_per_sec > 0.0 && rate_per_sec.is_finite(), "rate must be positive");
        assert!(burst >= 1, "burst must be at least 1");
        Self { rate_per_sec, burst, tokens: burst as f64, last_refill: now }
    }

    pub fn rate_per_sec(&self) -> f64 {
        self.rate_per_sec
    }

    pub fn burst(&self) -> u32 {
        self.burst
    }

    pub fn tokens(&self) -> f64 {
        self.tokens
    }

    fn refill(&mut self, now: Millis) {
        if now > self.last_refill {
            let dt = (now - self.last_refill) as f64 / 1000.0;
            self.tokens = (self.tokens + dt * self.rate_per_sec).min(self.burst as f64);
            self.last_refill = now;
        }
    }

    /// Takes one token, or returns how long until one exists.
    pub fn acquire(&mut self, now: Millis) -> Result<(), Millis> {
        self.refill(now);
        if self.tokens + EPS >= 1.0 {
            self.tokens = (self.tokens - 1.0).max(0.0);
            Ok(())
        } else {
            let missing = 1.0 - self.tokens;
            let wait = (missing / self.rate_per_sec * 1000.0 - EPS).ceil().max(1.0);
            Err(wait as Millis)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateConfig {
    pub rate_per_sec: f64,
    pub burst: u32,
}

impl RateConfig {
    /// Burst defaults to one second's worth of calls.
    pub fn per_sec(rate_per_sec: f64) -> Self {
        Self { rate_per_sec, burst: (rate_per_sec.ceil() as u32).max(1) }
    }
}

const GLOBAL: &str = "";

/// Tier 1. Owners with their own setting get a private bucket; everyone
/// else shares the global bucket. With no global setting, unlisted owners
/// are not limited.
#[derive(Debug, Default)]
pub struct RateLimiter {
    global: Option<RateConfig>,
    per_owner: BTreeMap<String, RateConfig>,
    gates: Mutex<BTreeMap<String, RateGate>>,
}

impl RateLimiter {
    pub fn unlimited() -> Self {
        Self::default()
    }

    pub fn new(global: Option<RateConfig>, per_owner: BTreeMap<String, RateConfig>) -> Self {
        Self { global, per_owner, gates: Mutex::new(BTreeMap::new()) }
    }

    pub fn global(cfg: RateConfig) -> Self {
        Self::new(Some(cfg), BTreeMap::new())
    }

    pub fn is_limited(&self, owner: &str) -> bool {
        self.per_owner.contains_key(owner) || self.global.is_some()
    }

    pub fn acquire(&self, owner: &str, now: Millis) -> Result<(), Millis> {
        let (key, cfg) = match self.per_owner.get(owner) {
            Some(cfg) => (owner, *cfg),
            None => match self.global {
                Some(cfg) => (GLOBAL, cfg),
                None => return Ok(()),
            },
        };
        let mut gates = self.gates.lock();
        gates
            .entry(key.to_string())
            .or_insert_with(|| RateGate::new(cfg.rate_per_sec, cfg.burst, now))
            .acquire(now)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn burst_then_retry_after() {
        let mut g = RateGate::new(10.0, 10, 0);
        for _ in 0..10 {
            assert_eq!(g.acquire(0), Ok(()));
        }
        assert_eq!(g.acquire(0), Err(100));
        assert_eq!(g.acquire(100), Ok(()));
    }

    #[test]
    fn idle_refill_capped_at_burst() {
        let mut g = RateGate::new(1.0, 3, 0);
        for _ in 0..3 {
            g.acquire(0).unwrap();
        }
        let granted = (0..10).filter(|_| g.acquire(5_000).is_ok()).count();
        assert_eq!(granted, 3);
    }

    #[test]
    fn single_token_bucket() {
        let mut g = RateGate::new(0.5, 1, 0);
        assert!(g.acquire(0).is_ok());
        assert_eq!(g.acquire(0), Err(2_000));
    }

    #[test]
    fn owners_fall_back_to_global_bucket() {
        let mut per = BTreeMap::new();
        per.insert("vip".to_string(), RateConfig { rate_per_sec: 1.0, burst: 2 });
        let lim = RateLimiter::new(Some(RateConfig { rate_per_sec: 1.0, burst: 1 }), per);
        assert!(lim.acquire("a", 0).is_ok());
        assert!(lim.acquire("b", 0).is_err(), "a and b share the global bucket");
        assert!(lim.acquire("vip", 0).is_ok());
        assert!(lim.acquire("vip", 0).is_ok());
        assert!(lim.acquire("vip", 0).is_err());
        assert!(RateLimiter::unlimited().acquire("x", 0).is_ok());
    }
}
