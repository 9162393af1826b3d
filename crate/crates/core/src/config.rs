// SPDX-License-Identifier: Apache-2.0

//! TOML or JSON configuration. The `sim` table overrides fields of the
//! chosen strategy preset, so a file only names what differs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::env::{LocalConfig, SimConfig, Strategy};
use crate::limits::{Limits, OwnerQuota, RateConfig, RateLimiter};
use crate::model::ExecutionMode;
use crate::scheduler::SchedulerConfig;

pub const CONFIG_ENV: &str = "MEGAFLOW_CONFIG";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("parse: {0}")]
    Parse(String),
    #[error("invalid: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuotaEntry {
    pub instance_hours: Option<f64>,
    pub max_in_flight: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LimitsSection {
    /// Global tier-1 rate shared by owners without their own setting.
    pub model_calls_per_sec: Option<f64>,
    pub burst: Option<u32>,
    pub per_owner_calls_per_sec: BTreeMap<String, f64>,
    /// Task slots; defaults to the fleet's total slots.
    pub capacity: Option<u32>,
    pub quota: BTreeMap<String, QuotaEntry>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerSection {
    pub retry_max: Option<u32>,
    pub pool_max: Option<u32>,
    pub mode_default: Option<ExecutionMode>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalSection {
    pub root: Option<PathBuf>,
    pub allowed_commands: Option<Vec<String>>,
    pub fleet_cap: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewaySection {
    pub bind: String,
    /// Artifacts and the metadata journal live here; in memory if unset.
    pub data_dir: Option<PathBuf>,
}

impl Default for GatewaySection {
    fn default() -> Self {
        Self { bind: "127.0.0.1:8080".into(), data_dir: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub limits: LimitsSection,
    pub scheduler: SchedulerSection,
    pub sim: SimConfig,
    pub local: LocalSection,
    pub gateway: GatewaySection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            limits: LimitsSection::default(),
            scheduler: SchedulerSection::default(),
            sim: SimConfig::distributed(),
            local: LocalSection::default(),
            gateway: GatewaySection::default(),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Raw {
    #[serde(default)]
    limits: LimitsSection,
    #[serde(default)]
    scheduler: SchedulerSection,
    #[serde(default)]
    sim: Option<Value>,
    #[serde(default)]
    local: LocalSection,
    #[serde(default)]
    gateway: GatewaySection,
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

impl Config {
    /// TOML unless the text parses as a JSON object.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let raw: Raw = if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?
        };
        let sim = match raw.sim {
            None => SimConfig::distributed(),
            Some(over) => {
                let strategy = match over.get("strategy") {
                    Some(s) => serde_json::from_value::<Strategy>(s.clone()).map_err(|e| ConfigError::Invalid(e.to_string()))?,
                    None => Strategy::Distributed,
                };
                let mut base = serde_json::to_value(SimConfig::for_strategy(strategy)).expect("preset serializes");
                merge(&mut base, over);
                serde_json::from_value(base).map_err(|e| ConfigError::Invalid(format!("sim: {e}")))?
            }
        };
        let cfg = Self { limits: raw.limits, scheduler: raw.scheduler, sim, local: raw.local, gateway: raw.gateway };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        Self::parse(&text)
    }

    /// `explicit`, else the file named by `MEGAFLOW_CONFIG`, else defaults.
    pub fn resolve(explicit: Option<&Path>) -> Result<Self, ConfigError> {
        if let Some(p) = explicit {
            return Self::load(p);
        }
        match std::env::var_os(CONFIG_ENV) {
            Some(p) if !p.is_empty() => Self::load(Path::new(&p)),
            _ => Ok(Self::default()),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.sim.validate().map_err(ConfigError::Invalid)?;
        let rates = self.limits.model_calls_per_sec.into_iter().chain(self.limits.per_owner_calls_per_sec.values().copied());
        for r in rates {
            if !(r.is_finite() && r > 0.0) {
                return Err(ConfigError::Invalid(format!("rate {r} must be positive")));
            }
        }
        if self.limits.capacity == Some(0) {
            return Err(ConfigError::Invalid("limits.capacity must be positive".into()));
        }
        for (owner, q) in &self.limits.quota {
            if q.instance_hours.is_some_and(|h| !(h.is_finite() && h >= 0.0)) {
                return Err(ConfigError::Invalid(format!("quota for {owner} must be non-negative")));
            }
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.sim.seed = seed;
        self
    }

    fn rate(&self, per_sec: f64) -> RateConfig {
        match self.limits.burst {
            Some(burst) => RateConfig { rate_per_sec: per_sec, burst: burst.max(1) },
            None => RateConfig::per_sec(per_sec),
        }
    }

    pub fn capacity(&self) -> u32 {
        self.limits.capacity.unwrap_or_else(|| self.sim.fleet_slots().min(u32::MAX as u64) as u32)
    }

    pub fn build_limits(&self) -> Limits {
        let mut limits = Limits::new(self.capacity());
        let per_owner = self.limits.per_owner_calls_per_sec.iter().map(|(o, r)| (o.clone(), self.rate(*r))).collect();
        limits.rate = RateLimiter::new(self.limits.model_calls_per_sec.map(|r| self.rate(r)), per_owner);
        for (owner, q) in &self.limits.quota {
            limits.quota.set_quota(owner, OwnerQuota { instance_hours: q.instance_hours, max_in_flight: q.max_in_flight });
        }
        limits
    }

    pub fn scheduler_config(&self) -> SchedulerConfig {
        let d = SchedulerConfig::default();
        SchedulerConfig {
            retry_max: self.scheduler.retry_max.unwrap_or(d.retry_max),
            pool_max: self.scheduler.pool_max.unwrap_or(self.sim.fleet_cap),
            mode_default: self.scheduler.mode_default.unwrap_or(d.mode_default),
            profile: self.sim.profile.clone(),
            quota_estimate_hours: self.sim.exec.mean_min / 60.0,
        }
    }

    pub fn local_config(&self) -> LocalConfig {
        let mut c = LocalConfig::default();
        if let Some(root) = &self.local.root {
            c.root = Some(root.clone());
        }
        if let Some(cmds) = &self.local.allowed_commands {
            c.allowed_commands = cmds.iter().cloned().collect();
        }
        if let Some(cap) = self.local.fleet_cap {
            c.fleet_cap = cap;
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_keys() {
        let cfg = Config::parse(
            r#"
            [limits]
            model_calls_per_sec = 5.0
            capacity = 12
            [limits.quota.alice]
            instance_hours = 3.5
            max_in_flight = 2
            [scheduler]
            retry_max = 1
            pool_max = 4
            mode_default = "persistent"
            [sim]
            strategy = "centralized"
            boot_min = 20.0
            "#,
        )
        .unwrap();
        assert_eq!(cfg.capacity(), 12);
        assert_eq!(cfg.sim.strategy, Strategy::Centralized);
        assert_eq!(cfg.sim.boot_min, 20.0);
        assert_eq!(cfg.sim.fleet_cap, 40);
        let s = cfg.scheduler_config();
        assert_eq!((s.retry_max, s.pool_max, s.mode_default), (1, 4, ExecutionMode::Persistent));
        let limits = cfg.build_limits();
        assert_eq!(limits.quota.usage("alice").quota.instance_hours, Some(3.5));
        assert!(limits.rate.is_limited("anyone"));
    }

    #[test]
    fn json_and_errors() {
        let cfg = Config::parse(r#"{"limits": {"capacity": 3}, "sim": {"seed": 9}}"#).unwrap();
        assert_eq!((cfg.capacity(), cfg.sim.seed, cfg.sim.strategy), (3, 9, Strategy::Distributed));
        assert!(Config::parse("[limits]\ncapacity = 0").is_err());
        assert!(Config::parse("[nonsense]\nx = 1").is_err());
        assert!(Config::parse("[sim]\nboot_min = -1.0").is_err());
    }

    #[test]
    fn defaults_to_fleet_slots() {
        let cfg = Config::default();
        assert_eq!(cfg.capacity(), 10_000);
        assert!(!cfg.build_limits().rate.is_limited("x"));
    }
}
