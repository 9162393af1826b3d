// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::model::InstanceDescriptor;
use crate::time::ms_to_hours;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProfileCost {
    pub instances: u64,
    pub instance_hours: f64,
    pub hourly_rate_usd: f64,
    pub usd: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub by_profile: BTreeMap<String, ProfileCost>,
    pub instance_hours: f64,
    pub total_usd: f64,
}

impl CostReport {
    /// Fractional saving of `self` relative to `baseline`.
    pub fn reduction_vs(&self, baseline: &CostReport) -> f64 {
        if baseline.total_usd == 0.0 {
            return 0.0;
        }
        1.0 - self.total_usd / baseline.total_usd
    }
}

/// Bills every instance from request to termination, to the millisecond.
pub fn cost<'a>(instances: impl IntoIterator<Item = &'a InstanceDescriptor>) -> Result<CostReport, ExperimentError> {
    let mut report = CostReport::default();
    for inst in instances {
        let ms = inst.lifetime_ms().ok_or_else(|| ExperimentError::NotTerminated(inst.instance_id.clone()))?;
        let hours = ms_to_hours(ms);
        let p = report.by_profile.entry(inst.profile.name.clone()).or_default();
        p.instances += 1;
        p.instance_hours += hours;
        p.hourly_rate_usd = inst.profile.hourly_rate_usd;
        p.usd += hours * inst.profile.hourly_rate_usd;
    }
    report.instance_hours = report.by_profile.values().map(|p| p.instance_hours).sum();
    report.total_usd = report.by_profile.values().map(|p| p.usd).sum();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ExecutionMode, InstanceState, ResourceProfile};
    use crate::time::minutes_to_ms;

    fn fleet(n: usize, profile: ResourceProfile, minutes: f64) -> Vec<InstanceDescriptor> {
        (0..n)
            .map(|i| {
                let mut d = InstanceDescriptor::new(format!("i-{i}"), profile.clone(), ExecutionMode::Persistent, 0);
                for s in [InstanceState::Provisioning, InstanceState::Running, InstanceState::Draining, InstanceState::Terminated] {
                    d.transition(s, minutes_to_ms(minutes)).unwrap();
                }
                d
            })
            .collect()
    }

    #[test]
    fn published_fleet_totals() {
        let c = cost(&fleet(40, ResourceProfile::high_spec(), 110.0)).unwrap();
        assert!((c.total_usd - 40.0 * 110.0 / 60.0 * 20.05).abs() < 1e-6);
        assert!((c.total_usd - 1470.0).abs() / 1470.0 < 0.01);
        let d = cost(&fleet(2000, ResourceProfile::standard(), 100.0)).unwrap();
        assert!((d.total_usd - 1005.0).abs() < 0.01);
        assert_eq!(cost(&[]).unwrap().total_usd, 0.0);
    }

    #[test]
    fn live_instances_are_not_billable() {
        let d = InstanceDescriptor::new("i", ResourceProfile::standard(), ExecutionMode::Ephemeral, 0);
        assert!(matches!(cost([&d]), Err(ExperimentError::NotTerminated(_))));
    }
}
