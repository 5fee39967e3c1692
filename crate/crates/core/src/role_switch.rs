//! Online role-switching controller.
//!
//! The controller samples per-stage backlog at a fixed interval and moves one
//! instance at a time from the least loaded stage to the most loaded one. The
//! move itself (offload, migration, onload) is carried out by the simulation
//! engine; this module holds the parameters, the pure decision rule and the
//! switch log.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::StageRole;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerParams {
    /// Seconds between monitor samples.
    pub monitor_interval: f64,
    /// Switch when `(max_load + smoothing) / (min_load + smoothing)` exceeds this.
    pub imbalance_threshold: f64,
    pub min_instances_per_stage: u32,
    /// Minimum seconds between two switch decisions.
    pub cooldown: f64,
    /// Additive smoothing on stage loads, seconds.
    pub smoothing: f64,
    /// Registration delay after migration before the instance pulls work.
    pub onload_delay: f64,
    /// A stage only gives up an instance if its busy fraction, spread over
    /// one fewer instance, stays below this.
    pub max_source_utilization: f64,
}

impl Default for ControllerParams {
    fn default() -> Self {
        Self {
            monitor_interval: 1.0,
            imbalance_threshold: 3.0,
            min_instances_per_stage: 1,
            cooldown: 2.0,
            smoothing: 0.5,
            onload_delay: 0.01,
            max_source_utilization: 0.8,
        }
    }
}

impl ControllerParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| Err(Error::invalid("role switch params", reason));
        if !(self.monitor_interval > 0.0 && self.monitor_interval.is_finite()) {
            return bad("monitor_interval must be > 0");
        }
        if !(self.imbalance_threshold > 1.0) {
            return bad("imbalance_threshold must be > 1");
        }
        if self.min_instances_per_stage == 0 {
            return bad("min_instances_per_stage must be >= 1");
        }
        if !(self.cooldown >= 0.0 && self.smoothing >= 0.0) {
            return bad("cooldown and smoothing must be >= 0");
        }
        if !(self.onload_delay > 0.0 && self.onload_delay.is_finite()) {
            return bad("onload_delay must be > 0");
        }
        if !(self.max_source_utilization > 0.0 && self.max_source_utilization <= 1.0) {
            return bad("max_source_utilization must be in (0, 1]");
        }
        Ok(())
    }
}

/// The three stages an instance can be switched between.
pub const SWITCHABLE: [StageRole; 3] = [StageRole::Encode, StageRole::Prefill, StageRole::Decode];

/// One instance as seen by the monitor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceView {
    pub id: usize,
    pub role: StageRole,
    /// Serving normally; instances mid-switch are neither sources nor counted.
    pub active: bool,
    /// Work held by this instance, seconds.
    pub load: f64,
}

/// Queue statistics at one monitor tick.
#[derive(Debug, Clone, PartialEq)]
pub struct MonitorSnapshot {
    pub time: f64,
    /// Backlog per active instance, seconds, for E, P and D in that order.
    pub stage_loads: [f64; 3],
    /// Mean busy fraction of each stage's instances since the last decision.
    pub stage_utilization: [f64; 3],
    pub instances: Vec<InstanceView>,
    pub last_decision: Option<f64>,
    pub switch_in_progress: bool,
}

impl MonitorSnapshot {
    pub fn active_count(&self, role: StageRole) -> usize {
        self.instances.iter().filter(|i| i.active && i.role == role).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SwitchDecision {
    pub instance: usize,
    pub from: StageRole,
    pub to: StageRole,
}

fn stage_index(role: StageRole) -> Option<usize> {
    SWITCHABLE.iter().position(|&r| r == role)
}

/// Decides whether to move an instance. Ties between stages resolve in E, P,
/// D order and ties between instances to the lowest id.
pub fn monitor_and_decide(snap: &MonitorSnapshot, params: &ControllerParams) -> Option<SwitchDecision> {
    if snap.switch_in_progress {
        return None;
    }
    if let Some(t) = snap.last_decision {
        if snap.time - t < params.cooldown {
            return None;
        }
    }
    let loads = snap.stage_loads;
    let hot = (0..3).fold(0, |best, s| if loads[s] > loads[best] { s } else { best });
    let min = params.min_instances_per_stage as usize;
    let can_give = |s: usize| {
        let n = snap.active_count(SWITCHABLE[s]);
        n > min && snap.stage_utilization[s] * (n as f64) / ((n - 1) as f64) < params.max_source_utilization
    };
    let cold = (0..3)
        .filter(|&s| s != hot && can_give(s))
        .fold(None, |best: Option<usize>, s| match best {
            Some(b) if loads[b] <= loads[s] => Some(b),
            _ => Some(s),
        })?;
    let ratio = (loads[hot] + params.smoothing) / (loads[cold] + params.smoothing);
    if !(ratio > params.imbalance_threshold) {
        return None;
    }
    let from = SWITCHABLE[cold];
    let pick = snap
        .instances
        .iter()
        .filter(|i| i.active && i.role == from)
        .min_by(|a, b| a.load.total_cmp(&b.load).then(a.id.cmp(&b.id)))?;
    debug_assert_eq!(stage_index(pick.role), Some(cold));
    Some(SwitchDecision {
        instance: pick.id,
        from,
        to: SWITCHABLE[hot],
    })
}

/// One completed (or aborted) role switch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SwitchEventRecord {
    pub decided_at: f64,
    pub instance: usize,
    pub from: StageRole,
    pub to: StageRole,
    pub offload_done: Option<f64>,
    pub migration_done: Option<f64>,
    pub onload_done: Option<f64>,
    /// Queued jobs handed to sibling instances during offload.
    pub redistributed: usize,
    pub aborted: bool,
}

impl SwitchEventRecord {
    pub fn new(decided_at: f64, decision: SwitchDecision) -> Self {
        Self {
            decided_at,
            instance: decision.instance,
            from: decision.from,
            to: decision.to,
            offload_done: None,
            migration_done: None,
            onload_done: None,
            redistributed: 0,
            aborted: false,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.onload_done.is_some()
    }

    /// Phase timestamps in order, for completed switches.
    pub fn phases(&self) -> Option<[f64; 4]> {
        Some([self.decided_at, self.offload_done?, self.migration_done?, self.onload_done?])
    }
}

/// Writes the switch log as CSV.
pub fn write_switch_log<W: Write>(records: &[SwitchEventRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "decided_at",
        "instance",
        "from",
        "to",
        "offload_done",
        "migration_done",
        "onload_done",
        "redistributed",
        "aborted",
    ])?;
    let opt = |t: Option<f64>| t.map(|t| t.to_string()).unwrap_or_default();
    for r in records {
        w.write_record([
            r.decided_at.to_string(),
            r.instance.to_string(),
            r.from.short().to_string(),
            r.to.short().to_string(),
            opt(r.offload_done),
            opt(r.migration_done),
            opt(r.onload_done),
            r.redistributed.to_string(),
            r.aborted.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn snapshot(layout: &[(StageRole, f64)], stage_loads: [f64; 3]) -> MonitorSnapshot {
        MonitorSnapshot {
            time: 10.0,
            stage_loads,
            stage_utilization: [0.0; 3],
            instances: layout
                .iter()
                .enumerate()
                .map(|(id, &(role, load))| InstanceView {
                    id,
                    role,
                    active: true,
                    load,
                })
                .collect(),
            last_decision: None,
            switch_in_progress: false,
        }
    }

    fn five_one_two(loads: [f64; 3]) -> MonitorSnapshot {
        use StageRole::*;
        snapshot(
            &[
                (Encode, 0.3),
                (Encode, 0.0),
                (Encode, 0.0),
                (Encode, 0.2),
                (Encode, 0.1),
                (Prefill, 0.0),
                (Decode, 4.0),
                (Decode, 4.0),
            ],
            loads,
        )
    }

    #[test]
    fn balanced_queues_do_nothing() {
        let p = ControllerParams::default();
        assert_eq!(monitor_and_decide(&five_one_two([1.0, 1.0, 1.0]), &p), None);
        assert_eq!(monitor_and_decide(&five_one_two([0.0, 0.0, 0.0]), &p), None);
    }

    #[test]
    fn decode_pressure_pulls_an_idle_encoder() {
        let p = ControllerParams::default();
        let d = monitor_and_decide(&five_one_two([0.1, 0.0, 8.0]), &p).unwrap();
        assert_eq!(
            d,
            SwitchDecision {
                instance: 1,
                from: StageRole::Encode,
                to: StageRole::Decode
            }
        );
    }

    #[test]
    fn stage_at_minimum_is_never_a_source() {
        use StageRole::*;
        let p = ControllerParams::default();
        let s = snapshot(&[(Encode, 0.0), (Prefill, 0.0), (Decode, 5.0)], [0.0, 0.0, 9.0]);
        assert_eq!(monitor_and_decide(&s, &p), None);
    }

    #[test]
    fn busy_stage_keeps_its_instances() {
        let p = ControllerParams::default();
        let mut s = five_one_two([0.1, 0.0, 8.0]);
        // 5 encoders at 0.7 would run at 0.875 on 4.
        s.stage_utilization = [0.7, 0.0, 1.0];
        assert_eq!(monitor_and_decide(&s, &p), None);
        s.stage_utilization = [0.6, 0.0, 1.0];
        assert!(monitor_and_decide(&s, &p).is_some());
    }

    #[test]
    fn cooldown_and_in_flight_switch_block_decisions() {
        let p = ControllerParams::default();
        let mut s = five_one_two([0.0, 0.0, 8.0]);
        s.last_decision = Some(9.0);
        assert_eq!(monitor_and_decide(&s, &p), None);
        s.last_decision = Some(7.0);
        assert!(monitor_and_decide(&s, &p).is_some());
        s.switch_in_progress = true;
        assert_eq!(monitor_and_decide(&s, &p), None);
    }

    #[test]
    fn params_validation() {
        assert!(ControllerParams::default().validate().is_ok());
        let bad = ControllerParams {
            imbalance_threshold: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ControllerParams {
            onload_delay: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
