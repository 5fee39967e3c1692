//! Per-request lifecycle records and per-instance statistics of one run.

use std::io::Write;

use serde::Serialize;

use crate::error::Result;
use crate::model::StageRole;
use crate::role_switch::SwitchEventRecord;
use crate::workload::Slo;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShardRecord {
    pub instance: usize,
    pub patches: u64,
    pub encode_start: f64,
    pub encode_end: f64,
    /// When this shard's tokens landed in the prefill instance's MM cache.
    pub transfer_end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RequestRecord {
    pub id: u64,
    pub arrival: f64,
    pub output_tokens: u64,
    pub slo: Slo,
    pub mm_tokens: u64,
    pub prefill_tokens: u64,
    /// Set when admission control turned the request away.
    pub rejected: Option<String>,
    pub shards: Vec<ShardRecord>,
    pub encode_start: Option<f64>,
    pub encode_end: Option<f64>,
    pub ep_transfer_end: Option<f64>,
    pub prefill_instance: Option<usize>,
    pub prefill_start: Option<f64>,
    pub prefill_end: Option<f64>,
    pub decode_instance: Option<usize>,
    pub pd_transfer_end: Option<f64>,
    pub first_token: Option<f64>,
    /// Emission time of every output token, first token included.
    pub token_times: Vec<f64>,
    pub completion: Option<f64>,
}

impl RequestRecord {
    pub(crate) fn new(id: u64, arrival: f64, output_tokens: u64, slo: Slo, mm_tokens: u64, prefill_tokens: u64) -> Self {
        Self {
            id,
            arrival,
            output_tokens,
            slo,
            mm_tokens,
            prefill_tokens,
            rejected: None,
            shards: Vec::new(),
            encode_start: None,
            encode_end: None,
            ep_transfer_end: None,
            prefill_instance: None,
            prefill_start: None,
            prefill_end: None,
            decode_instance: None,
            pd_transfer_end: None,
            first_token: None,
            token_times: Vec::new(),
            completion: None,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.completion.is_some()
    }

    /// Checks the per-request ordering arrival <= encode <= transfer <=
    /// prefill <= first token <= completion, per shard as well, and strictly
    /// increasing token times. Returns a description of the first violation.
    pub fn causality_violation(&self) -> Option<String> {
        if self.rejected.is_some() {
            return None;
        }
        let chain = [
            ("arrival", Some(self.arrival)),
            ("encode_start", self.encode_start),
            ("encode_end", self.encode_end),
            ("ep_transfer_end", self.ep_transfer_end),
            ("prefill_start", self.prefill_start),
            ("prefill_end", self.prefill_end),
            ("first_token", self.first_token),
            ("completion", self.completion),
        ];
        let mut prev = ("arrival", self.arrival);
        for (name, t) in chain {
            let Some(t) = t else {
                return Some(format!("request {}: missing {name}", self.id));
            };
            if t < prev.1 {
                return Some(format!("request {}: {name} {t} before {} {}", self.id, prev.0, prev.1));
            }
            prev = (name, t);
        }
        for s in &self.shards {
            let ok = self.arrival <= s.encode_start
                && s.encode_start <= s.encode_end
                && s.encode_end <= s.transfer_end
                && Some(s.transfer_end) <= self.prefill_start;
            if !ok {
                return Some(format!("request {}: shard on instance {} out of order", self.id, s.instance));
            }
        }
        if self.token_times.len() as u64 != self.output_tokens {
            return Some(format!(
                "request {}: {} tokens emitted, {} expected",
                self.id,
                self.token_times.len(),
                self.output_tokens
            ));
        }
        if self.token_times.first().copied() != self.first_token {
            return Some(format!("request {}: first token time mismatch", self.id));
        }
        if self.token_times.windows(2).any(|w| w[1] <= w[0]) {
            return Some(format!("request {}: token times not strictly increasing", self.id));
        }
        if let (Some(pd), Some(&second)) = (self.pd_transfer_end, self.token_times.get(1)) {
            if second < pd {
                return Some(format!("request {}: second token before PD transfer", self.id));
            }
        }
        if self.token_times.last().copied() != self.completion {
            return Some(format!("request {}: completion is not the last token", self.id));
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstanceStats {
    pub id: usize,
    pub initial_role: StageRole,
    pub final_role: StageRole,
    pub gpus: u32,
    /// Seconds spent executing batches or decode steps.
    pub busy_time: f64,
    pub batches: u64,
    /// `(time, queued jobs)` whenever the instance's own queue changes length.
    pub queue_samples: Vec<(f64, usize)>,
}

impl InstanceStats {
    pub fn utilization(&self, horizon: f64) -> f64 {
        if horizon > 0.0 {
            self.busy_time / horizon
        } else {
            0.0
        }
    }
}

/// Lifecycle event categories recorded in the event log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SimEventKind {
    Arrival,
    BatchStart,
    BatchEnd,
    TransferStart,
    TransferEnd,
    DecodeStep,
    RoleSwitchPhase,
    RequestComplete,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceEvent {
    pub time: f64,
    pub kind: SimEventKind,
    /// Stage or phase qualifier, e.g. `encode`, `ep`, `offload`.
    pub detail: &'static str,
    pub request: Option<u64>,
    pub instance: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimTrace {
    pub requests: Vec<RequestRecord>,
    pub instances: Vec<InstanceStats>,
    pub switches: Vec<SwitchEventRecord>,
    pub events: Vec<TraceEvent>,
}

impl SimTrace {
    pub fn completed(&self) -> usize {
        self.requests.iter().filter(|r| r.is_complete()).count()
    }

    pub fn rejected(&self) -> usize {
        self.requests.iter().filter(|r| r.rejected.is_some()).count()
    }

    pub fn request(&self, id: u64) -> Option<&RequestRecord> {
        self.requests.iter().find(|r| r.id == id)
    }

    /// Last completion minus first arrival.
    pub fn makespan(&self) -> f64 {
        let first = self.requests.iter().map(|r| r.arrival).fold(f64::INFINITY, f64::min);
        let last = self
            .requests
            .iter()
            .filter_map(|r| r.completion)
            .fold(f64::NEG_INFINITY, f64::max);
        if first.is_finite() && last.is_finite() {
            last - first
        } else {
            0.0
        }
    }

    pub fn final_roles(&self) -> Vec<StageRole> {
        self.instances.iter().map(|i| i.final_role).collect()
    }

    pub fn final_layout(&self) -> String {
        let cfgs: Vec<_> = self
            .instances
            .iter()
            .map(|i| super::config::InstanceConfig::new(i.final_role, 1))
            .collect();
        super::config::layout_string(&cfgs)
    }

    /// First causality violation across all requests, if any.
    pub fn causality_violation(&self) -> Option<String> {
        self.requests.iter().find_map(RequestRecord::causality_violation)
    }

    /// Line-delimited event log: `time,event,detail,request,instance`.
    pub fn write_events<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["time", "event", "detail", "request", "instance"])?;
        for e in &self.events {
            w.write_record([
                e.time.to_string(),
                format!("{:?}", e.kind),
                e.detail.to_string(),
                e.request.map(|r| r.to_string()).unwrap_or_default(),
                e.instance.map(|i| i.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Full trace as JSON.
    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer(out, self)?;
        Ok(())
    }
}
