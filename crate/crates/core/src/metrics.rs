//! TTFT, TPOT, SLO attainment and goodput, plus rate sweeps.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::sim::{run_simulation, RequestRecord, SimTrace, SystemConfig};
use crate::workload::{generate_poisson, Slo, WorkloadSpec};

/// Attainment a rate must reach to count towards goodput.
pub const GOODPUT_THRESHOLD: f64 = 0.9;

/// Time to first token: first token minus arrival.
pub fn ttft(rec: &RequestRecord) -> Result<f64> {
    rec.first_token
        .filter(|_| rec.rejected.is_none())
        .map(|t| t - rec.arrival)
        .ok_or(Error::IncompleteRequest(rec.id))
}

/// Mean gap between output tokens after the first; 0 for single-token outputs.
pub fn tpot(rec: &RequestRecord) -> Result<f64> {
    let (Some(first), Some(done)) = (rec.first_token, rec.completion) else {
        return Err(Error::IncompleteRequest(rec.id));
    };
    if rec.output_tokens < 2 {
        return Ok(0.0);
    }
    Ok((done - first) / (rec.output_tokens - 1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RequestMetrics {
    pub id: u64,
    pub ttft: f64,
    pub tpot: f64,
    pub met_slo: bool,
}

/// Metrics of a completed request against `slo`. Rejected or unfinished
/// requests have none.
pub fn request_metrics(rec: &RequestRecord, slo: Slo) -> Option<RequestMetrics> {
    let ttft = ttft(rec).ok()?;
    let tpot = tpot(rec).ok()?;
    Some(RequestMetrics {
        id: rec.id,
        ttft,
        tpot,
        met_slo: ttft <= slo.ttft && tpot <= slo.tpot,
    })
}

fn met(rec: &RequestRecord, slo: Slo) -> bool {
    request_metrics(rec, slo).is_some_and(|m| m.met_slo)
}

/// Fraction of requests meeting their own SLO. Rejected requests count as misses.
pub fn slo_attainment(records: &[RequestRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptySet);
    }
    let ok = records.iter().filter(|r| met(r, r.slo)).count();
    Ok(ok as f64 / records.len() as f64)
}

/// Fraction of requests meeting a common `slo`.
pub fn slo_attainment_with(records: &[RequestRecord], slo: Slo) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptySet);
    }
    let ok = records.iter().filter(|r| met(r, slo)).count();
    Ok(ok as f64 / records.len() as f64)
}

/// Largest rate whose attainment reaches `threshold`, scanning every point;
/// 0 when none does.
pub fn goodput_from_profile(points: &[(f64, f64)], threshold: f64) -> f64 {
    points
        .iter()
        .filter(|(_, a)| *a >= threshold)
        .map(|(r, _)| *r)
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepPoint {
    /// Total request rate, requests/second.
    pub rate: f64,
    pub rate_per_gpu: f64,
    pub attainment: f64,
    pub mean_ttft: f64,
    pub p99_ttft: f64,
    pub mean_tpot: f64,
    pub completed: usize,
    pub rejected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub system: String,
    pub model: String,
    pub images_per_request: usize,
    pub gpus: u32,
    pub points: Vec<SweepPoint>,
}

impl SweepResult {
    pub fn goodput(&self, threshold: f64) -> f64 {
        let profile: Vec<(f64, f64)> = self.points.iter().map(|p| (p.rate, p.attainment)).collect();
        goodput_from_profile(&profile, threshold)
    }

    pub fn attainment_at(&self, rate: f64) -> Option<f64> {
        self.points.iter().find(|p| p.rate == rate).map(|p| p.attainment)
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Nearest-rank percentile of `xs`, `q` in (0, 1].
pub fn percentile(xs: &[f64], q: f64) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

/// Summarizes one trace at one rate.
pub fn summarize(trace: &SimTrace, rate: f64, gpus: u32) -> Result<SweepPoint> {
    let done: Vec<RequestMetrics> = trace
        .requests
        .iter()
        .filter_map(|r| request_metrics(r, r.slo))
        .collect();
    let ttfts: Vec<f64> = done.iter().map(|m| m.ttft).collect();
    let tpots: Vec<f64> = done.iter().map(|m| m.tpot).collect();
    Ok(SweepPoint {
        rate,
        rate_per_gpu: rate / f64::from(gpus.max(1)),
        attainment: slo_attainment(&trace.requests)?,
        mean_ttft: mean(&ttfts),
        p99_ttft: percentile(&ttfts, 0.99),
        mean_tpot: mean(&tpots),
        completed: trace.completed(),
        rejected: trace.rejected(),
    })
}

pub fn validate_grid(rates: &[f64]) -> Result<()> {
    if rates.is_empty() {
        return Err(Error::invalid("rate grid", "empty"));
    }
    if rates.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
        return Err(Error::invalid("rate grid", "rates must be positive"));
    }
    if rates.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("rate grid", "rates must be strictly increasing"));
    }
    Ok(())
}

/// Runs `config` at every rate of the grid, regenerating the workload with
/// the same seed each time. Rates run in parallel.
pub fn sweep(system: &str, config: &SystemConfig, spec: &WorkloadSpec, rates: &[f64]) -> Result<SweepResult> {
    validate_grid(rates)?;
    let gpus = config.total_gpus();
    let points = rates
        .par_iter()
        .map(|&rate| {
            let reqs = generate_poisson(&spec.with_rate(rate))?;
            let trace = run_simulation(config, &reqs, spec.seed)?;
            summarize(&trace, rate, gpus)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult {
        system: system.to_string(),
        model: config.model.name.clone(),
        images_per_request: spec.images_per_request,
        gpus,
        points,
    })
}

/// Highest grid rate whose attainment reaches `threshold`.
pub fn goodput(config: &SystemConfig, spec: &WorkloadSpec, rates: &[f64], threshold: f64) -> Result<f64> {
    Ok(sweep("", config, spec, rates)?.goodput(threshold))
}

/// Attainment curves in the `system, model, images_per_request,
/// rate_per_gpu, attainment` layout.
pub fn write_attainment_csv<W: Write>(results: &[SweepResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["system", "model", "images_per_request", "rate_per_gpu", "attainment"])?;
    for r in results {
        for p in &r.points {
            w.write_record([
                r.system.clone(),
                r.model.clone(),
                r.images_per_request.to_string(),
                p.rate_per_gpu.to_string(),
                p.attainment.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Full per-rate statistics of one sweep.
pub fn write_sweep_csv<W: Write>(result: &SweepResult, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in &result.points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct SummaryRow {
    id: u64,
    arrival: f64,
    ttft: Option<f64>,
    tpot: Option<f64>,
    completion: Option<f64>,
    met_slo: bool,
    rejected: Option<String>,
}

/// One row per request: latency metrics and SLO outcome.
pub fn write_request_summary<W: Write>(trace: &SimTrace, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in &trace.requests {
        let m = request_metrics(r, r.slo);
        w.serialize(SummaryRow {
            id: r.id,
            arrival: r.arrival,
            ttft: m.map(|m| m.ttft),
            tpot: m.map(|m| m.tpot),
            completion: r.completion,
            met_slo: m.is_some_and(|m| m.met_slo),
            rejected: r.rejected.clone(),
        })?;
    }
    w.flush()?;
    Ok(())
}
