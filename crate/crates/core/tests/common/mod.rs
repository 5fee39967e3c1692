#![allow(dead_code)]

use epd_sim::cost::CostParams;
use epd_sim::model::{preset, MINICPM_V_2_6};
use epd_sim::optimizer::{BudgetMode, ConfigSpace, StageRange};
use epd_sim::sim::{InstanceConfig, SchedulePolicy, SystemConfig};
use epd_sim::{HardwareSpec, Request, Resolution, Slo, StageRole};

pub const RES_4K: Resolution = Resolution::new(4032, 3024);

/// Cost parameters whose every intermediate sum is a dyadic rational, so the
/// simulator's arithmetic is exact.
pub fn dyadic_cost() -> CostParams {
    CostParams {
        enc_base: 0.125,
        enc_per_patch: 0.0625,
        prefill_base: 0.25,
        prefill_per_token: 1.0 / 1024.0,
        prefill_quad: 0.0,
        decode_base: 0.015625,
        decode_per_seq: 0.0078125,
        decode_per_kv_token: 0.0,
        encode_heaviness: 1.0,
        colocation_slowdown: 1.0,
        ..CostParams::default()
    }
}

/// Uncontended 1E/1P/1D pipeline on MiniCPM-V with the given cost and hardware.
pub fn single_pipeline(cost: CostParams, hw: HardwareSpec) -> SystemConfig {
    let instances = vec![
        InstanceConfig::new(StageRole::Encode, 1),
        InstanceConfig::new(StageRole::Prefill, 1),
        InstanceConfig::new(StageRole::Decode, 8),
    ];
    SystemConfig::new(preset(MINICPM_V_2_6).unwrap(), hw, cost, instances)
}

pub fn infinite_bandwidth() -> HardwareSpec {
    HardwareSpec {
        intra_node_bandwidth: f64::INFINITY,
        inter_node_bandwidth: f64::INFINITY,
        channel_setup: 0.0,
        ..HardwareSpec::a100_node()
    }
}

pub fn image_request(id: u64, arrival: f64, images: usize, output_tokens: u64) -> Request {
    Request {
        id,
        arrival,
        prompt_tokens: 22,
        images: vec![RES_4K; images],
        output_tokens,
        slo: Slo::new(10.0, 1.0),
    }
}

/// Kolmogorov-Smirnov statistic of `sample` against Exp(`rate`).
pub fn ks_exponential(sample: &[f64], rate: f64) -> f64 {
    let mut xs = sample.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = 1.0 - (-rate * x).exp();
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic two-sided KS critical value at alpha = 0.01.
pub fn ks_critical_001(n: usize) -> f64 {
    1.628 / (n as f64).sqrt()
}

/// A small space: 8 GPUs exactly, E in 3..=6, P in 1..=2, D in 1..=2, two
/// encode batch sizes, IRP on or off. At most 4*2*2*2*2 = 64 points, fewer
/// after the budget filter.
pub fn small_space() -> ConfigSpace {
    ConfigSpace {
        gpu_budget: 8,
        budget_mode: BudgetMode::Exactly,
        encode: StageRange::fixed([3, 6], vec![1, 4]),
        prefill: StageRange::fixed([1, 2], vec![1]),
        decode: StageRange::fixed([1, 2], vec![64]),
        policies: vec![SchedulePolicy::Fcfs],
        irp: vec![true, false],
    }
}
