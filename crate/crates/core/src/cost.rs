//! Analytic latency model for the encode, prefill and decode stages, the
//! migrations between them, and parallel scaling.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HardwareSpec, StageRole};

/// Calibration constants of the latency model. Times are seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    pub enc_base: f64,
    pub enc_per_patch: f64,
    pub prefill_base: f64,
    pub prefill_per_token: f64,
    /// Attention term, seconds per token squared (per sequence).
    pub prefill_quad: f64,
    pub decode_base: f64,
    pub decode_per_seq: f64,
    pub decode_per_kv_token: f64,
    pub tp_efficiency: f64,
    pub pp_fill_penalty: f64,
    #[serde(default = "default_switch_e")]
    pub switch_latency_e: f64,
    #[serde(default = "default_switch_pd")]
    pub switch_latency_pd: f64,
    /// Multiplier on `enc_per_patch`; models accelerators that spend a larger
    /// share of time in the encoder.
    #[serde(default = "one")]
    pub encode_heaviness: f64,
    /// Slowdown of encode and prefill on instances that also hold the other
    /// stage's model (EncodePrefill and Monolithic).
    #[serde(default = "one")]
    pub colocation_slowdown: f64,
}

fn default_switch_e() -> f64 {
    0.7
}

fn default_switch_pd() -> f64 {
    0.2
}

fn one() -> f64 {
    1.0
}

impl Default for CostParams {
    fn default() -> Self {
        Self {
            enc_base: 0.0,
            enc_per_patch: 0.0,
            prefill_base: 0.0,
            prefill_per_token: 0.0,
            prefill_quad: 0.0,
            decode_base: 0.0,
            decode_per_seq: 0.0,
            decode_per_kv_token: 0.0,
            tp_efficiency: 1.0,
            pp_fill_penalty: 0.0,
            switch_latency_e: default_switch_e(),
            switch_latency_pd: default_switch_pd(),
            encode_heaviness: 1.0,
            colocation_slowdown: 1.0,
        }
    }
}

/// Which link a transfer uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    IntraNode,
    InterNode,
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.enc_base,
            self.enc_per_patch,
            self.prefill_base,
            self.prefill_per_token,
            self.prefill_quad,
            self.decode_base,
            self.decode_per_seq,
            self.decode_per_kv_token,
            self.pp_fill_penalty,
            self.switch_latency_e,
            self.switch_latency_pd,
            self.encode_heaviness,
        ];
        if fields.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid("cost params", "all terms must be finite and >= 0"));
        }
        if !(self.colocation_slowdown >= 1.0 && self.colocation_slowdown.is_finite()) {
            return Err(Error::invalid("cost params", "colocation_slowdown must be >= 1"));
        }
        if !(self.tp_efficiency > 0.0 && self.tp_efficiency <= 1.0) {
            return Err(Error::invalid("cost params", "tp_efficiency must be in (0, 1]"));
        }
        Ok(())
    }

    /// Effective speedup of `width` tensor-parallel (or IRP) workers. Never
    /// exceeds `width`.
    pub fn tp_speedup(&self, width: u32) -> f64 {
        1.0 + self.tp_efficiency * (f64::from(width.max(1)) - 1.0)
    }

    /// Pipeline fill/drain slowdown for `stages` pipeline stages.
    pub fn pp_factor(&self, stages: u32) -> f64 {
        1.0 + self.pp_fill_penalty * (f64::from(stages.max(1)) - 1.0)
    }

    /// Latency of one encode batch holding `patches` patches. An empty batch costs nothing.
    pub fn encode_latency(&self, patches: u64, tp_width: u32) -> f64 {
        if patches == 0 {
            return 0.0;
        }
        let raw = self.enc_base + self.enc_per_patch * self.encode_heaviness * patches as f64;
        raw / self.tp_speedup(tp_width)
    }

    /// Latency of prefilling a single sequence of `total_tokens`.
    pub fn prefill_latency(&self, total_tokens: u64, tp: u32, pp: u32) -> f64 {
        self.prefill_batch_latency(&[total_tokens], tp, pp)
    }

    /// Batched prefill: the linear term sees all tokens, the attention term is
    /// per sequence.
    pub fn prefill_batch_latency(&self, sequences: &[u64], tp: u32, pp: u32) -> f64 {
        if sequences.is_empty() {
            return 0.0;
        }
        let linear: f64 = sequences.iter().map(|&t| t as f64).sum();
        let quad: f64 = sequences.iter().map(|&t| (t as f64) * (t as f64)).sum();
        let raw = self.prefill_base + self.prefill_per_token * linear + self.prefill_quad * quad;
        raw * self.pp_factor(pp) / self.tp_speedup(tp)
    }

    pub fn decode_step_latency(&self, batch: u64, resident_kv_tokens: u64) -> f64 {
        self.decode_base
            + self.decode_per_seq * batch as f64
            + self.decode_per_kv_token * resident_kv_tokens as f64
    }

    pub fn decode_step_latency_parallel(
        &self,
        batch: u64,
        resident_kv_tokens: u64,
        tp: u32,
        pp: u32,
    ) -> f64 {
        self.decode_step_latency(batch, resident_kv_tokens) * self.pp_factor(pp)
            / self.tp_speedup(tp)
    }

    /// Multiplier applied to encode and prefill work executed by `role`.
    pub fn stage_slowdown(&self, role: StageRole) -> f64 {
        match role {
            StageRole::EncodePrefill | StageRole::Monolithic => self.colocation_slowdown,
            _ => 1.0,
        }
    }

    /// Time to reconfigure an instance from `from` to `to`. Anything touching
    /// the encoder swaps model and cache type and takes the longer latency.
    pub fn switch_latency(&self, from: StageRole, to: StageRole) -> f64 {
        if from == StageRole::Encode || to == StageRole::Encode {
            self.switch_latency_e
        } else {
            self.switch_latency_pd
        }
    }
}

pub fn transfer_latency(bytes: u64, channel: Channel, hw: &HardwareSpec) -> f64 {
    let bandwidth = match channel {
        Channel::IntraNode => hw.intra_node_bandwidth,
        Channel::InterNode => hw.inter_node_bandwidth,
    };
    hw.channel_setup + bytes as f64 / bandwidth
}

/// Measured latencies for fitting the stage polynomials.
#[derive(Debug, Clone, Default)]
pub struct CalibrationSamples {
    /// `(patches, seconds)` for single-worker encode batches.
    pub encode: Vec<(u64, f64)>,
    /// `(tokens, seconds)` for single-sequence prefill.
    pub prefill: Vec<(u64, f64)>,
    /// `(batch, resident kv tokens, seconds)` for decode steps.
    pub decode: Vec<(u64, u64, f64)>,
}

fn least_squares(rows: Vec<Vec<f64>>, targets: Vec<f64>, what: &'static str) -> Result<Vec<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.len() < cols {
        return Err(Error::invalid(
            "calibration samples",
            format!("{what}: need at least {cols} samples, got {}", rows.len()),
        ));
    }
    let a = DMatrix::from_fn(rows.len(), cols, |r, c| rows[r][c]);
    let b = DVector::from_vec(targets);
    let solution = a
        .svd(true, true)
        .solve(&b, 1e-12)
        .map_err(|e| Error::invalid("calibration samples", format!("{what}: {e}")))?;
    Ok(solution.iter().map(|v| v.max(0.0)).collect())
}

/// Fits the encode, prefill and decode polynomials to samples by least
/// squares. Coefficients are clamped at zero; terms not covered by samples
/// keep their values from `base`.
pub fn calibrate(base: &CostParams, samples: &CalibrationSamples) -> Result<CostParams> {
    let mut out = base.clone();
    if !samples.encode.is_empty() {
        let rows = samples.encode.iter().map(|&(p, _)| vec![1.0, p as f64]).collect();
        let y = samples.encode.iter().map(|&(_, t)| t).collect();
        let c = least_squares(rows, y, "encode")?;
        out.enc_base = c[0];
        out.enc_per_patch = c[1] / out.encode_heaviness;
    }
    if !samples.prefill.is_empty() {
        let rows = samples
            .prefill
            .iter()
            .map(|&(t, _)| {
                let t = t as f64;
                vec![1.0, t, t * t]
            })
            .collect();
        let y = samples.prefill.iter().map(|&(_, t)| t).collect();
        let c = least_squares(rows, y, "prefill")?;
        out.prefill_base = c[0];
        out.prefill_per_token = c[1];
        out.prefill_quad = c[2];
    }
    if !samples.decode.is_empty() {
        let rows = samples
            .decode
            .iter()
            .map(|&(b, kv, _)| vec![1.0, b as f64, kv as f64])
            .collect();
        let y = samples.decode.iter().map(|&(_, _, t)| t).collect();
        let c = least_squares(rows, y, "decode")?;
        out.decode_base = c[0];
        out.decode_per_seq = c[1];
        out.decode_per_kv_token = c[2];
    }
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * b.abs().max(1.0)
    }

    #[test]
    fn encode_examples() {
        let p = CostParams {
            enc_base: 0.1,
            enc_per_patch: 0.05,
            ..Default::default()
        };
        assert!(close(p.encode_latency(10, 1), 0.6));
        assert_eq!(p.encode_latency(0, 1), 0.0);
        // Two IRP workers each see half the patches.
        assert!(p.encode_latency(5, 1) < p.encode_latency(10, 1));
    }

    #[test]
    fn encode_heaviness_scales_patch_term() {
        let p = CostParams {
            enc_base: 0.1,
            enc_per_patch: 0.05,
            encode_heaviness: 1.2,
            ..Default::default()
        };
        assert!(close(p.encode_latency(10, 1), 0.1 + 0.6));
    }

    #[test]
    fn prefill_examples() {
        let linear = CostParams {
            prefill_per_token: 0.001,
            ..Default::default()
        };
        assert!(close(linear.prefill_latency(100, 1, 1), 0.1));
        let full = CostParams {
            prefill_base: 0.01,
            prefill_per_token: 0.002,
            prefill_quad: 0.0003,
            ..Default::default()
        };
        assert!(close(full.prefill_latency(1, 1, 1), 0.01 + 0.002 + 0.0003));
        for t in [1u64, 10, 1000] {
            assert!(full.prefill_latency(2 * t, 1, 1) > 2.0 * full.prefill_latency(t, 1, 1) - full.prefill_base);
        }
        let no_base = CostParams {
            prefill_base: 0.0,
            ..full
        };
        assert!(no_base.prefill_latency(200, 1, 1) > 2.0 * no_base.prefill_latency(100, 1, 1));
    }

    #[test]
    fn affine_prefill_has_constant_slope() {
        let p = CostParams {
            prefill_base: 0.05,
            prefill_per_token: 1.5e-4,
            ..Default::default()
        };
        let slopes: Vec<f64> = (1..50)
            .map(|t| p.prefill_latency(t + 1, 1, 1) - p.prefill_latency(t, 1, 1))
            .collect();
        for s in &slopes {
            assert!((s - 1.5e-4).abs() < 1e-12);
        }
    }

    #[test]
    fn decode_examples() {
        let p = CostParams {
            decode_base: 0.01,
            decode_per_seq: 0.002,
            decode_per_kv_token: 1e-6,
            ..Default::default()
        };
        assert!(close(p.decode_step_latency(1, 0), 0.012));
        assert!(close(p.decode_step_latency(8, 10_000), 0.036));
        let b = 5;
        assert!(close(
            p.decode_step_latency(2 * b, 0) - p.decode_step_latency(b, 0),
            0.002 * b as f64
        ));
    }

    #[test]
    fn tp_speedup_is_sublinear() {
        let p = CostParams {
            tp_efficiency: 0.8,
            ..Default::default()
        };
        for w in 1..16 {
            assert!(p.tp_speedup(w) <= f64::from(w));
        }
        assert_eq!(p.tp_speedup(1), 1.0);
    }

    #[test]
    fn transfer_examples() {
        let mut hw = HardwareSpec::a100_node();
        assert_eq!(transfer_latency(0, Channel::IntraNode, &hw), 0.0);
        hw.channel_setup = 0.001;
        assert_eq!(transfer_latency(0, Channel::IntraNode, &hw), 0.001);
        hw.channel_setup = 0.0;
        assert!(close(transfer_latency(1_000_000_000, Channel::IntraNode, &hw), 0.01));
        assert!(
            transfer_latency(1 << 30, Channel::InterNode, &hw)
                >= transfer_latency(1 << 30, Channel::IntraNode, &hw)
        );
    }

    #[test]
    fn switch_latency_defaults() {
        let p = CostParams::default();
        assert_eq!(p.switch_latency(StageRole::Encode, StageRole::Decode), 0.7);
        assert_eq!(p.switch_latency(StageRole::Decode, StageRole::Encode), 0.7);
        assert_eq!(p.switch_latency(StageRole::Prefill, StageRole::Decode), 0.2);
        assert!(p.switch_latency_pd < p.switch_latency_e);
    }

    #[test]
    fn calibrate_recovers_exact_polynomials() {
        let truth = CostParams {
            enc_base: 0.02,
            enc_per_patch: 0.04,
            prefill_base: 0.01,
            prefill_per_token: 1e-4,
            prefill_quad: 2e-8,
            decode_base: 0.015,
            decode_per_seq: 5e-4,
            decode_per_kv_token: 1e-7,
            ..Default::default()
        };
        let samples = CalibrationSamples {
            encode: (1..8).map(|p| (p * 5, truth.encode_latency(p * 5, 1))).collect(),
            prefill: (1..8)
                .map(|t| (t * 700, truth.prefill_latency(t * 700, 1, 1)))
                .collect(),
            decode: (1..8)
                .map(|b| (b, b * b * 300, truth.decode_step_latency(b, b * b * 300)))
                .collect(),
        };
        let fit = calibrate(&CostParams::default(), &samples).unwrap();
        assert!((fit.enc_base - truth.enc_base).abs() < 1e-9);
        assert!((fit.enc_per_patch - truth.enc_per_patch).abs() < 1e-9);
        assert!((fit.prefill_quad - truth.prefill_quad).abs() < 1e-12);
        assert!((fit.decode_per_kv_token - truth.decode_per_kv_token).abs() < 1e-12);
    }

    #[test]
    fn calibrate_needs_enough_samples() {
        let samples = CalibrationSamples {
            prefill: vec![(10, 0.1)],
            ..Default::default()
        };
        assert!(calibrate(&CostParams::default(), &samples).is_err());
    }

    #[test]
    fn validation() {
        assert!(CostParams::default().validate().is_ok());
        let bad = CostParams {
            tp_efficiency: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let neg = CostParams {
            enc_base: -1.0,
            ..Default::default()
        };
        assert!(neg.validate().is_err());
    }
}
