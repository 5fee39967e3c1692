//! Feasibility calculator for aggregated versus disaggregated deployments:
//! how many images per request, how large a stage batch, and how large a KV
//! reservation one GPU can hold.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{HardwareSpec, ModelSpec, Resolution, StageRole};

/// What is co-resident on one GPU.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeploymentShape {
    pub role: StageRole,
    /// Fraction of post-weights free memory reserved for KV cache. Ignored by
    /// encode-only shapes.
    pub kv_fraction: f64,
    /// Fixed MM-cache reservation, tokens.
    pub mm_cache_tokens: u64,
    /// Text prompt length carried by every request.
    pub prompt_tokens: u64,
}

impl DeploymentShape {
    pub fn new(role: StageRole, kv_fraction: f64) -> Self {
        Self {
            role,
            kv_fraction,
            mm_cache_tokens: 0,
            prompt_tokens: 22,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LimitingFactor {
    Memory,
    ContextLength,
}

impl fmt::Display for LimitingFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Memory => "memory",
            Self::ContextLength => "context_length",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CapacityValue {
    Count(u64),
    Fraction(f64),
    /// Out of memory even at the smallest workload.
    Oom,
    /// Out of context limit: the request's tokens exceed the LLM context.
    Oocl,
}

impl fmt::Display for CapacityValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Count(n) => write!(f, "{n}"),
            Self::Fraction(x) => write!(f, "{x:.2}"),
            Self::Oom => f.write_str("OOM"),
            Self::Oocl => f.write_str("OOCL"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapacityReport {
    pub value: CapacityValue,
    pub limiting_factor: LimitingFactor,
}

impl CapacityReport {
    pub fn count(&self) -> Option<u64> {
        match self.value {
            CapacityValue::Count(n) => Some(n),
            _ => None,
        }
    }

    pub fn fraction(&self) -> Option<f64> {
        match self.value {
            CapacityValue::Fraction(f) => Some(f),
            _ => None,
        }
    }
}

/// Byte accounting for one (model, GPU, shape, resolution) combination.
#[derive(Debug, Clone)]
pub struct Feasibility<'a> {
    pub model: &'a ModelSpec,
    pub hw: &'a HardwareSpec,
    pub shape: DeploymentShape,
    pub patches_per_image: u64,
}

impl<'a> Feasibility<'a> {
    pub fn new(
        model: &'a ModelSpec,
        hw: &'a HardwareSpec,
        shape: DeploymentShape,
        resolution: Resolution,
    ) -> Result<Self> {
        Ok(Self {
            model,
            hw,
            shape,
            patches_per_image: u64::from(model.patches_for_image(resolution)?),
        })
    }

    pub fn request_tokens(&self, images: u64) -> u64 {
        images * self.patches_per_image * self.model.tokens_per_patch + self.shape.prompt_tokens
    }

    pub fn within_context(&self, images: u64) -> bool {
        self.request_tokens(images) <= self.model.max_context_tokens
    }

    /// Bytes one request with `images` images needs beyond the fixed
    /// reservations. KV bytes are left out when `include_kv` is false.
    pub fn request_bytes(&self, images: u64, include_kv: bool) -> u128 {
        let m = self.model;
        let role = self.shape.role;
        let patches = u128::from(images * self.patches_per_image);
        let mm_tokens = patches * u128::from(m.tokens_per_patch);
        let total = mm_tokens + u128::from(self.shape.prompt_tokens);
        let mut bytes = 0u128;
        if role.runs_encode() {
            bytes += patches * u128::from(m.encode_activation_per_patch);
        }
        if role.runs_prefill() {
            let kv = if include_kv { m.kv_bytes_per_token() } else { 0 };
            bytes += total
                * u128::from(kv + m.mm_bytes_per_token() + m.prefill_activation_per_token);
        } else if role == StageRole::Encode {
            bytes += mm_tokens * u128::from(m.mm_bytes_per_token());
        } else if include_kv {
            bytes += total * u128::from(m.kv_bytes_per_token());
        }
        bytes
    }

    fn resident(&self) -> u128 {
        u128::from(self.model.resident_bytes(self.shape.role))
            + u128::from(self.shape.mm_cache_tokens) * u128::from(self.model.mm_bytes_per_token())
    }

    fn free(&self) -> u128 {
        u128::from(self.hw.gpu_memory).saturating_sub(u128::from(self.model.resident_bytes(self.shape.role)))
    }

    /// KV reservation in bytes for a fraction expressed in hundredths.
    fn kv_reservation_centi(&self, percent: u64) -> u128 {
        if self.shape.role.holds_kv() {
            self.free() * u128::from(percent)
        } else {
            0
        }
    }

    /// Memory predicate with the KV fraction in hundredths; exact integer arithmetic.
    pub fn fits_memory_centi(&self, batch: u64, images: u64, kv_percent: u64, include_kv: bool) -> bool {
        let used = 100 * (self.resident() + u128::from(batch) * self.request_bytes(images, include_kv))
            + self.kv_reservation_centi(kv_percent);
        used <= 100 * u128::from(self.hw.gpu_memory)
    }

    fn shape_percent(&self) -> u64 {
        (self.shape.kv_fraction * 100.0).round().clamp(0.0, 100.0) as u64
    }

    /// Memory predicate using the shape's own KV fraction.
    pub fn fits_memory(&self, batch: u64, images: u64) -> bool {
        self.fits_memory_centi(batch, images, self.shape_percent(), true)
    }
}

/// Largest `x` in `[0, hi]` with `pred(x)`, assuming `pred` is monotone
/// decreasing and `pred(0)` holds.
fn largest_true(hi: u64, pred: impl Fn(u64) -> bool) -> u64 {
    let (mut lo, mut hi) = (0u64, hi);
    while lo < hi {
        let mid = lo + (hi - lo).div_ceil(2);
        if pred(mid) {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    lo
}

const SEARCH_CAP: u64 = 1 << 40;

/// Largest images-per-request at batch size 1.
pub fn max_images_per_request(
    model: &ModelSpec,
    hw: &HardwareSpec,
    shape: DeploymentShape,
    resolution: Resolution,
) -> Result<CapacityReport> {
    let f = Feasibility::new(model, hw, shape, resolution)?;
    if !f.within_context(0) {
        return Ok(CapacityReport {
            value: CapacityValue::Oocl,
            limiting_factor: LimitingFactor::ContextLength,
        });
    }
    if !f.fits_memory(1, 0) {
        return Ok(CapacityReport {
            value: CapacityValue::Oom,
            limiting_factor: LimitingFactor::Memory,
        });
    }
    let per_image = f.patches_per_image * model.tokens_per_patch;
    let ctx_max = (model.max_context_tokens - shape.prompt_tokens) / per_image;
    let mem_max = largest_true(SEARCH_CAP, |n| f.fits_memory(1, n));
    let n = ctx_max.min(mem_max);
    let limiting_factor = if ctx_max < mem_max {
        LimitingFactor::ContextLength
    } else {
        LimitingFactor::Memory
    };
    let value = if n == 0 {
        if limiting_factor == LimitingFactor::ContextLength {
            CapacityValue::Oocl
        } else {
            CapacityValue::Oom
        }
    } else {
        CapacityValue::Count(n)
    };
    Ok(CapacityReport {
        value,
        limiting_factor,
    })
}

/// Largest number of concurrent requests with `images_per_request` images each.
pub fn max_batch(
    model: &ModelSpec,
    hw: &HardwareSpec,
    shape: DeploymentShape,
    images_per_request: u64,
    resolution: Resolution,
) -> Result<CapacityReport> {
    let f = Feasibility::new(model, hw, shape, resolution)?;
    if !f.within_context(images_per_request) {
        return Ok(CapacityReport {
            value: CapacityValue::Oocl,
            limiting_factor: LimitingFactor::ContextLength,
        });
    }
    let b = largest_true(SEARCH_CAP, |b| f.fits_memory(b, images_per_request));
    Ok(CapacityReport {
        value: if b == 0 {
            CapacityValue::Oom
        } else {
            CapacityValue::Count(b)
        },
        limiting_factor: LimitingFactor::Memory,
    })
}

/// Largest KV reservation, in 1% steps of free memory, that still leaves room
/// for one request's non-KV demand.
pub fn max_kv_fraction(
    model: &ModelSpec,
    hw: &HardwareSpec,
    shape: DeploymentShape,
    images_per_request: u64,
    resolution: Resolution,
) -> Result<CapacityReport> {
    let f = Feasibility::new(model, hw, shape, resolution)?;
    if !f.within_context(images_per_request) {
        return Ok(CapacityReport {
            value: CapacityValue::Oocl,
            limiting_factor: LimitingFactor::ContextLength,
        });
    }
    let fits = |pct: u64| f.fits_memory_centi(1, images_per_request, pct, false);
    if !fits(0) {
        return Ok(CapacityReport {
            value: CapacityValue::Oom,
            limiting_factor: LimitingFactor::Memory,
        });
    }
    let pct = if shape.role.holds_kv() {
        largest_true(100, fits)
    } else {
        0
    };
    Ok(CapacityReport {
        value: CapacityValue::Fraction(pct as f64 / 100.0),
        limiting_factor: LimitingFactor::Memory,
    })
}

/// One row of the capacity CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CapacityRow {
    pub model: String,
    pub shape: String,
    pub resolution: String,
    pub metric: String,
    pub value: String,
    pub limiting_factor: String,
}

impl CapacityRow {
    fn new(model: &ModelSpec, shape: &str, resolution: Resolution, metric: &str, r: CapacityReport) -> Self {
        Self {
            model: model.name.clone(),
            shape: shape.to_string(),
            resolution: resolution.to_string(),
            metric: metric.to_string(),
            value: r.value.to_string(),
            limiting_factor: r.limiting_factor.to_string(),
        }
    }
}

/// Settings of the aggregated-vs-disaggregated comparison tables.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TableSettings {
    pub kv_fraction: f64,
    /// Images per request for the batch-size comparison.
    pub batch_images: u64,
    /// Image counts for the KV-fraction comparison.
    pub kv_images: &'static [u64],
    pub kv_resolution: Resolution,
}

impl Default for TableSettings {
    fn default() -> Self {
        Self {
            kv_fraction: 0.8,
            batch_images: 10,
            kv_images: &[5, 10, 20, 40, 80],
            kv_resolution: Resolution::new(4032, 3024),
        }
    }
}

/// Produces the aggregated (encode+prefill) versus disaggregated comparison for
/// every resolution in the model's patch table.
pub fn comparison_table(model: &ModelSpec, hw: &HardwareSpec, settings: TableSettings) -> Result<Vec<CapacityRow>> {
    let agg = DeploymentShape::new(StageRole::EncodePrefill, settings.kv_fraction);
    let enc = DeploymentShape::new(StageRole::Encode, settings.kv_fraction);
    let pre = DeploymentShape::new(StageRole::Prefill, settings.kv_fraction);
    let mut rows = Vec::new();
    for &res in model.patch_table.keys() {
        rows.push(CapacityRow::new(model, "aggregated", res, "max_images_per_request", max_images_per_request(model, hw, agg, res)?));
        rows.push(CapacityRow::new(model, "prefill", res, "max_images_per_request", max_images_per_request(model, hw, pre, res)?));
        rows.push(CapacityRow::new(model, "aggregated", res, "max_batch", max_batch(model, hw, agg, settings.batch_images, res)?));
        rows.push(CapacityRow::new(model, "encode", res, "max_batch", max_batch(model, hw, enc, settings.batch_images, res)?));
        rows.push(CapacityRow::new(model, "prefill", res, "max_batch", max_batch(model, hw, pre, settings.batch_images, res)?));
    }
    if model.patch_table.contains_key(&settings.kv_resolution) {
        for &n in settings.kv_images {
            let metric = format!("max_kv_fraction@{n}img");
            rows.push(CapacityRow::new(model, "aggregated", settings.kv_resolution, &metric, max_kv_fraction(model, hw, agg, n, settings.kv_resolution)?));
            rows.push(CapacityRow::new(model, "prefill", settings.kv_resolution, &metric, max_kv_fraction(model, hw, pre, n, settings.kv_resolution)?));
        }
    }
    Ok(rows)
}
