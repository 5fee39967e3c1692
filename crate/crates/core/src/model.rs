//! Model and hardware descriptions plus the byte-level memory model.
//!
//! Every capacity and cache computation in the crate derives from the
//! functions here: weight bytes per stage role, KV bytes per token, and
//! multimodal-embedding bytes per token.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::workload::Request;

/// What an instance (or a single GPU, for capacity analysis) executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StageRole {
    Encode,
    Prefill,
    Decode,
    /// Encode and prefill co-located on one set of GPUs, decode elsewhere.
    EncodePrefill,
    /// All three stages on the same GPUs.
    Monolithic,
}

impl StageRole {
    pub fn runs_encode(self) -> bool {
        matches!(self, Self::Encode | Self::EncodePrefill | Self::Monolithic)
    }

    pub fn runs_prefill(self) -> bool {
        matches!(self, Self::Prefill | Self::EncodePrefill | Self::Monolithic)
    }

    pub fn runs_decode(self) -> bool {
        matches!(self, Self::Decode | Self::Monolithic)
    }

    /// Roles that load the language model.
    pub fn holds_llm(self) -> bool {
        !matches!(self, Self::Encode)
    }

    /// Roles that hold a KV cache.
    pub fn holds_kv(self) -> bool {
        self.holds_llm()
    }

    /// Roles that hold an MM cache.
    pub fn holds_mm(self) -> bool {
        self.runs_encode() || self.runs_prefill()
    }

    pub fn short(self) -> &'static str {
        match self {
            Self::Encode => "E",
            Self::Prefill => "P",
            Self::Decode => "D",
            Self::EncodePrefill => "EP",
            Self::Monolithic => "M",
        }
    }
}

impl fmt::Display for StageRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Encode => "encode",
            Self::Prefill => "prefill",
            Self::Decode => "decode",
            Self::EncodePrefill => "encode-prefill",
            Self::Monolithic => "monolithic",
        };
        f.write_str(s)
    }
}

/// Image resolution in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Resolution {
    pub width: u32,
    pub height: u32,
}

impl Resolution {
    pub const fn new(width: u32, height: u32) -> Self {
        Self { width, height }
    }
}

impl fmt::Display for Resolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

impl FromStr for Resolution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (w, h) = s
            .split_once(['x', 'X', ','])
            .ok_or_else(|| Error::invalid("resolution", format!("`{s}` is not WIDTHxHEIGHT")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<u32>()
                .map_err(|e| Error::invalid("resolution", format!("`{s}`: {e}")))
        };
        Ok(Self::new(parse(w)?, parse(h)?))
    }
}

impl Serialize for Resolution {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Resolution {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Fixed non-parameter memory per role (activation workspace, framework buffers).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoleOverheads {
    pub encode: u64,
    pub prefill: u64,
    pub decode: u64,
    pub encode_prefill: u64,
    pub monolithic: u64,
}

impl RoleOverheads {
    pub fn get(&self, role: StageRole) -> u64 {
        match role {
            StageRole::Encode => self.encode,
            StageRole::Prefill => self.prefill,
            StageRole::Decode => self.decode,
            StageRole::EncodePrefill => self.encode_prefill,
            StageRole::Monolithic => self.monolithic,
        }
    }
}

fn default_bytes_per_param() -> u64 {
    2
}

/// Parameter counts, token geometry and cache byte-costs of one multimodal model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub encoder_params: u64,
    pub llm_params: u64,
    #[serde(default = "default_bytes_per_param")]
    pub bytes_per_param: u64,
    pub num_layers: u64,
    pub kv_heads: u64,
    pub head_dim: u64,
    pub hidden_dim: u64,
    /// Multimodal tokens emitted per encoded patch.
    pub tokens_per_patch: u64,
    #[serde(with = "patch_table_serde")]
    pub patch_table: BTreeMap<Resolution, u32>,
    pub max_context_tokens: u64,
    /// Encoder activation workspace per patch in flight, bytes.
    #[serde(default)]
    pub encode_activation_per_patch: u64,
    /// Prefill activation workspace per prompt token, bytes.
    #[serde(default)]
    pub prefill_activation_per_token: u64,
    #[serde(default)]
    pub overheads: RoleOverheads,
}

mod patch_table_serde {
    use super::*;

    #[derive(Serialize, Deserialize)]
    struct Entry {
        width: u32,
        height: u32,
        patches: u32,
    }

    pub fn serialize<S: Serializer>(
        table: &BTreeMap<Resolution, u32>,
        s: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(table.iter().map(|(r, &patches)| Entry {
            width: r.width,
            height: r.height,
            patches,
        }))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<BTreeMap<Resolution, u32>, D::Error> {
        let entries = Vec::<Entry>::deserialize(d)?;
        Ok(entries
            .into_iter()
            .map(|e| (Resolution::new(e.width, e.height), e.patches))
            .collect())
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("encoder_params", self.encoder_params),
            ("llm_params", self.llm_params),
            ("bytes_per_param", self.bytes_per_param),
            ("num_layers", self.num_layers),
            ("kv_heads", self.kv_heads),
            ("head_dim", self.head_dim),
            ("hidden_dim", self.hidden_dim),
            ("tokens_per_patch", self.tokens_per_patch),
            ("max_context_tokens", self.max_context_tokens),
        ];
        for (field, v) in counts {
            if v == 0 {
                return Err(Error::invalid(
                    "model",
                    format!("{}: {field} must be > 0", self.name),
                ));
            }
        }
        if self.patch_table.values().any(|&p| p == 0) {
            return Err(Error::invalid(
                "model",
                format!("{}: patch counts must be >= 1", self.name),
            ));
        }
        if self.max_context_tokens <= self.tokens_per_patch {
            return Err(Error::invalid(
                "model",
                format!("{}: max_context_tokens must exceed tokens_per_patch", self.name),
            ));
        }
        Ok(())
    }

    /// Parameter bytes resident on a GPU set executing `role`.
    pub fn weights_bytes(&self, role: StageRole) -> u64 {
        let params = match role {
            StageRole::Encode => self.encoder_params,
            StageRole::Prefill | StageRole::Decode => self.llm_params,
            StageRole::EncodePrefill | StageRole::Monolithic => {
                self.encoder_params + self.llm_params
            }
        };
        params * self.bytes_per_param
    }

    /// Weights plus the configured per-role fixed overhead.
    pub fn resident_bytes(&self, role: StageRole) -> u64 {
        self.weights_bytes(role) + self.overheads.get(role)
    }

    /// Fraction of full-model resident memory saved by running only `role`.
    pub fn memory_reduction(&self, role: StageRole) -> f64 {
        let full = self.resident_bytes(StageRole::Monolithic) as f64;
        1.0 - self.resident_bytes(role) as f64 / full
    }

    pub fn kv_bytes_per_token(&self) -> u64 {
        2 * self.num_layers * self.kv_heads * self.head_dim * self.bytes_per_param
    }

    /// One embedding vector per multimodal token.
    pub fn mm_bytes_per_token(&self) -> u64 {
        self.hidden_dim * self.bytes_per_param
    }

    pub fn patches_for_image(&self, resolution: Resolution) -> Result<u32> {
        self.patch_table
            .get(&resolution)
            .copied()
            .ok_or_else(|| Error::UnknownResolution {
                model: self.name.clone(),
                width: resolution.width,
                height: resolution.height,
            })
    }

    /// Total patches over every image of a request.
    pub fn patches_for_request(&self, request: &Request) -> Result<u64> {
        request
            .images
            .iter()
            .map(|&r| self.patches_for_image(r).map(u64::from))
            .sum()
    }

    /// Returns `(mm_tokens, total_prefill_tokens)`.
    pub fn tokens_for_request(&self, request: &Request) -> Result<(u64, u64)> {
        let mm = self.patches_for_request(request)? * self.tokens_per_patch;
        Ok((mm, mm + request.prompt_tokens))
    }
}

/// One GPU type and the cluster it sits in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareSpec {
    /// Per-GPU memory, bytes.
    pub gpu_memory: u64,
    /// Bytes/second between GPUs on the same node.
    pub intra_node_bandwidth: f64,
    /// Bytes/second between nodes.
    pub inter_node_bandwidth: f64,
    pub num_gpus: u32,
    #[serde(default = "default_gpus_per_node")]
    pub gpus_per_node: u32,
    /// Fixed per-transfer setup latency, seconds.
    #[serde(default)]
    pub channel_setup: f64,
}

fn default_gpus_per_node() -> u32 {
    8
}

impl HardwareSpec {
    /// Eight 82 GB A100s on one node; NVLink-class intra-node and
    /// InfiniBand-class inter-node bandwidth.
    pub fn a100_node() -> Self {
        Self {
            gpu_memory: 82_000_000_000,
            intra_node_bandwidth: 100e9,
            inter_node_bandwidth: 25e9,
            num_gpus: 8,
            gpus_per_node: 8,
            channel_setup: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gpu_memory == 0 || self.num_gpus == 0 || self.gpus_per_node == 0 {
            return Err(Error::invalid("hardware", "memory and GPU counts must be positive"));
        }
        if !(self.intra_node_bandwidth > 0.0 && self.inter_node_bandwidth > 0.0) {
            return Err(Error::invalid("hardware", "bandwidths must be positive"));
        }
        if self.inter_node_bandwidth > self.intra_node_bandwidth {
            return Err(Error::invalid(
                "hardware",
                "inter-node bandwidth cannot exceed intra-node bandwidth",
            ));
        }
        if self.channel_setup < 0.0 {
            return Err(Error::invalid("hardware", "channel setup must be >= 0"));
        }
        Ok(())
    }
}

/// A model placed on a hardware type; all derived quantities are pure.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryModel {
    pub model: ModelSpec,
    pub hardware: HardwareSpec,
}

impl MemoryModel {
    pub fn new(model: ModelSpec, hardware: HardwareSpec) -> Self {
        Self { model, hardware }
    }

    /// Memory left after resident weights on an instance spanning `gpus` GPUs.
    /// Negative results saturate at zero.
    pub fn free_bytes(&self, role: StageRole, gpus: u32) -> u64 {
        (self.hardware.gpu_memory * u64::from(gpus)).saturating_sub(self.model.resident_bytes(role))
    }

    /// KV-cache capacity in tokens when `kv_fraction` of free memory is reserved.
    pub fn kv_capacity_tokens(&self, role: StageRole, gpus: u32, kv_fraction: f64) -> u64 {
        if !role.holds_kv() {
            return 0;
        }
        let reserved = (self.free_bytes(role, gpus) as f64 * kv_fraction).floor() as u64;
        reserved / self.model.kv_bytes_per_token()
    }
}

/// Structured model catalog file: `[[model]]` records plus optional
/// `[cost.<model name>]` latency calibrations.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Catalog {
    #[serde(default)]
    pub model: Vec<ModelSpec>,
    #[serde(default)]
    pub cost: BTreeMap<String, crate::cost::CostParams>,
}

const BUILTIN_CATALOG: &str = include_str!("../data/models.toml");

impl Catalog {
    pub fn parse(text: &str) -> Result<Self> {
        let catalog: Catalog = toml::from_str(text)?;
        for m in &catalog.model {
            m.validate()?;
        }
        for c in catalog.cost.values() {
            c.validate()?;
        }
        Ok(catalog)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// The catalog shipped with the crate.
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_CATALOG).expect("builtin catalog is valid")
    }

    pub fn model(&self, name: &str) -> Result<&ModelSpec> {
        self.model
            .iter()
            .find(|m| m.name == name)
            .ok_or_else(|| Error::UnknownModel(name.to_string()))
    }

    pub fn cost(&self, name: &str) -> Result<&crate::cost::CostParams> {
        self.cost
            .get(name)
            .ok_or_else(|| Error::UnknownModel(name.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

pub const MINICPM_V_2_6: &str = "minicpm-v-2.6";
pub const INTERNVL2_8B: &str = "internvl2-8b";
pub const INTERNVL2_26B: &str = "internvl2-26b";

/// Shipped model preset by name.
pub fn preset(name: &str) -> Result<ModelSpec> {
    Catalog::builtin().model(name).cloned()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_model() -> ModelSpec {
        ModelSpec {
            name: "unit".into(),
            encoder_params: 1,
            llm_params: 1,
            bytes_per_param: 2,
            num_layers: 1,
            kv_heads: 1,
            head_dim: 1,
            hidden_dim: 1,
            tokens_per_patch: 1,
            patch_table: BTreeMap::from([(Resolution::new(10, 10), 1)]),
            max_context_tokens: 100,
            encode_activation_per_patch: 0,
            prefill_activation_per_token: 0,
            overheads: RoleOverheads::default(),
        }
    }

    #[test]
    fn kv_bytes_unit_and_llama_like() {
        assert_eq!(unit_model().kv_bytes_per_token(), 4);
        let m = ModelSpec {
            num_layers: 32,
            kv_heads: 8,
            head_dim: 128,
            ..unit_model()
        };
        assert_eq!(m.kv_bytes_per_token(), 131_072);
        let doubled = ModelSpec {
            num_layers: 64,
            ..m.clone()
        };
        assert_eq!(doubled.kv_bytes_per_token(), 2 * m.kv_bytes_per_token());
    }

    #[test]
    fn mm_bytes() {
        assert_eq!(unit_model().mm_bytes_per_token(), 2);
        let m = ModelSpec {
            hidden_dim: 4096,
            ..unit_model()
        };
        assert_eq!(m.mm_bytes_per_token(), 8192);
        let wider = ModelSpec {
            hidden_dim: 4097,
            ..unit_model()
        };
        assert!(wider.mm_bytes_per_token() > m.mm_bytes_per_token());
    }

    #[test]
    fn weights_are_additive() {
        for name in [MINICPM_V_2_6, INTERNVL2_8B, INTERNVL2_26B] {
            let m = preset(name).unwrap();
            assert_eq!(
                m.weights_bytes(StageRole::Encode) + m.weights_bytes(StageRole::Prefill),
                m.weights_bytes(StageRole::Monolithic)
            );
            assert_eq!(
                m.weights_bytes(StageRole::EncodePrefill),
                m.weights_bytes(StageRole::Monolithic)
            );
            assert_eq!(
                m.weights_bytes(StageRole::Decode),
                m.weights_bytes(StageRole::Prefill)
            );
        }
    }

    #[test]
    fn encode_worker_reduction_matches_component_sizes() {
        let minicpm = preset(MINICPM_V_2_6).unwrap();
        assert!((minicpm.memory_reduction(StageRole::Encode) - 0.95).abs() < 1e-12);
        let internvl = preset(INTERNVL2_8B).unwrap();
        assert!((internvl.memory_reduction(StageRole::Encode) - 0.9625).abs() < 1e-12);
        // 20/26 from parameter counts alone.
        let big = preset(INTERNVL2_26B).unwrap();
        assert!((big.memory_reduction(StageRole::Encode) - 20.0 / 26.0).abs() < 1e-12);
    }

    #[test]
    fn overhead_term_reconciles_reported_26b_reduction() {
        let mut big = preset(INTERNVL2_26B).unwrap();
        // 3.3 GB of non-parameter memory on the full-model deployment.
        big.overheads.monolithic = 3_300_000_000;
        let reduction = big.memory_reduction(StageRole::Encode);
        assert!((reduction - 0.783).abs() <= 0.02, "{reduction}");
    }

    #[test]
    fn patch_lookup() {
        let minicpm = preset(MINICPM_V_2_6).unwrap();
        assert_eq!(minicpm.patches_for_image(Resolution::new(4032, 3024)).unwrap(), 10);
        assert_eq!(minicpm.patches_for_image(Resolution::new(313, 234)).unwrap(), 1);
        let internvl = preset(INTERNVL2_8B).unwrap();
        assert_eq!(internvl.patches_for_image(Resolution::new(787, 444)).unwrap(), 3);
        assert!(matches!(
            internvl.patches_for_image(Resolution::new(1, 1)),
            Err(Error::UnknownResolution { .. })
        ));
    }

    #[test]
    fn request_tokens() {
        let mut m = unit_model();
        m.tokens_per_patch = 64;
        m.patch_table.insert(Resolution::new(4032, 3024), 10);
        let text = Request::text_only(0, 0.0, 22, 10);
        assert_eq!(m.tokens_for_request(&text).unwrap(), (0, 22));
        let two = Request {
            images: vec![Resolution::new(4032, 3024); 2],
            ..text.clone()
        };
        assert_eq!(m.tokens_for_request(&two).unwrap(), (1280, 1302));
        let one = Request {
            images: vec![Resolution::new(4032, 3024)],
            ..text.clone()
        };
        let (a, _) = m.tokens_for_request(&one).unwrap();
        let (b, _) = m.tokens_for_request(&two).unwrap();
        assert_eq!(2 * a, b);
        let unknown = Request {
            images: vec![Resolution::new(5, 5)],
            ..text
        };
        assert!(m.tokens_for_request(&unknown).is_err());
    }

    #[test]
    fn resolution_parse() {
        assert_eq!("4032x3024".parse::<Resolution>().unwrap(), Resolution::new(4032, 3024));
        assert_eq!("313,234".parse::<Resolution>().unwrap(), Resolution::new(313, 234));
        assert!("abc".parse::<Resolution>().is_err());
    }

    #[test]
    fn validation_rejects_zero_counts() {
        let mut m = unit_model();
        assert!(m.validate().is_ok());
        m.head_dim = 0;
        assert!(m.validate().is_err());
        let mut m = unit_model();
        m.max_context_tokens = 1;
        assert!(m.validate().is_err());
    }

    #[test]
    fn catalog_round_trips_through_toml() {
        let builtin = Catalog::builtin();
        let again = Catalog::parse(&builtin.to_toml().unwrap()).unwrap();
        assert_eq!(builtin.model, again.model);
        assert_eq!(builtin.cost, again.cost);
    }

    #[test]
    fn hardware_validation() {
        let mut hw = HardwareSpec::a100_node();
        assert!(hw.validate().is_ok());
        hw.inter_node_bandwidth = hw.intra_node_bandwidth * 2.0;
        assert!(hw.validate().is_err());
    }
}
