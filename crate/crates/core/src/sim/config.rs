//! System configuration: the per-instance role, parallelism, batch size and
//! scheduling policy vectors, plus the file format that carries them.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cost::CostParams;
use crate::error::{Error, Result};
use crate::model::{Catalog, HardwareSpec, MemoryModel, ModelSpec, StageRole};
use crate::role_switch::ControllerParams;

/// How requests are assigned to the instances of a stage. Queues are always
/// served first-come-first-served.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
pub enum SchedulePolicy {
    /// Join the instance with the fewest queued jobs; ties go to the lowest id.
    #[default]
    Fcfs,
    RoundRobinAssign,
    /// Join the instance with the least queued work (patches or tokens).
    LeastLoadedAssign,
}

impl fmt::Display for SchedulePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Fcfs => "fcfs",
            Self::RoundRobinAssign => "round-robin",
            Self::LeastLoadedAssign => "least-loaded",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceConfig {
    pub role: StageRole,
    /// Tensor-parallel width; for encode instances this is the IRP width
    /// inside the instance.
    pub tp: u32,
    pub pp: u32,
    pub max_batch: u32,
    #[serde(default)]
    pub policy: SchedulePolicy,
}

impl InstanceConfig {
    pub fn new(role: StageRole, max_batch: u32) -> Self {
        Self {
            role,
            tp: 1,
            pp: 1,
            max_batch,
            policy: SchedulePolicy::default(),
        }
    }

    pub fn gpus(&self) -> u32 {
        self.tp * self.pp
    }
}

/// Per-role instance template used when expanding `xEyPzD` layouts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageDefaults {
    pub encode: InstanceConfig,
    pub prefill: InstanceConfig,
    pub decode: InstanceConfig,
    pub encode_prefill: InstanceConfig,
    pub monolithic: InstanceConfig,
}

impl Default for StageDefaults {
    /// Batching disabled for encode and prefill; continuous batching for decode.
    fn default() -> Self {
        Self {
            encode: InstanceConfig::new(StageRole::Encode, 1),
            prefill: InstanceConfig::new(StageRole::Prefill, 1),
            decode: InstanceConfig::new(StageRole::Decode, 128),
            encode_prefill: InstanceConfig::new(StageRole::EncodePrefill, 1),
            monolithic: InstanceConfig::new(StageRole::Monolithic, 128),
        }
    }
}

impl StageDefaults {
    pub fn for_role(&self, role: StageRole) -> InstanceConfig {
        let mut c = match role {
            StageRole::Encode => self.encode,
            StageRole::Prefill => self.prefill,
            StageRole::Decode => self.decode,
            StageRole::EncodePrefill => self.encode_prefill,
            StageRole::Monolithic => self.monolithic,
        };
        c.role = role;
        c
    }

    pub fn with_batches(mut self, encode: u32, prefill: u32, decode: u32) -> Self {
        self.encode.max_batch = encode;
        self.prefill.max_batch = prefill;
        self.encode_prefill.max_batch = encode.max(prefill);
        self.decode.max_batch = decode;
        self
    }

    pub fn with_policy(mut self, policy: SchedulePolicy) -> Self {
        for c in [
            &mut self.encode,
            &mut self.prefill,
            &mut self.decode,
            &mut self.encode_prefill,
            &mut self.monolithic,
        ] {
            c.policy = policy;
        }
        self
    }
}

/// Expands shorthand like `5E2P1D`, `7EP1D` or `8M` into instance configs.
pub fn parse_layout(layout: &str, defaults: &StageDefaults) -> Result<Vec<InstanceConfig>> {
    let err = |reason: String| Error::invalid("layout", format!("`{layout}`: {reason}"));
    let mut out = Vec::new();
    let mut rest = layout.trim();
    if rest.is_empty() {
        return Err(err("empty".into()));
    }
    while !rest.is_empty() {
        let digits = rest.chars().take_while(char::is_ascii_digit).count();
        if digits == 0 {
            return Err(err("expected a count".into()));
        }
        let count: usize = rest[..digits].parse().map_err(|e| err(format!("{e}")))?;
        rest = &rest[digits..];
        let (role, len) = if rest.starts_with("EP") {
            (StageRole::EncodePrefill, 2)
        } else {
            match rest.chars().next() {
                Some('E') => (StageRole::Encode, 1),
                Some('P') => (StageRole::Prefill, 1),
                Some('D') => (StageRole::Decode, 1),
                Some('M') => (StageRole::Monolithic, 1),
                other => return Err(err(format!("unexpected {other:?}"))),
            }
        };
        rest = &rest[len..];
        out.extend(std::iter::repeat_n(defaults.for_role(role), count));
    }
    Ok(out)
}

/// Renders instance roles back into `xEyPzD` shorthand (order E, EP, P, D, M).
pub fn layout_string(instances: &[InstanceConfig]) -> String {
    let roles = [
        StageRole::Encode,
        StageRole::EncodePrefill,
        StageRole::Prefill,
        StageRole::Decode,
        StageRole::Monolithic,
    ];
    roles
        .iter()
        .filter_map(|&role| {
            let n = instances.iter().filter(|i| i.role == role).count();
            (n > 0).then(|| format!("{n}{}", role.short()))
        })
        .collect()
}

fn default_kv_fraction() -> f64 {
    0.5
}

fn default_mm_cache_tokens() -> u64 {
    48_000
}

fn default_block_size() -> u64 {
    16
}

fn yes() -> bool {
    true
}

/// Everything one simulation run needs besides the workload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub model: ModelSpec,
    pub hardware: HardwareSpec,
    pub cost: CostParams,
    pub instances: Vec<InstanceConfig>,
    /// Shard each request's patches across all active encode instances.
    #[serde(default)]
    pub irp: bool,
    /// Fraction of post-weights memory reserved for KV cache.
    #[serde(default = "default_kv_fraction")]
    pub kv_fraction: f64,
    /// MM cache capacity per instance, tokens.
    #[serde(default = "default_mm_cache_tokens")]
    pub mm_cache_tokens: u64,
    #[serde(default = "default_block_size")]
    pub block_size: u64,
    /// Reject requests whose caches can never fit instead of failing the run.
    #[serde(default = "yes")]
    pub admission_control: bool,
    #[serde(default)]
    pub role_switch: Option<ControllerParams>,
}

impl SystemConfig {
    pub fn new(model: ModelSpec, hardware: HardwareSpec, cost: CostParams, instances: Vec<InstanceConfig>) -> Self {
        Self {
            model,
            hardware,
            cost,
            instances,
            irp: false,
            kv_fraction: default_kv_fraction(),
            mm_cache_tokens: default_mm_cache_tokens(),
            block_size: default_block_size(),
            admission_control: true,
            role_switch: None,
        }
    }

    /// Builds a config from a model preset and a layout string using the
    /// preset's calibration and an 8-GPU A100 node.
    pub fn from_preset(model: &str, layout: &str, defaults: &StageDefaults) -> Result<Self> {
        let catalog = Catalog::builtin();
        Ok(Self::new(
            catalog.model(model)?.clone(),
            HardwareSpec::a100_node(),
            catalog.cost(model)?.clone(),
            parse_layout(layout, defaults)?,
        ))
    }

    pub fn with_irp(mut self, irp: bool) -> Self {
        self.irp = irp;
        self
    }

    pub fn with_role_switch(mut self, params: Option<ControllerParams>) -> Self {
        self.role_switch = params;
        self
    }

    pub fn layout(&self) -> String {
        layout_string(&self.instances)
    }

    pub fn total_gpus(&self) -> u32 {
        self.instances.iter().map(InstanceConfig::gpus).sum()
    }

    pub fn memory(&self) -> MemoryModel {
        MemoryModel::new(self.model.clone(), self.hardware.clone())
    }

    fn count(&self, role: StageRole) -> usize {
        self.instances.iter().filter(|i| i.role == role).count()
    }

    /// Checks the invariants a run depends on. Violations are `ConfigInfeasible`
    /// when they describe an impossible deployment and `Invalid` otherwise.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.hardware.validate()?;
        self.cost.validate()?;
        if !(0.0..=1.0).contains(&self.kv_fraction) {
            return Err(Error::invalid("config", "kv_fraction must be in [0, 1]"));
        }
        if self.block_size == 0 {
            return Err(Error::invalid("config", "block_size must be >= 1"));
        }
        let infeasible = |m: String| Err(Error::ConfigInfeasible(m));
        if self.instances.is_empty() {
            return infeasible("no instances".into());
        }
        for (i, inst) in self.instances.iter().enumerate() {
            if inst.tp == 0 || inst.pp == 0 || inst.max_batch == 0 {
                return infeasible(format!("instance {i}: tp, pp and max_batch must be >= 1"));
            }
            if inst.role == StageRole::Encode && inst.pp != 1 {
                return infeasible(format!("instance {i}: encode instances use pp = 1"));
            }
            let mem = self.hardware.gpu_memory * u64::from(inst.gpus());
            if self.model.resident_bytes(inst.role) > mem {
                return infeasible(format!("instance {i}: {} weights exceed {} GPU(s) of memory", inst.role, inst.gpus()));
            }
        }
        if self.total_gpus() > self.hardware.num_gpus {
            return infeasible(format!(
                "{} GPUs requested, {} available",
                self.total_gpus(),
                self.hardware.num_gpus
            ));
        }
        let (e, p, d) = (
            self.count(StageRole::Encode),
            self.count(StageRole::Prefill),
            self.count(StageRole::Decode),
        );
        let (ep, m) = (self.count(StageRole::EncodePrefill), self.count(StageRole::Monolithic));
        if m > 0 && m != self.instances.len() {
            return infeasible("monolithic instances cannot be mixed with other roles".into());
        }
        if m == 0 {
            if ep > 0 && (e > 0 || p > 0) {
                return infeasible("encode-prefill instances cannot be mixed with split E or P".into());
            }
            if e + ep == 0 {
                return infeasible("no instance serves the encode stage".into());
            }
            if p + ep == 0 {
                return infeasible("no instance serves the prefill stage".into());
            }
            if d == 0 {
                return infeasible("no instance serves the decode stage".into());
            }
        }
        if let Some(rs) = &self.role_switch {
            rs.validate()?;
            if m > 0 || ep > 0 {
                return infeasible("role switching needs a split E/P/D deployment".into());
            }
            let min = rs.min_instances_per_stage as usize;
            if e < min || p < min || d < min {
                return infeasible(format!("role switching needs >= {min} instance(s) per stage"));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    /// Parses the config file format: either a full serialized config or the
    /// short form with a model preset name and a layout string.
    pub fn parse(text: &str) -> Result<Self> {
        let file: ConfigFile = toml::from_str(text)?;
        file.resolve()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum ModelRef {
    Name(String),
    Spec(Box<ModelSpec>),
}

#[derive(Debug, Clone, Deserialize)]
struct ConfigFile {
    model: ModelRef,
    #[serde(default)]
    hardware: Option<HardwareSpec>,
    #[serde(default)]
    cost: Option<CostParams>,
    #[serde(default)]
    layout: Option<String>,
    #[serde(default)]
    defaults: Option<StageDefaults>,
    #[serde(default)]
    instances: Option<Vec<InstanceConfig>>,
    #[serde(default)]
    irp: bool,
    #[serde(default = "default_kv_fraction")]
    kv_fraction: f64,
    #[serde(default = "default_mm_cache_tokens")]
    mm_cache_tokens: u64,
    #[serde(default = "default_block_size")]
    block_size: u64,
    #[serde(default = "yes")]
    admission_control: bool,
    #[serde(default)]
    role_switch: Option<ControllerParams>,
}

impl ConfigFile {
    fn resolve(self) -> Result<SystemConfig> {
        let catalog = Catalog::builtin();
        let model = match self.model {
            ModelRef::Name(n) => catalog.model(&n)?.clone(),
            ModelRef::Spec(m) => *m,
        };
        let cost = match self.cost {
            Some(c) => c,
            None => catalog.cost(&model.name)?.clone(),
        };
        let instances = match (self.instances, self.layout) {
            (Some(i), None) => i,
            (None, Some(l)) => parse_layout(&l, &self.defaults.unwrap_or_default())?,
            (Some(_), Some(_)) => {
                return Err(Error::invalid("config", "give either `layout` or `instances`, not both"))
            }
            (None, None) => return Err(Error::invalid("config", "missing `layout` or `instances`")),
        };
        Ok(SystemConfig {
            model,
            hardware: self.hardware.unwrap_or_else(HardwareSpec::a100_node),
            cost,
            instances,
            irp: self.irp,
            kv_fraction: self.kv_fraction,
            mm_cache_tokens: self.mm_cache_tokens,
            block_size: self.block_size,
            admission_control: self.admission_control,
            role_switch: self.role_switch,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MINICPM_V_2_6;

    #[test]
    fn layout_expansion() {
        let d = StageDefaults::default();
        let v = parse_layout("5E1P2D", &d).unwrap();
        assert_eq!(v.len(), 8);
        assert_eq!(v.iter().filter(|i| i.role == StageRole::Encode).count(), 5);
        assert_eq!(v[7].max_batch, 128);
        let v = parse_layout("7EP1D", &d).unwrap();
        assert_eq!(v[0].role, StageRole::EncodePrefill);
        assert_eq!(layout_string(&v), "7EP1D");
        assert_eq!(layout_string(&parse_layout("8M", &d).unwrap()), "8M");
        assert!(parse_layout("5X", &d).is_err());
        assert!(parse_layout("E", &d).is_err());
        assert!(parse_layout("", &d).is_err());
    }

    #[test]
    fn gpu_budget_enforced() {
        let cfg = SystemConfig::from_preset(MINICPM_V_2_6, "5E3P2D", &StageDefaults::default()).unwrap();
        assert!(matches!(cfg.validate(), Err(Error::ConfigInfeasible(_))));
        let cfg = SystemConfig::from_preset(MINICPM_V_2_6, "5E2P1D", &StageDefaults::default()).unwrap();
        cfg.validate().unwrap();
    }

    #[test]
    fn stage_coverage_enforced() {
        let d = StageDefaults::default();
        for layout in ["4E4P", "4P4D", "4E4D", "2EP2E1D", "2M1D"] {
            let cfg = SystemConfig::from_preset(MINICPM_V_2_6, layout, &d).unwrap();
            assert!(matches!(cfg.validate(), Err(Error::ConfigInfeasible(_))), "{layout}");
        }
        for layout in ["7EP1D", "8M", "1E1P1D"] {
            SystemConfig::from_preset(MINICPM_V_2_6, layout, &d).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn encode_pipeline_parallel_rejected() {
        let mut cfg = SystemConfig::from_preset(MINICPM_V_2_6, "1E1P1D", &StageDefaults::default()).unwrap();
        cfg.instances[0].pp = 2;
        assert!(matches!(cfg.validate(), Err(Error::ConfigInfeasible(_))));
    }

    #[test]
    fn short_and_full_file_forms() {
        let short = r#"
            model = "minicpm-v-2.6"
            layout = "5E2P1D"
            irp = true
            [defaults.decode]
            role = "Decode"
            tp = 1
            pp = 1
            max_batch = 64
        "#;
        let cfg = SystemConfig::parse(short).unwrap();
        assert!(cfg.irp);
        assert_eq!(cfg.layout(), "5E2P1D");
        assert_eq!(cfg.instances[7].max_batch, 64);
        let full = SystemConfig::parse(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, full);
    }
}
