//! Simulator and configuration optimizer for multimodal model serving with
//! the encode, prefill and decode stages disaggregated onto separate
//! instances.
//!
//! The crate is organised bottom-up:
//!
//! - [`model`] and [`cost`] describe models, hardware and the analytic
//!   latency model;
//! - [`capacity`] answers static memory questions (images per request,
//!   batch sizes, KV fraction);
//! - [`workload`] builds request streams;
//! - [`sim`] runs a deployment against a workload and returns a trace;
//! - [`metrics`] turns traces into TTFT, TPOT, attainment and goodput;
//! - [`optimizer`] searches deployments, [`role_switch`] reassigns instances
//!   online;
//! - [`presets`] bundles the experiment definitions used by the `epd` binary.

pub mod capacity;
pub mod cost;
pub mod error;
pub mod metrics;
pub mod model;
pub mod optimizer;
pub mod presets;
pub mod role_switch;
pub mod sim;
pub mod workload;

pub use error::{Error, Result};
pub use model::{HardwareSpec, ModelSpec, Resolution, StageRole};
pub use sim::{run_simulation, SimTrace, SystemConfig};
pub use workload::{Request, Slo, WorkloadSpec};
