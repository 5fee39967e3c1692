//! Discrete-event simulation of a multi-instance serving deployment.

pub mod block;
pub mod config;
mod engine;
pub mod event;
pub mod sched;
pub mod trace;

pub use config::{layout_string, parse_layout, InstanceConfig, SchedulePolicy, StageDefaults, SystemConfig};
pub use engine::run_simulation;
pub use event::EventKind;
pub use trace::{InstanceStats, RequestRecord, ShardRecord, SimEventKind, SimTrace, TraceEvent};
