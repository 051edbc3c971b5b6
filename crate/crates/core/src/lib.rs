//! Microscopic simulator for chains of merging control zones.
//!
//! Each zone runs decentralized vehicle controllers that track an
//! unconstrained minimum-effort reference through a per-step quadratic
//! program with barrier (safety) and Lyapunov (tracking) constraints, while a
//! per-zone coordinator regulates traffic flow between neighboring zones by
//! commanding the terminal speed vehicles must hold at the merging point.

pub mod audit;
pub mod control_zone;
pub mod cubic;
pub mod flow_control;
pub mod safety_filter;
pub mod sim_engine;
pub mod trajectory;

pub use control_zone::{CavId, CavState, CavZoneMetrics, ControlZone, Lane, Mode, TraceRow, ZoneParams};
pub use flow_control::{BaselineSpeed, FlowPolicy, PolicyKind};
pub use safety_filter::{LinearConstraint, QpInstance, QpSolution, Sense};
pub use sim_engine::{
    ConfigError, MetricsRecord, RunOutput, ScenarioConfig, SimEvent, ZoneConfig,
};

pub use trajectory::{CostWeights, ReplanMethod, TrajectoryError, TrajectoryPlan};
