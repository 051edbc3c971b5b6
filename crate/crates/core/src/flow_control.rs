//! Event-driven terminal-speed commands that couple neighboring zones.
//!
//! The coordinator recomputes its command whenever a vehicle enters or exits
//! the zone or a neighbor; between events the command is constant. The
//! feedback form is `vm = v_b − k·N`, with `N` either the downstream zone's
//! occupancy or the occupancy of its first `l` meters (the critical segment,
//! where entering vehicles may still be enforcing feasibility).

use crate::trajectory::optimal_terminal_velocity;

/// Baseline speed of the feedback law.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaselineSpeed {
    Constant { value: f64 },
    /// Mean of the per-vehicle optimal terminal speeds over sampled entry
    /// speeds.
    AvgOptimal,
    /// Mean speed inside the downstream critical segment plus an offset.
    AvgCriticalSpeedPlus { offset: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// No flow control: vehicles plan toward their own optimal terminal speed.
    None,
    Fixed,
    /// vm = v_b − k·(downstream occupancy).
    Feedback,
    /// vm = v_b − k·(occupancy of the downstream critical segment).
    CriticalFeedback,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FlowPolicy {
    pub kind: PolicyKind,
    pub v_b: BaselineSpeed,
    /// Feedback gain ((m/s) per vehicle).
    pub k: f64,
    /// Critical-segment length (m).
    pub l: f64,
    pub vm_min: f64,
    pub vm_max: f64,
}

impl FlowPolicy {
    pub fn none(vm_min: f64, vm_max: f64) -> Self {
        Self {
            kind: PolicyKind::None,
            v_b: BaselineSpeed::Constant { value: 0.0 },
            k: 0.0,
            l: 50.0,
            vm_min,
            vm_max,
        }
    }

    pub fn fixed(value: f64, vm_min: f64, vm_max: f64) -> Self {
        Self {
            kind: PolicyKind::Fixed,
            v_b: BaselineSpeed::Constant { value },
            k: 0.0,
            l: 50.0,
            vm_min,
            vm_max,
        }
    }
}

/// What a coordinator can observe about its downstream neighbor at an event.
#[derive(Debug, Clone, Copy, Default)]
pub struct NeighborView {
    pub occupancy: usize,
    pub critical_occupancy: usize,
    /// Mean speed over vehicles in the critical segment, if any.
    pub critical_mean_speed: Option<f64>,
    pub vm_command: f64,
}

/// Number of vehicles positioned within the first `l` meters.
pub fn count_critical(positions: &[f64], l: f64) -> usize {
    positions.iter().filter(|&&x| x <= l).count()
}

/// Baseline for `AvgOptimal`: mean of per-sample optimal terminal speeds.
pub fn compute_vb_avg_optimal(
    entry_speeds: &[f64],
    length: f64,
    beta: f64,
    vm_min: f64,
    vm_max: f64,
) -> f64 {
    assert!(!entry_speeds.is_empty(), "empty sample set");
    let sum: f64 = entry_speeds
        .iter()
        .map(|&v0| optimal_terminal_velocity(v0, length, beta, vm_min, vm_max))
        .sum();
    sum / entry_speeds.len() as f64
}

/// New terminal-speed command for a zone after an arrival/departure event.
///
/// `avg_optimal_vb` carries the pre-resolved `AvgOptimal` baseline;
/// `current_vm` is returned unchanged for `PolicyKind::None`.
pub fn on_event(
    policy: &FlowPolicy,
    current_vm: f64,
    downstream: Option<&NeighborView>,
    avg_optimal_vb: Option<f64>,
) -> f64 {
    if policy.kind == PolicyKind::None {
        return current_vm;
    }
    let v_b = match policy.v_b {
        BaselineSpeed::Constant { value } => value,
        BaselineSpeed::AvgOptimal => avg_optimal_vb.unwrap_or(current_vm),
        BaselineSpeed::AvgCriticalSpeedPlus { offset } => {
            // An empty critical segment falls back to the neighbor's own
            // command (free-flowing downstream).
            let base = downstream
                .and_then(|d| d.critical_mean_speed)
                .or(downstream.map(|d| d.vm_command))
                .unwrap_or(current_vm);
            base + offset
        }
    };
    let n = match policy.kind {
        PolicyKind::None => unreachable!(),
        PolicyKind::Fixed => 0,
        PolicyKind::Feedback => downstream.map_or(0, |d| d.occupancy),
        PolicyKind::CriticalFeedback => downstream.map_or(0, |d| d.critical_occupancy),
    };
    (v_b - policy.k * n as f64).clamp(policy.vm_min, policy.vm_max)
}
