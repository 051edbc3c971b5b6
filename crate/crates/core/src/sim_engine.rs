//! Deterministic time-stepped simulation of a control-zone network.
//!
//! Each step: (1) draw arrivals on every inflow road, (2) admit queued
//! arrivals whose entry is safe, (3) step every zone on a snapshot frozen at
//! the step start, (4) process exits and hand vehicles to downstream zones,
//! (5) dispatch flow-control events. Identical (scenario, seed) pairs produce
//! bit-identical outputs.
//!
//! Trace schema (CSV column order):
//! `t,cav,zone,lane,fifo_index,x,v,u,e_relax,mode,qp_feasible` — one row per
//! (step, vehicle), carrying the step-start state and the control applied
//! over the following interval.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Poisson};
use std::collections::VecDeque;

use crate::control_zone::{
    CavId, CavZoneMetrics, ControlZone, Lane, TraceRow, ZoneParams,
};
use crate::flow_control::{
    compute_vb_avg_optimal, count_critical, on_event, BaselineSpeed, FlowPolicy, NeighborView,
    PolicyKind,
};
use crate::trajectory::{optimal_terminal_velocity, CostWeights};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("scenario must define at least one zone")]
    NoZones,
    #[error("duplicate zone id {0}")]
    DuplicateZone(u32),
    #[error("zone {zone}: downstream zone {downstream} not found")]
    UnknownDownstream { zone: u32, downstream: u32 },
    #[error("zone topology contains a cycle through zone {0}")]
    CyclicTopology(u32),
    #[error("zone {zone}: {message}")]
    InvalidZone { zone: u32, message: String },
    #[error("{0}")]
    Invalid(String),
}

/// Entry-speed distribution of externally arriving vehicles.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EntrySpeed {
    Constant { value: f64 },
    Uniform { low: f64, high: f64 },
}

impl EntrySpeed {
    fn sample(&self, rng: &mut ChaCha12Rng) -> f64 {
        match *self {
            EntrySpeed::Constant { value } => value,
            EntrySpeed::Uniform { low, high } => rng.gen_range(low..high),
        }
    }

    /// Deterministic quantile midpoints, used to resolve sampled baselines.
    pub fn quantile_grid(&self, n: usize) -> Vec<f64> {
        match *self {
            EntrySpeed::Constant { value } => vec![value],
            EntrySpeed::Uniform { low, high } => (0..n)
                .map(|i| low + (high - low) * (i as f64 + 0.5) / n as f64)
                .collect(),
        }
    }
}

/// Arrival rate in vehicles/hour effective from time `t` onward.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatePoint {
    pub t: f64,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InflowConfig {
    pub lane: Lane,
    pub schedule: Vec<RatePoint>,
}

// Plain fields precede `v_b` so the TOML form emits values before tables.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    #[serde(default)]
    pub k: f64,
    #[serde(default)]
    pub l: Option<f64>,
    #[serde(default)]
    pub vm_min: Option<f64>,
    #[serde(default)]
    pub vm_max: Option<f64>,
    #[serde(default)]
    pub v_b: Option<BaselineSpeed>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self { kind: PolicyKind::None, v_b: None, k: 0.0, l: None, vm_min: None, vm_max: None }
    }
}

fn d_length() -> f64 {
    200.0
}
fn d_phi() -> f64 {
    1.8
}
fn d_v_max() -> f64 {
    30.0
}
fn d_u_min() -> f64 {
    -4.0
}
fn d_u_max() -> f64 {
    4.0
}
fn d_alpha() -> f64 {
    0.0625
}
fn d_eps() -> f64 {
    10.0
}
fn d_gain() -> f64 {
    1.0
}
fn d_perturb() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZoneConfig {
    pub id: u32,
    #[serde(default = "d_length")]
    pub length: f64,
    #[serde(default = "d_phi")]
    pub phi: f64,
    #[serde(default)]
    pub delta: f64,
    #[serde(default)]
    pub v_min: f64,
    #[serde(default = "d_v_max")]
    pub v_max: f64,
    #[serde(default = "d_u_min")]
    pub u_min: f64,
    #[serde(default = "d_u_max")]
    pub u_max: f64,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    #[serde(default = "d_gain")]
    pub k_rear: f64,
    #[serde(default = "d_gain")]
    pub k_merge: f64,
    #[serde(default = "d_gain")]
    pub k_speed: f64,
    /// Feasibility-enforcement distance budget; defaults to length/4.
    #[serde(default)]
    pub fe_limit: Option<f64>,
    #[serde(default = "d_perturb")]
    pub perturb_threshold: f64,
    #[serde(default)]
    pub downstream: Option<u32>,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default, rename = "inflow")]
    pub inflows: Vec<InflowConfig>,
}

impl ZoneConfig {
    pub fn new(id: u32) -> Self {
        Self {
            id,
            length: d_length(),
            phi: d_phi(),
            delta: 0.0,
            v_min: 0.0,
            v_max: d_v_max(),
            u_min: d_u_min(),
            u_max: d_u_max(),
            alpha: d_alpha(),
            eps: d_eps(),
            k_rear: 1.0,
            k_merge: 1.0,
            k_speed: 1.0,
            fe_limit: None,
            perturb_threshold: d_perturb(),
            downstream: None,
            policy: PolicyConfig::default(),
            inflows: Vec::new(),
        }
    }

    fn params(&self) -> Result<ZoneParams, ConfigError> {
        let weights = CostWeights::from_alpha(self.alpha, self.u_min, self.u_max).map_err(|e| {
            ConfigError::InvalidZone { zone: self.id, message: e.to_string() }
        })?;
        Ok(ZoneParams {
            length: self.length,
            phi: self.phi,
            delta: self.delta,
            v_min: self.v_min,
            v_max: self.v_max,
            u_min: self.u_min,
            u_max: self.u_max,
            weights,
            eps: self.eps,
            k_rear: self.k_rear,
            k_merge: self.k_merge,
            k_speed: self.k_speed,
            fe_limit: self.fe_limit.unwrap_or(self.length / 4.0),
            perturb_threshold: self.perturb_threshold,
        })
    }

    fn policy(&self) -> FlowPolicy {
        let vm_min = self.policy.vm_min.unwrap_or(self.v_min.max(1.0));
        let vm_max = self.policy.vm_max.unwrap_or(self.v_max);
        FlowPolicy {
            kind: self.policy.kind,
            v_b: self.policy.v_b.unwrap_or(BaselineSpeed::Constant { value: vm_max }),
            k: self.policy.k,
            l: self.policy.l.unwrap_or(self.length / 4.0),
            vm_min,
            vm_max,
        }
    }
}

fn d_dt() -> f64 {
    0.1
}
fn d_duration() -> f64 {
    400.0
}
fn d_seed() -> u64 {
    1
}
fn d_entry_speed() -> EntrySpeed {
    EntrySpeed::Uniform { low: 15.0, high: 20.0 }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "d_dt")]
    pub dt: f64,
    #[serde(default = "d_duration")]
    pub duration: f64,
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default)]
    pub deterministic_arrivals: bool,
    #[serde(default = "d_entry_speed")]
    pub entry_speed: EntrySpeed,
    #[serde(rename = "zone")]
    pub zones: Vec<ZoneConfig>,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.zones.is_empty() {
            return Err(ConfigError::NoZones);
        }
        if !(self.dt > 0.0) {
            return Err(ConfigError::Invalid(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.duration > 0.0) {
            return Err(ConfigError::Invalid(format!(
                "duration must be positive, got {}",
                self.duration
            )));
        }
        if let EntrySpeed::Uniform { low, high } = self.entry_speed {
            if !(low <= high && low >= 0.0) {
                return Err(ConfigError::Invalid(format!(
                    "entry speed range [{low}, {high}] is invalid"
                )));
            }
        }
        let mut seen = Vec::new();
        for z in &self.zones {
            if seen.contains(&z.id) {
                return Err(ConfigError::DuplicateZone(z.id));
            }
            seen.push(z.id);
        }
        for z in &self.zones {
            let bad = |message: String| ConfigError::InvalidZone { zone: z.id, message };
            if !(z.length > 0.0) {
                return Err(bad(format!("length must be positive, got {}", z.length)));
            }
            if !(z.phi > 0.0) {
                return Err(bad(format!("phi must be positive, got {}", z.phi)));
            }
            if !(z.v_min <= z.v_max) {
                return Err(bad("v_min exceeds v_max".into()));
            }
            if !(z.u_min < 0.0 && z.u_max > 0.0) {
                return Err(bad("control bounds must satisfy u_min < 0 < u_max".into()));
            }
            if !(0.0..1.0).contains(&z.alpha) {
                return Err(bad(format!("alpha must lie in [0, 1), got {}", z.alpha)));
            }
            if z.policy.k < 0.0 {
                return Err(bad("feedback gain k must be nonnegative".into()));
            }
            if let Some(l) = z.policy.l {
                if !(l > 0.0) {
                    return Err(bad("critical length l must be positive".into()));
                }
            }
            let p = z.policy();
            if !(p.vm_min <= p.vm_max) {
                return Err(bad("vm_min exceeds vm_max".into()));
            }
            if let Some(d) = z.downstream {
                if !self.zones.iter().any(|o| o.id == d) {
                    return Err(ConfigError::UnknownDownstream { zone: z.id, downstream: d });
                }
            }
            for inflow in &z.inflows {
                if inflow.schedule.is_empty() {
                    return Err(bad("inflow schedule is empty".into()));
                }
                if inflow.schedule.iter().any(|p| p.rate < 0.0) {
                    return Err(bad("arrival rates must be nonnegative".into()));
                }
            }
        }
        // Downstream links must be acyclic.
        for z in &self.zones {
            let mut hops = 0;
            let mut cur = z.downstream;
            while let Some(d) = cur {
                hops += 1;
                if hops > self.zones.len() {
                    return Err(ConfigError::CyclicTopology(z.id));
                }
                cur = self.zones.iter().find(|o| o.id == d).and_then(|o| o.downstream);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SimEvent {
    Admitted { t: f64, cav: u64, zone: u32, lane: Lane, speed: f64, from_upstream: bool },
    Exited {
        t: f64,
        cav: u64,
        zone: u32,
        v_cross: f64,
        im1: Option<u64>,
        im1_is_ip: bool,
        to_zone: Option<u32>,
    },
    VmChanged { t: f64, zone: u32, old: f64, new: f64 },
}

/// Zone-level aggregate over completed traversals.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct ZoneAggregate {
    pub zone: u32,
    pub exited: usize,
    pub mean_travel_time: f64,
    pub mean_energy: f64,
    pub mean_obj_weighted: f64,
    pub mean_obj_normalized: f64,
    /// Vehicles that spent any time enforcing feasibility.
    pub fem_count: usize,
    /// Mean enforcement time over those vehicles.
    pub fem_time_avg: f64,
    /// Vehicles that hit at least one infeasible tracking step.
    pub infeasible_count: usize,
}

/// Whole-journey record for one vehicle (sums over traversed zones).
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct NetworkCavMetrics {
    pub cav: u64,
    /// Time of first admission into the network.
    pub entered: f64,
    /// Whether the vehicle cleared the terminal zone of its route.
    pub completed: bool,
    pub travel_time: f64,
    pub energy: f64,
    pub obj_weighted: f64,
    pub obj_normalized: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct MetricsRecord {
    pub per_cav_zone: Vec<CavZoneMetrics>,
    pub zones: Vec<ZoneAggregate>,
    pub per_cav_network: Vec<NetworkCavMetrics>,
    /// Sum of zone mean objectives.
    pub total_obj_weighted: f64,
    pub total_obj_normalized: f64,
    pub fem_count: usize,
    pub fem_time_avg: f64,
    pub infeasible_count: usize,
}

fn mean_of(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for x in xs {
        sum += x;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

impl MetricsRecord {
    fn build(per_cav_zone: Vec<CavZoneMetrics>, zone_ids: &[u32], routes: &Routes) -> Self {
        let mut zones = Vec::with_capacity(zone_ids.len());
        for &zid in zone_ids {
            let rows: Vec<&CavZoneMetrics> =
                per_cav_zone.iter().filter(|m| m.zone == zid).collect();
            let fem: Vec<&&CavZoneMetrics> = rows.iter().filter(|m| m.fe_time > 0.0).collect();
            zones.push(ZoneAggregate {
                zone: zid,
                exited: rows.len(),
                mean_travel_time: mean_of(rows.iter().map(|m| m.travel_time)),
                mean_energy: mean_of(rows.iter().map(|m| m.energy)),
                mean_obj_weighted: mean_of(rows.iter().map(|m| m.obj_weighted)),
                mean_obj_normalized: mean_of(rows.iter().map(|m| m.obj_normalized)),
                fem_count: fem.len(),
                fem_time_avg: mean_of(fem.iter().map(|m| m.fe_time)),
                infeasible_count: rows.iter().filter(|m| m.infeasible_steps > 0).count(),
            });
        }
        // Whole-journey records, keyed by the vehicle's first admission.
        let mut per_cav_network: Vec<NetworkCavMetrics> = Vec::new();
        let mut by_cav: std::collections::BTreeMap<u64, Vec<&CavZoneMetrics>> =
            std::collections::BTreeMap::new();
        for m in &per_cav_zone {
            by_cav.entry(m.cav).or_default().push(m);
        }
        for (cav, rows) in by_cav {
            let entered = routes.entered.get(&cav).copied().unwrap_or_else(|| {
                rows.iter().map(|m| m.t_entry).fold(f64::INFINITY, f64::min)
            });
            let completed = rows.iter().any(|m| routes.terminal_zones.contains(&m.zone));
            per_cav_network.push(NetworkCavMetrics {
                cav,
                entered,
                completed,
                travel_time: rows.iter().map(|m| m.travel_time).sum(),
                energy: rows.iter().map(|m| m.energy).sum(),
                obj_weighted: rows.iter().map(|m| m.obj_weighted).sum(),
                obj_normalized: rows.iter().map(|m| m.obj_normalized).sum(),
            });
        }
        let fem_count = zones.iter().map(|z| z.fem_count).sum();
        let fem_time_total: f64 = per_cav_zone.iter().map(|m| m.fe_time).sum();
        MetricsRecord {
            total_obj_weighted: zones.iter().map(|z| z.mean_obj_weighted).sum(),
            total_obj_normalized: zones.iter().map(|z| z.mean_obj_normalized).sum(),
            fem_count,
            fem_time_avg: if fem_count == 0 { 0.0 } else { fem_time_total / fem_count as f64 },
            infeasible_count: zones.iter().map(|z| z.infeasible_count).sum(),
            per_cav_zone,
            zones,
            per_cav_network,
        }
    }
}

struct Routes {
    entered: std::collections::BTreeMap<u64, f64>,
    terminal_zones: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: MetricsRecord,
    pub events: Vec<SimEvent>,
    pub trace: Vec<TraceRow>,
    pub arrivals_generated: usize,
    pub admitted_external: usize,
    pub network_exits: usize,
    pub in_system_at_end: usize,
    pub held_at_end: usize,
}

/// Piecewise-constant rate (vehicles/hour) at time `t`.
fn rate_at(schedule: &[RatePoint], t: f64) -> f64 {
    let mut rate = 0.0;
    for p in schedule {
        if p.t <= t + 1e-12 {
            rate = p.rate;
        } else {
            break;
        }
    }
    rate
}

/// Exact cumulative expected arrivals of a piecewise-constant schedule.
fn cumulative_arrivals(schedule: &[RatePoint], t: f64) -> f64 {
    let mut total = 0.0;
    for (i, p) in schedule.iter().enumerate() {
        if p.t >= t {
            break;
        }
        let end = schedule.get(i + 1).map_or(t, |n| n.t.min(t));
        total += p.rate * (end - p.t).max(0.0) / 3600.0;
    }
    total
}

#[derive(Debug, Default, Clone)]
pub struct ArrivalState {
    emitted: u64,
}

/// Number of arrivals on a road during `[t, t + dt)`.
///
/// Poisson mode draws from the instantaneous scheduled rate; deterministic
/// mode emits at the exact fixed headway 3600/rate by tracking the analytic
/// cumulative count.
pub fn generate_arrivals(
    schedule: &[RatePoint],
    deterministic: bool,
    state: &mut ArrivalState,
    rng: &mut ChaCha12Rng,
    t: f64,
    dt: f64,
) -> usize {
    if deterministic {
        let expected = (cumulative_arrivals(schedule, t + dt) + 1e-9).floor() as u64;
        let fresh = expected.saturating_sub(state.emitted);
        state.emitted = expected;
        fresh as usize
    } else {
        let lambda = rate_at(schedule, t) * dt / 3600.0;
        if lambda <= 0.0 {
            return 0;
        }
        let poisson = Poisson::new(lambda).expect("positive rate");
        poisson.sample(rng) as usize
    }
}

struct Pending {
    id: CavId,
    speed: f64,
}

struct Road {
    zone_idx: usize,
    lane: Lane,
    schedule: Vec<RatePoint>,
    rng: ChaCha12Rng,
    state: ArrivalState,
    queue: VecDeque<Pending>,
}

/// Terminal speed a newly admitted vehicle plans toward under `policy`.
fn admission_vm(policy: &FlowPolicy, zone: &ControlZone, v: f64) -> f64 {
    match policy.kind {
        PolicyKind::None => optimal_terminal_velocity(
            v,
            zone.params.length,
            zone.params.weights.beta,
            policy.vm_min,
            policy.vm_max,
        ),
        _ => zone.vm_command,
    }
}

/// Run a scenario to completion.
pub fn run(config: &ScenarioConfig) -> Result<RunOutput, ConfigError> {
    config.validate()?;
    let dt = config.dt;
    let steps = (config.duration / dt).round() as u64;

    let zone_index = |id: u32| config.zones.iter().position(|z| z.id == id).unwrap();
    let mut zones: Vec<ControlZone> = Vec::with_capacity(config.zones.len());
    let mut policies: Vec<FlowPolicy> = Vec::with_capacity(config.zones.len());
    let mut avg_optimal: Vec<Option<f64>> = Vec::with_capacity(config.zones.len());
    for zc in &config.zones {
        let params = zc.params()?;
        let policy = zc.policy();
        let vb_avg = match policy.v_b {
            BaselineSpeed::AvgOptimal => Some(compute_vb_avg_optimal(
                &config.entry_speed.quantile_grid(33),
                params.length,
                params.weights.beta,
                policy.vm_min,
                policy.vm_max,
            )),
            _ => None,
        };
        let initial_vm = on_event(&policy, policy.vm_max, None, vb_avg);
        zones.push(ControlZone::new(
            zc.id,
            params,
            initial_vm,
            zc.downstream,
        ));
        policies.push(policy);
        avg_optimal.push(vb_avg);
    }

    let mut roads: Vec<Road> = Vec::new();
    for (zi, zc) in config.zones.iter().enumerate() {
        for inflow in &zc.inflows {
            let road_idx = roads.len() as u64;
            roads.push(Road {
                zone_idx: zi,
                lane: inflow.lane,
                schedule: inflow.schedule.clone(),
                rng: ChaCha12Rng::seed_from_u64(
                    config.seed.wrapping_add(0x9E3779B97F4A7C15u64.wrapping_mul(road_idx + 1)),
                ),
                state: ArrivalState::default(),
                queue: VecDeque::new(),
            });
        }
    }

    let mut next_id: u64 = 0;
    let mut events: Vec<SimEvent> = Vec::new();
    let mut trace: Vec<TraceRow> = Vec::new();
    let mut per_cav_zone: Vec<CavZoneMetrics> = Vec::new();
    let mut entered: std::collections::BTreeMap<u64, f64> = std::collections::BTreeMap::new();
    let mut arrivals_generated = 0usize;
    let mut admitted_external = 0usize;
    let mut network_exits = 0usize;

    for step in 0..steps {
        let t = step as f64 * dt;
        let mut step_events = 0usize;

        // (1) Draw fresh arrivals into the per-road queues.
        for road in &mut roads {
            let count = generate_arrivals(
                &road.schedule,
                config.deterministic_arrivals,
                &mut road.state,
                &mut road.rng,
                t,
                dt,
            );
            for _ in 0..count {
                let speed = config.entry_speed.sample(&mut road.rng);
                let id = CavId(next_id);
                next_id += 1;
                arrivals_generated += 1;
                road.queue.push_back(Pending { id, speed });
            }
        }

        // (2) Admit queued arrivals whose rear-end barrier at the origin is
        // nonnegative; others stay held and retry next step. An arrival joins
        // the stream at no more than the prevailing speed of the zone head.
        for road in &mut roads {
            while let Some(front) = road.queue.front() {
                let zone = &zones[road.zone_idx];
                let speed = match zone.prevailing_entry_speed() {
                    Some(prevailing) => front.speed.min(prevailing),
                    None => front.speed,
                };
                let safe = zone.entry_barrier(road.lane, speed).map_or(true, |b| b >= 0.0);
                if !safe {
                    break;
                }
                let pending = road.queue.pop_front().unwrap();
                let vm = admission_vm(&policies[road.zone_idx], zone, speed);
                let zone = &mut zones[road.zone_idx];
                zone.admit(pending.id, road.lane, speed, t, vm);
                entered.insert(pending.id.0, t);
                admitted_external += 1;
                step_events += 1;
                events.push(SimEvent::Admitted {
                    t,
                    cav: pending.id.0,
                    zone: zone.id,
                    lane: road.lane,
                    speed,
                    from_upstream: false,
                });
            }
        }

        // (3) Refresh ghost mirrors from the frozen pre-step states, then
        // step every zone.
        for zi in 0..zones.len() {
            let ghost_state = zones[zi].ghost.as_ref().and_then(|g| {
                zones[zi].downstream.map(|d| (g.id, zone_index(d)))
            });
            let mirrored = ghost_state.and_then(|(gid, di)| {
                zones[di].cavs.iter().find(|c| c.id == gid).map(|c| (c.x, c.v, c.u_last))
            });
            zones[zi].refresh_ghost(mirrored, dt);
        }
        let mut all_exits: Vec<(usize, crate::control_zone::ZoneExit)> = Vec::new();
        for (zi, zone) in zones.iter_mut().enumerate() {
            for exit in zone.step(t, dt, &mut trace) {
                all_exits.push((zi, exit));
            }
        }

        // (4) Finalize metrics and hand exiting vehicles downstream.
        for (zi, exit) in all_exits {
            per_cav_zone.push(exit.metrics);
            let downstream = zones[zi].downstream;
            events.push(SimEvent::Exited {
                t: exit.t_cross,
                cav: exit.cav.0,
                zone: zones[zi].id,
                v_cross: exit.v_cross,
                im1: exit.im1.map(|c| c.0),
                im1_is_ip: exit.im1_is_ip,
                to_zone: downstream,
            });
            step_events += 1;
            match downstream {
                Some(d) => {
                    let di = zone_index(d);
                    let t_entry = t + dt;
                    let vm = admission_vm(&policies[di], &zones[di], exit.v_cross);
                    zones[di].admit(exit.cav, Lane::Main, exit.v_cross, t_entry, vm);
                    events.push(SimEvent::Admitted {
                        t: t_entry,
                        cav: exit.cav.0,
                        zone: d,
                        lane: Lane::Main,
                        speed: exit.v_cross,
                        from_upstream: true,
                    });
                }
                None => network_exits += 1,
            }
        }

        // (5) Event-driven flow control: recompute commands only when some
        // arrival/departure happened anywhere this step.
        if step_events > 0 {
            let t_eff = t + dt;
            for zi in 0..zones.len() {
                if policies[zi].kind == PolicyKind::None {
                    continue;
                }
                let view = zones[zi].downstream.map(|d| {
                    let dz = &zones[zone_index(d)];
                    let l = policies[zi].l;
                    let critical: Vec<f64> =
                        dz.cavs.iter().filter(|c| c.x <= l).map(|c| c.v).collect();
                    NeighborView {
                        occupancy: dz.occupancy(),
                        critical_occupancy: count_critical(
                            &dz.cavs.iter().map(|c| c.x).collect::<Vec<_>>(),
                            l,
                        ),
                        critical_mean_speed: if critical.is_empty() {
                            None
                        } else {
                            Some(critical.iter().sum::<f64>() / critical.len() as f64)
                        },
                        vm_command: dz.vm_command,
                    }
                });
                let old = zones[zi].vm_command;
                let new = on_event(&policies[zi], old, view.as_ref(), avg_optimal[zi]);
                if (new - old).abs() > 1e-9 {
                    zones[zi].broadcast_vm(new, t_eff);
                    events.push(SimEvent::VmChanged { t: t_eff, zone: zones[zi].id, old, new });
                }
            }
        }

        // Vehicle conservation across the whole network.
        debug_assert_eq!(
            arrivals_generated,
            network_exits
                + zones.iter().map(|z| z.occupancy()).sum::<usize>()
                + roads.iter().map(|r| r.queue.len()).sum::<usize>(),
            "conservation violated at t = {t}"
        );
    }

    let terminal_zones: Vec<u32> =
        config.zones.iter().filter(|z| z.downstream.is_none()).map(|z| z.id).collect();
    let zone_ids: Vec<u32> = config.zones.iter().map(|z| z.id).collect();
    let routes = Routes { entered, terminal_zones };
    let in_system_at_end = zones.iter().map(|z| z.occupancy()).sum();
    let held_at_end = roads.iter().map(|r| r.queue.len()).sum();
    Ok(RunOutput {
        metrics: MetricsRecord::build(per_cav_zone, &zone_ids, &routes),
        events,
        trace,
        arrivals_generated,
        admitted_external,
        network_exits,
        in_system_at_end,
        held_at_end,
    })
}
