//! Per-zone coordination: FIFO queue, predecessor resolution, feasibility
//! enforcement on entry, per-step control dispatch, and exit handling.
//!
//! Vehicles are processed in arrival (FIFO) order. A newly admitted vehicle
//! starts in feasibility-enforcement (FE) mode, braking at the control floor
//! until its barrier values are nonnegative and its tracking QP is feasible —
//! or until it has used up the enforcement distance, in which case it switches
//! anyway and the failure is recorded. The switch to tracking (OCBF) mode
//! happens at most once per zone.
//!
//! The most recent exiter stays visible to the zone as the front vehicle's
//! predecessor until the next exit: same-lane followers keep their rear-end
//! constraint across the boundary, other-lane followers keep the merge
//! constraint that enforces the spacing rule at the merging point.

use crate::safety_filter::{
    build_clf, build_feasibility_guards, build_merge_cbf, build_rear_end_cbf, build_speed_cbfs,
    merge_barrier, rear_end_barrier, reference_state, solve_qp, QpInstance,
};
use crate::trajectory::{
    plan_unconstrained, replan_on_vm_change, CostWeights, ReplanMethod, TrajectoryPlan,
};

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize,
)]
pub struct CavId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lane {
    Main,
    Merge,
}

impl std::fmt::Display for Lane {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Lane::Main => write!(f, "main"),
            Lane::Merge => write!(f, "merge"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Mode {
    Fe,
    Ocbf,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::Fe => write!(f, "FE"),
            Mode::Ocbf => write!(f, "OCBF"),
        }
    }
}

/// Geometry, limits, gains, and weights of one zone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZoneParams {
    pub length: f64,
    /// Reaction time of the spacing rule (s).
    pub phi: f64,
    /// Standstill spacing (m).
    pub delta: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub u_min: f64,
    pub u_max: f64,
    pub weights: CostWeights,
    /// Lyapunov convergence rate of the tracking constraint.
    pub eps: f64,
    pub k_rear: f64,
    pub k_merge: f64,
    pub k_speed: f64,
    /// Distance budget of feasibility-enforcement mode.
    pub fe_limit: f64,
    /// Terminal-speed change below which replans take the perturbation path.
    pub perturb_threshold: f64,
}

impl ZoneParams {
    /// Per-length reaction coefficient of the merge constraint, scaled so the
    /// constraint coincides with the rear-end spacing rule at the merge point.
    pub fn phi2(&self) -> f64 {
        self.phi / self.length
    }
}

#[derive(Debug, Clone)]
pub struct CavState {
    pub id: CavId,
    pub lane: Lane,
    pub x: f64,
    pub v: f64,
    pub u_last: f64,
    pub mode: Mode,
    pub plan: TrajectoryPlan,
    pub t_entry: f64,
    pub fe_time: f64,
    pub infeasible_steps: u32,
    pub initial_feasibility_failed: bool,
    /// Accumulated ∫ ½u².
    pub energy: f64,
    pub replans_perturbed: u32,
    pub replans_exact: u32,
}

/// Most recent exiter, kept as the front vehicle's partner. While it drives
/// in a downstream zone its state is mirrored; past the network edge it
/// coasts at constant speed.
#[derive(Debug, Clone, Copy)]
pub struct GhostCav {
    pub id: CavId,
    pub lane: Lane,
    /// Position in this zone's frame (>= length).
    pub x: f64,
    pub v: f64,
    pub u_last: f64,
    /// Set at creation; the first ballistic refresh must not advance the
    /// state because the creation position already refers to the step end.
    pub fresh: bool,
}

/// One vehicle sample per step; the state is the step-start state and `u` the
/// control applied over the following interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub cav: CavId,
    pub zone: u32,
    pub lane: Lane,
    pub fifo_index: usize,
    pub x: f64,
    pub v: f64,
    pub u: f64,
    pub e_relax: f64,
    pub mode: Mode,
    pub qp_feasible: bool,
}

/// Finalized per-vehicle record for one zone traversal.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct CavZoneMetrics {
    pub cav: u64,
    pub zone: u32,
    pub lane: Lane,
    pub t_entry: f64,
    pub t_exit: f64,
    pub travel_time: f64,
    pub energy: f64,
    /// beta·t + energy.
    pub obj_weighted: f64,
    /// alpha·t + (1 − alpha)-normalized effort.
    pub obj_normalized: f64,
    pub fe_time: f64,
    pub initial_feasibility_failed: bool,
    pub infeasible_steps: u32,
}

/// Crossing record emitted by `step`.
#[derive(Debug, Clone)]
pub struct ZoneExit {
    pub cav: CavId,
    pub t_cross: f64,
    pub v_cross: f64,
    /// FIFO predecessor at the crossing (possibly the previous exiter).
    pub im1: Option<CavId>,
    /// Whether that predecessor was also the physical same-lane predecessor.
    pub im1_is_ip: bool,
    pub metrics: CavZoneMetrics,
    pub state: CavState,
}

#[derive(Debug, Clone)]
pub struct ControlZone {
    pub id: u32,
    pub params: ZoneParams,
    pub vm_command: f64,
    /// In-zone vehicles in FIFO order.
    pub cavs: Vec<CavState>,
    pub ghost: Option<GhostCav>,
    pub downstream: Option<u32>,
}

#[derive(Debug, Clone, Copy)]
struct Snap {
    id: CavId,
    lane: Lane,
    x: f64,
    v: f64,
    u_last: f64,
}

/// (rear partner, merge partner) for vehicle `i` from the frozen snapshot.
/// The rear partner is the nearest same-lane vehicle ahead; the merge partner
/// is the FIFO predecessor when it differs from the rear partner. The front
/// vehicle pairs with the ghost: rear-end if same lane, merge otherwise.
fn partners(snaps: &[Snap], ghost: Option<&Snap>, i: usize) -> (Option<Snap>, Option<Snap>) {
    let lane = snaps[i].lane;
    let mut rear: Option<Snap> = None;
    for j in (0..i).rev() {
        if snaps[j].lane == lane {
            rear = Some(snaps[j]);
            break;
        }
    }
    if i == 0 {
        return match ghost {
            Some(g) if g.lane == lane => (Some(*g), None),
            Some(g) => (None, Some(*g)),
            None => (None, None),
        };
    }
    let im1 = snaps[i - 1];
    let merge = if rear.map_or(false, |r| r.id == im1.id) { None } else { Some(im1) };
    (rear, merge)
}

fn build_qp(
    params: &ZoneParams,
    plan: &TrajectoryPlan,
    me: &Snap,
    rear: Option<&Snap>,
    merge: Option<&Snap>,
    now: f64,
) -> QpInstance {
    let (_, v_ref, u_ref) = reference_state(plan, now, me.x);
    let mut constraints = Vec::with_capacity(7);
    if let Some(p) = rear {
        constraints.push(build_rear_end_cbf(
            me.x, me.v, p.x, p.v, params.k_rear, params.phi, params.delta,
        ));
    }
    if let Some(m) = merge {
        constraints.push(build_merge_cbf(
            me.x,
            me.v,
            m.x,
            m.v,
            params.k_merge,
            params.phi2(),
            params.delta,
        ));
    }
    constraints.extend(build_speed_cbfs(me.v, params.k_speed, params.v_min, params.v_max));
    constraints.push(build_clf(me.v, v_ref, params.eps));
    constraints.extend(build_feasibility_guards(
        me.x,
        me.v,
        rear.map(|p| (p.v, p.u_last)),
        merge.map(|m| (m.v, m.u_last)),
        params.k_rear,
        params.k_merge,
        params.phi,
        params.phi2(),
        params.u_min,
    ));
    QpInstance {
        u_ref,
        beta_e: params.weights.beta,
        constraints,
        u_bounds: (params.u_min, params.u_max),
    }
}

/// Exact double-integrator update over one interval of constant control,
/// holding the vehicle at rest once the speed reaches zero.
/// Returns (dx, v_end, effort).
fn advance(v0: f64, u: f64, dt: f64) -> (f64, f64, f64) {
    if u < 0.0 && v0 + u * dt < 0.0 {
        let tau = -v0 / u;
        (v0 * tau + 0.5 * u * tau * tau, 0.0, 0.5 * u * u * tau)
    } else {
        (v0 * dt + 0.5 * u * dt * dt, v0 + u * dt, 0.5 * u * u * dt)
    }
}

impl ControlZone {
    pub fn new(id: u32, params: ZoneParams, vm_command: f64, downstream: Option<u32>) -> Self {
        Self { id, params, vm_command, cavs: Vec::new(), ghost: None, downstream }
    }

    /// Number of in-zone vehicles.
    pub fn occupancy(&self) -> usize {
        self.cavs.len()
    }

    /// Append an arriving vehicle to the FIFO with a fresh reference plan
    /// toward `vm`. Entry is at the origin in FE mode. If the terminal-time
    /// solve fails the vehicle falls back to a constant-speed reference.
    pub fn admit(&mut self, id: CavId, lane: Lane, v: f64, t: f64, vm: f64) -> &CavState {
        let p = &self.params;
        let plan = plan_unconstrained(v, vm, p.length, p.weights.beta, t).unwrap_or_else(|e| {
            log::warn!("zone {}: fallback constant-speed reference for cav {}: {e}", self.id, id.0);
            let v_safe = v.max(0.1);
            TrajectoryPlan {
                a: 0.0,
                b: 0.0,
                c: v_safe,
                d: 0.0,
                t0: t,
                tm: p.length / v_safe,
                v0: v_safe,
                vm: v_safe,
                length: p.length,
                beta: p.weights.beta,
            }
        });
        self.cavs.push(CavState {
            id,
            lane,
            x: 0.0,
            v,
            u_last: 0.0,
            mode: Mode::Fe,
            plan,
            t_entry: t,
            fe_time: 0.0,
            infeasible_steps: 0,
            initial_feasibility_failed: false,
            energy: 0.0,
            replans_perturbed: 0,
            replans_exact: 0,
        });
        self.cavs.last().unwrap()
    }

    /// In-zone predecessors of the vehicle at FIFO position `idx`:
    /// (physical same-lane predecessor, FIFO predecessor). The merge partner
    /// is suppressed (None) when it coincides with the physical predecessor.
    pub fn predecessors(&self, idx: usize) -> (Option<&CavState>, Option<&CavState>) {
        let lane = self.cavs[idx].lane;
        let ip = self.cavs[..idx].iter().rev().find(|c| c.lane == lane);
        let im1 = if idx > 0 { Some(&self.cavs[idx - 1]) } else { None };
        let im1 = match (ip, im1) {
            (Some(p), Some(m)) if p.id == m.id => None,
            (_, m) => m,
        };
        (ip, im1)
    }

    /// Rear-end barrier a new arrival at the origin would see against the
    /// nearest in-zone vehicle on `lane`, or None on an empty lane.
    pub fn entry_barrier(&self, lane: Lane, v: f64) -> Option<f64> {
        self.cavs
            .iter()
            .filter(|c| c.lane == lane)
            .map(|c| c.x)
            .min_by(|a, b| a.partial_cmp(b).unwrap())
            .map(|x| rear_end_barrier(0.0, v, x, self.params.phi, self.params.delta))
    }

    /// Mean speed over the zone head (positions within the enforcement
    /// distance), if occupied. External arrivals join the stream at no more
    /// than this speed; vehicles handed off from upstream are exempt since
    /// their entry speed is committed by the upstream zone.
    pub fn prevailing_entry_speed(&self) -> Option<f64> {
        let head: Vec<f64> =
            self.cavs.iter().filter(|c| c.x <= self.params.fe_limit).map(|c| c.v).collect();
        if head.is_empty() {
            None
        } else {
            Some(head.iter().sum::<f64>() / head.len() as f64)
        }
    }

    /// Mirror the ghost against its actual downstream state, or advance it
    /// ballistically past the network edge.
    pub fn refresh_ghost(&mut self, downstream_state: Option<(f64, f64, f64)>, dt: f64) {
        if let Some(g) = &mut self.ghost {
            match downstream_state {
                Some((x_d, v, u_last)) => {
                    g.x = self.params.length + x_d;
                    g.v = v;
                    g.u_last = u_last;
                    g.fresh = false;
                }
                None if g.fresh => g.fresh = false,
                None => {
                    g.x += g.v * dt;
                    g.u_last = 0.0;
                }
            }
        }
    }

    /// Set a new terminal-speed command and regenerate every in-zone
    /// reference over its remaining length.
    pub fn broadcast_vm(&mut self, vm_new: f64, now: f64) {
        self.vm_command = vm_new;
        let p = self.params;
        for cav in &mut self.cavs {
            if cav.x >= p.length {
                continue;
            }
            let remaining = p.length - cav.x;
            match replan_on_vm_change(
                cav.v.max(0.0),
                remaining,
                now,
                &cav.plan,
                vm_new,
                p.perturb_threshold,
            ) {
                Ok((plan, ReplanMethod::Perturbed)) => {
                    cav.plan = plan;
                    cav.replans_perturbed += 1;
                }
                Ok((plan, ReplanMethod::Exact)) => {
                    cav.plan = plan;
                    cav.replans_exact += 1;
                }
                Err(e) => {
                    log::warn!("zone {}: replan failed for cav {}: {e}", self.id, cav.id.0);
                }
            }
        }
    }

    /// Advance every vehicle one step: FE vehicles brake until their barriers
    /// and QP clear, OCBF vehicles track the reference through the QP, and all
    /// states integrate exactly under the piecewise-constant control.
    /// Controls are computed from a snapshot frozen at the step start.
    pub fn step(&mut self, now: f64, dt: f64, trace: &mut Vec<TraceRow>) -> Vec<ZoneExit> {
        let p = self.params;
        let snaps: Vec<Snap> = self
            .cavs
            .iter()
            .map(|c| Snap { id: c.id, lane: c.lane, x: c.x, v: c.v, u_last: c.u_last })
            .collect();
        let ghost_snap = self
            .ghost
            .as_ref()
            .map(|g| Snap { id: g.id, lane: g.lane, x: g.x, v: g.v, u_last: g.u_last });
        let n = snaps.len();
        let fifo_base = if self.ghost.is_some() { 1 } else { 0 };

        let mut controls = vec![0.0f64; n];
        let mut pair_info: Vec<(Option<CavId>, bool)> = vec![(None, false); n];

        for i in 0..n {
            let me = snaps[i];
            let (rear, merge) = partners(&snaps, ghost_snap.as_ref(), i);
            pair_info[i] = match (&merge, &rear) {
                (Some(m), _) => (Some(m.id), false),
                (None, Some(r)) => (Some(r.id), true),
                (None, None) => (None, false),
            };
            let qp = build_qp(&p, &self.cavs[i].plan, &me, rear.as_ref(), merge.as_ref(), now);
            let sol = solve_qp(&qp);

            let cav = &mut self.cavs[i];
            let (u, e_relax, qp_feasible) = match cav.mode {
                Mode::Fe => {
                    let mut barriers_ok = me.v <= p.v_max + 1e-9 && me.v >= p.v_min - 1e-9;
                    if let Some(r) = &rear {
                        barriers_ok &= rear_end_barrier(me.x, me.v, r.x, p.phi, p.delta) >= 0.0;
                    }
                    if let Some(m) = &merge {
                        barriers_ok &= merge_barrier(me.x, me.v, m.x, p.phi2(), p.delta) >= 0.0;
                    }
                    if barriers_ok && sol.feasible {
                        cav.mode = Mode::Ocbf;
                        (sol.u, sol.e, true)
                    } else if me.x > p.fe_limit {
                        cav.mode = Mode::Ocbf;
                        cav.initial_feasibility_failed = true;
                        if sol.feasible {
                            (sol.u, sol.e, true)
                        } else {
                            cav.infeasible_steps += 1;
                            (p.u_min.max(-p.k_speed * (me.v - p.v_min)), 0.0, false)
                        }
                    } else {
                        cav.fe_time += dt;
                        // Maximum braking, clipped so the speed floor holds.
                        let brake = if me.v + p.u_min * dt < p.v_min {
                            ((p.v_min - me.v) / dt).clamp(p.u_min, p.u_max)
                        } else {
                            p.u_min
                        };
                        (brake, 0.0, sol.feasible)
                    }
                }
                Mode::Ocbf => {
                    if sol.feasible {
                        (sol.u, sol.e, true)
                    } else {
                        cav.infeasible_steps += 1;
                        (p.u_min.max(-p.k_speed * (me.v - p.v_min)), 0.0, false)
                    }
                }
            };
            controls[i] = u;
            trace.push(TraceRow {
                t: now,
                cav: me.id,
                zone: self.id,
                lane: me.lane,
                fifo_index: fifo_base + i,
                x: me.x,
                v: me.v,
                u,
                e_relax,
                mode: self.cavs[i].mode,
                qp_feasible,
            });
        }

        // Integrate on the collected controls, then pull out crossings.
        let mut exits: Vec<ZoneExit> = Vec::new();
        for i in 0..n {
            let u = controls[i];
            let cav = &mut self.cavs[i];
            let (x0, v0) = (cav.x, cav.v);
            let (dx, v_end, effort) = advance(v0, u, dt);
            cav.x = x0 + dx;
            cav.v = v_end;
            cav.energy += effort;
            cav.u_last = u;
            if cav.x >= p.length {
                // Interpolate the crossing instant within the step.
                let d = p.length - x0;
                let disc = (v0 * v0 + 2.0 * u * d).max(0.0);
                let tau = if v0 + disc.sqrt() > 1e-12 { 2.0 * d / (v0 + disc.sqrt()) } else { dt };
                let tau = tau.clamp(0.0, dt);
                let v_cross = (v0 + u * tau).max(0.0);
                let t_cross = now + tau;
                cav.energy += 0.5 * u * u * tau - effort;
                let travel_time = t_cross - cav.t_entry;
                let w = p.weights;
                let metrics = CavZoneMetrics {
                    cav: cav.id.0,
                    zone: self.id,
                    lane: cav.lane,
                    t_entry: cav.t_entry,
                    t_exit: t_cross,
                    travel_time,
                    energy: cav.energy,
                    obj_weighted: w.objective_weighted(travel_time, cav.energy),
                    obj_normalized: w.objective_normalized(travel_time, cav.energy),
                    fe_time: cav.fe_time,
                    initial_feasibility_failed: cav.initial_feasibility_failed,
                    infeasible_steps: cav.infeasible_steps,
                };
                let mut state = cav.clone();
                state.v = v_cross;
                exits.push(ZoneExit {
                    cav: cav.id,
                    t_cross,
                    v_cross,
                    im1: pair_info[i].0,
                    im1_is_ip: pair_info[i].1,
                    metrics,
                    state,
                });
            }
        }
        for exit in &exits {
            self.ghost = Some(GhostCav {
                id: exit.cav,
                lane: exit.state.lane,
                x: p.length + exit.v_cross * ((now + dt) - exit.t_cross),
                v: exit.v_cross,
                u_last: exit.state.u_last,
                fresh: true,
            });
        }
        let exited: Vec<CavId> = exits.iter().map(|e| e.cav).collect();
        self.cavs.retain(|c| !exited.contains(&c.id));
        exits
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_params() -> ZoneParams {
        ZoneParams {
            length: 200.0,
            phi: 1.8,
            delta: 0.0,
            v_min: 0.0,
            v_max: 30.0,
            u_min: -4.0,
            u_max: 4.0,
            weights: CostWeights::from_alpha(0.0625, -4.0, 4.0).unwrap(),
            eps: 10.0,
            k_rear: 1.0,
            k_merge: 1.0,
            k_speed: 1.0,
            fe_limit: 50.0,
            perturb_threshold: 1.0,
        }
    }

    fn zone(params: ZoneParams) -> ControlZone {
        ControlZone::new(1, params, 18.5, None)
    }

    #[test]
    fn admit_empty_zone_has_no_predecessors() {
        let mut z = zone(test_params());
        z.admit(CavId(1), Lane::Main, 18.0, 0.0, 18.5);
        let (ip, im1) = z.predecessors(0);
        assert!(ip.is_none() && im1.is_none());
        assert_eq!(z.cavs[0].mode, Mode::Fe);
        assert_eq!(z.cavs[0].x, 0.0);
    }

    #[test]
    fn second_same_lane_cav_sees_first_as_both() {
        let mut z = zone(test_params());
        z.admit(CavId(1), Lane::Main, 18.0, 0.0, 18.5);
        z.cavs[0].x = 60.0;
        z.admit(CavId(2), Lane::Main, 18.0, 2.0, 18.5);
        let (ip, im1) = z.predecessors(1);
        assert_eq!(ip.unwrap().id, CavId(1));
        assert!(im1.is_none(), "merge partner suppressed when FIFO pred is physical pred");
    }

    #[test]
    fn different_lane_pair_activates_merge_partner() {
        let mut z = zone(test_params());
        z.admit(CavId(1), Lane::Merge, 18.0, 0.0, 18.5);
        z.admit(CavId(2), Lane::Main, 18.0, 1.0, 18.5);
        let (ip, im1) = z.predecessors(1);
        assert!(ip.is_none());
        assert_eq!(im1.unwrap().id, CavId(1));
    }

    #[test]
    fn three_cav_fifo_lane_pattern() {
        let mut z = zone(test_params());
        z.admit(CavId(1), Lane::Main, 18.0, 0.0, 18.5);
        z.cavs[0].x = 80.0;
        z.admit(CavId(2), Lane::Merge, 17.0, 1.0, 18.5);
        z.cavs[1].x = 40.0;
        z.admit(CavId(3), Lane::Main, 18.0, 2.0, 18.5);
        let (ip, im1) = z.predecessors(2);
        assert_eq!(ip.unwrap().id, CavId(1));
        assert_eq!(im1.unwrap().id, CavId(2));
    }

    #[test]
    fn entry_barrier_arithmetic() {
        let mut z = zone(test_params());
        z.admit(CavId(1), Lane::Main, 20.0, 0.0, 18.5);
        z.cavs[0].x = 10.0;
        assert!((z.entry_barrier(Lane::Main, 20.0).unwrap() - (10.0 - 36.0)).abs() < 1e-12);
        z.cavs[0].x = 50.0;
        assert!((z.entry_barrier(Lane::Main, 20.0).unwrap() - 14.0).abs() < 1e-12);
        assert!(z.entry_barrier(Lane::Merge, 20.0).is_none());
    }

    #[test]
    fn clean_entry_exits_fe_immediately() {
        let mut z = zone(test_params());
        z.admit(CavId(1), Lane::Main, 18.0, 0.0, 18.5);
        let mut trace = Vec::new();
        z.step(0.0, 0.1, &mut trace);
        assert_eq!(z.cavs[0].mode, Mode::Ocbf);
        assert_eq!(z.cavs[0].fe_time, 0.0);
        assert!(!z.cavs[0].initial_feasibility_failed);
    }

    #[test]
    fn fe_brakes_until_barrier_recovers() {
        // Follower 5 m behind a 20 m/s leader, entering at 25 m/s. Maximum
        // braking gives b1(t) = 2t^2 + 2.2t - 40, which clears at
        // t* = (-2.2 + sqrt(2.2^2 + 320)) / 4 ≈ 3.956 s; the enforcement
        // budget must cover x(t*) ≈ 67.6 m.
        let mut params = test_params();
        params.length = 400.0;
        params.fe_limit = 100.0;
        let mut z = zone(params);
        z.admit(CavId(1), Lane::Main, 20.0, 0.0, 20.0);
        z.cavs[0].x = 5.0;
        z.cavs[0].mode = Mode::Ocbf;
        z.admit(CavId(2), Lane::Main, 25.0, 0.0, 20.0);
        let t_star = (-2.2 + (2.2f64 * 2.2 + 320.0).sqrt()) / 4.0;
        let dt = 0.1;
        let mut trace = Vec::new();
        for k in 0..80 {
            z.step(k as f64 * dt, dt, &mut trace);
        }
        let follower = &z.cavs[1];
        assert_eq!(follower.mode, Mode::Ocbf);
        assert!(!follower.initial_feasibility_failed);
        assert!(
            (follower.fe_time - t_star).abs() <= 2.0 * dt,
            "fe_time {} vs oracle {t_star}",
            follower.fe_time
        );
    }

    #[test]
    fn fe_budget_exhaustion_flags_failure() {
        // Same pair in a 200 m zone: the 50 m budget runs out near
        // x = 50 (t = 2.5 s) with the barrier still negative.
        let mut z = zone(test_params());
        z.admit(CavId(1), Lane::Main, 20.0, 0.0, 20.0);
        z.cavs[0].x = 5.0;
        z.cavs[0].mode = Mode::Ocbf;
        z.admit(CavId(2), Lane::Main, 25.0, 0.0, 20.0);
        let dt = 0.1;
        let mut trace = Vec::new();
        for k in 0..40 {
            z.step(k as f64 * dt, dt, &mut trace);
        }
        let follower = &z.cavs[1];
        assert_eq!(follower.mode, Mode::Ocbf);
        assert!(follower.initial_feasibility_failed);
        assert!(follower.fe_time >= 2.4 && follower.fe_time <= 3.0, "fe_time {}", follower.fe_time);
    }

    #[test]
    fn unconstrained_cav_tracks_reference() {
        let mut z = zone(test_params());
        z.admit(CavId(1), Lane::Main, 16.0, 0.0, 18.5);
        let plan = z.cavs[0].plan;
        let dt = 0.1;
        let mut trace: Vec<TraceRow> = Vec::new();
        let mut t = 0.0;
        let mut worst = 0.0f64;
        while !z.cavs.is_empty() {
            for row in trace.drain(..) {
                let (x_star, _, u_star) = plan.eval(row.t);
                worst = worst.max((row.x - x_star).abs());
                assert!(
                    (row.u - u_star).abs() < 0.05,
                    "u {} vs reference {} at t={}",
                    row.u,
                    u_star,
                    row.t
                );
            }
            z.step(t, dt, &mut trace);
            t += dt;
            assert!(t < 30.0, "vehicle never exited");
        }
        assert!(worst <= 0.1, "worst position deviation {worst}");
    }

    #[test]
    fn position_error_shrinks_with_dt() {
        // Constrained follower scenario run at three refinements; the
        // gap between successive refinements contracts.
        let run = |dt: f64| -> Vec<f64> {
            let mut params = test_params();
            params.length = 400.0;
            params.fe_limit = 100.0;
            let mut z = zone(params);
            z.admit(CavId(1), Lane::Main, 16.0, 0.0, 16.0);
            z.cavs[0].x = 30.0;
            z.cavs[0].mode = Mode::Ocbf;
            z.admit(CavId(2), Lane::Main, 22.0, 0.0, 18.0);
            let mut out = Vec::new();
            let mut trace = Vec::new();
            let per_second = (1.0 / dt).round() as usize;
            for k in 0..per_second * 15 {
                z.step(k as f64 * dt, dt, &mut trace);
                if z.cavs.len() > 1 && (k + 1) % per_second == 0 {
                    out.push(z.cavs[1].x);
                }
            }
            out
        };
        let coarse = run(0.1);
        let fine = run(0.05);
        let finer = run(0.025);
        let len = coarse.len().min(fine.len()).min(finer.len());
        let gap = |a: &[f64], b: &[f64]| {
            a.iter().zip(b).take(len).map(|(p, q)| (p - q).abs()).fold(0.0f64, f64::max)
        };
        let d1 = gap(&coarse, &fine);
        let d2 = gap(&fine, &finer);
        assert!(d1 < 1.0, "dt=0.1 vs 0.05 position gap {d1}");
        assert!(d2 < 0.75 * d1 + 1e-3, "no contraction: {d1} -> {d2}");
    }

    #[test]
    fn constant_speed_exit_metrics() {
        let mut params = test_params();
        params.weights = CostWeights::from_alpha(0.0, -4.0, 4.0).unwrap();
        let mut z = zone(params);
        z.admit(CavId(1), Lane::Main, 20.0, 0.0, 20.0);
        let dt = 0.1;
        let mut trace = Vec::new();
        let mut exits = Vec::new();
        let mut t = 0.0;
        while exits.is_empty() {
            exits = z.step(t, dt, &mut trace);
            t += dt;
            assert!(t < 15.0);
        }
        let m = &exits[0].metrics;
        assert!((m.travel_time - 10.0).abs() < 1e-6, "travel {}", m.travel_time);
        assert!(m.energy < 1e-9, "energy {}", m.energy);
        assert!((exits[0].v_cross - 20.0).abs() < 1e-6);
        assert!((m.obj_weighted - z.params.weights.beta * m.travel_time - m.energy).abs() < 1e-12);
        // Exiter becomes the ghost.
        assert_eq!(z.ghost.unwrap().id, CavId(1));
        assert_eq!(z.occupancy(), 0);
    }

    #[test]
    fn ghost_keeps_front_vehicle_constrained() {
        let mut z = zone(test_params());
        // Slow exiter just past the merge point, fast main-lane vehicle near it.
        z.ghost = Some(GhostCav {
            id: CavId(9),
            lane: Lane::Merge,
            x: 205.0,
            v: 12.0,
            u_last: 0.0,
            fresh: false,
        });
        z.admit(CavId(1), Lane::Main, 20.0, 0.0, 18.5);
        z.cavs[0].x = 190.0;
        z.cavs[0].mode = Mode::Ocbf;
        let mut trace = Vec::new();
        z.step(0.0, 0.1, &mut trace);
        // Merge constraint against the ghost forces braking.
        assert!(trace[0].u < -1.0, "u = {}", trace[0].u);
        assert_eq!(trace[0].fifo_index, 1);
    }

    #[test]
    fn ghost_refresh_ballistic_and_mirrored() {
        let mut z = zone(test_params());
        z.ghost = Some(GhostCav {
            id: CavId(9),
            lane: Lane::Main,
            x: 200.0,
            v: 15.0,
            u_last: -1.0,
            fresh: true,
        });
        // First refresh after creation keeps the creation state.
        z.refresh_ghost(None, 0.1);
        let g = z.ghost.unwrap();
        assert!((g.x - 200.0).abs() < 1e-12 && g.u_last == -1.0);
        z.refresh_ghost(None, 0.1);
        let g = z.ghost.unwrap();
        assert!((g.x - 201.5).abs() < 1e-12 && g.u_last == 0.0);
        z.refresh_ghost(Some((30.0, 17.0, 0.5)), 0.1);
        let g = z.ghost.unwrap();
        assert!((g.x - 230.0).abs() < 1e-12 && g.v == 17.0 && g.u_last == 0.5);
    }

    #[test]
    fn broadcast_replans_in_zone_vehicles() {
        let mut z = zone(test_params());
        z.admit(CavId(1), Lane::Main, 16.0, 0.0, 18.5);
        z.cavs[0].x = 60.0;
        z.cavs[0].v = 17.0;
        z.admit(CavId(2), Lane::Merge, 15.0, 1.0, 18.5);
        z.broadcast_vm(18.0, 2.0);
        assert_eq!(z.vm_command, 18.0);
        for cav in &z.cavs {
            assert_eq!(cav.plan.vm, 18.0);
            assert_eq!(cav.plan.t0, 2.0);
            assert_eq!(cav.replans_perturbed, 1);
            let (x0, v0, _) = cav.plan.eval(2.0);
            assert!(x0.abs() < 1e-9 && (v0 - cav.v).abs() < 1e-9);
            let (xf, vf, _) = cav.plan.eval(cav.plan.exit_time());
            assert!((xf - (200.0 - cav.x)).abs() < 1e-6 && (vf - 18.0).abs() < 1e-6);
        }
        // A large change takes the exact path.
        z.broadcast_vm(13.0, 3.0);
        assert_eq!(z.cavs[0].replans_exact, 1);
    }

    #[test]
    fn energy_accumulation_is_exact_per_step() {
        let mut z = zone(test_params());
        z.admit(CavId(1), Lane::Main, 12.0, 0.0, 18.5);
        let dt = 0.1;
        let mut trace = Vec::new();
        for k in 0..50 {
            z.step(k as f64 * dt, dt, &mut trace);
        }
        let direct: f64 = trace.iter().map(|r| 0.5 * r.u * r.u * dt).sum();
        assert!((z.cavs[0].energy - direct).abs() <= 1e-9, "{} vs {}", z.cavs[0].energy, direct);
    }
}
