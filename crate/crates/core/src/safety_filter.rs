//! Per-step safety filtering: barrier and Lyapunov constraints plus the
//! two-variable tracking QP.
//!
//! Every constraint is affine in the decision pair `(u, e)` — the control and
//! the tracking-relaxation variable — so the per-step problem
//!
//!   min  beta_e e² + ½ (u − u_ref)²
//!   s.t. affine constraints, u ∈ [u_min, u_max], e ≥ 0
//!
//! is solved exactly by enumerating candidate active sets: with two decision
//! variables the optimum has at most two linearly independent active
//! constraints, and the instance never carries more than a handful, so the
//! enumeration is exhaustive.

use crate::trajectory::TrajectoryPlan;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Geq,
    Leq,
}

/// Affine constraint `coef_u·u + coef_e·e {≥,≤} rhs`; `coef_e` is one of
/// {0, −1, +1}.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearConstraint {
    pub coef_u: f64,
    pub coef_e: f64,
    pub rhs: f64,
    pub sense: Sense,
}

impl LinearConstraint {
    pub fn satisfied(&self, u: f64, e: f64, tol: f64) -> bool {
        let lhs = self.coef_u * u + self.coef_e * e;
        match self.sense {
            Sense::Geq => lhs >= self.rhs - tol,
            Sense::Leq => lhs <= self.rhs + tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpInstance {
    pub u_ref: f64,
    /// Relaxation weight on e² (the same time/effort weight the reference
    /// trajectories are built with).
    pub beta_e: f64,
    pub constraints: Vec<LinearConstraint>,
    pub u_bounds: (f64, f64),
}

/// Indices in `active_set` refer to `constraints`; the three implicit
/// constraints get the sentinel indices `n` (u ≥ u_min), `n+1` (u ≤ u_max),
/// `n+2` (e ≥ 0) where `n = constraints.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub u: f64,
    pub e: f64,
    pub feasible: bool,
    pub active_set: Vec<usize>,
}

/// Rear-end barrier `b1 = (xp − xi) − phi·vi − delta`.
pub fn rear_end_barrier(xi: f64, vi: f64, xp: f64, phi: f64, delta: f64) -> f64 {
    (xp - xi) - phi * vi - delta
}

/// Merge barrier `b2 = (x_ahead − xi) − phi2·xi·vi − delta`; with
/// `phi2 = phi / L` it coincides with the rear-end barrier at `xi = L`.
pub fn merge_barrier(xi: f64, vi: f64, x_ahead: f64, phi2: f64, delta: f64) -> f64 {
    (x_ahead - xi) - phi2 * xi * vi - delta
}

/// Rear-end safety as a control constraint:
/// `vp − vi − phi·u + k1·b1 ≥ 0`.
pub fn build_rear_end_cbf(
    xi: f64,
    vi: f64,
    xp: f64,
    vp: f64,
    k1: f64,
    phi: f64,
    delta: f64,
) -> LinearConstraint {
    let b1 = rear_end_barrier(xi, vi, xp, phi, delta);
    LinearConstraint {
        coef_u: -phi,
        coef_e: 0.0,
        rhs: -(vp - vi + k1 * b1),
        sense: Sense::Geq,
    }
}

/// Merge safety as a control constraint:
/// `v_ahead − vi − phi2·vi² − phi2·xi·u + k2·b2 ≥ 0`.
///
/// At `xi = 0` the control coefficient vanishes and the constraint degrades to
/// a pure feasibility check on the current states.
pub fn build_merge_cbf(
    xi: f64,
    vi: f64,
    x_ahead: f64,
    v_ahead: f64,
    k2: f64,
    phi2: f64,
    delta: f64,
) -> LinearConstraint {
    let b2 = merge_barrier(xi, vi, x_ahead, phi2, delta);
    LinearConstraint {
        coef_u: -phi2 * xi,
        coef_e: 0.0,
        rhs: -(v_ahead - vi - phi2 * vi * vi + k2 * b2),
        sense: Sense::Geq,
    }
}

/// Speed limits as barrier constraints: `−u + k(v_max − vi) ≥ 0` and
/// `u + k(vi − v_min) ≥ 0`.
pub fn build_speed_cbfs(vi: f64, k: f64, v_min: f64, v_max: f64) -> [LinearConstraint; 2] {
    [
        LinearConstraint { coef_u: -1.0, coef_e: 0.0, rhs: -k * (v_max - vi), sense: Sense::Geq },
        LinearConstraint { coef_u: 1.0, coef_e: 0.0, rhs: -k * (vi - v_min), sense: Sense::Geq },
    ]
}

/// Tracking constraint from V = (vi − v_ref)², relaxed by e:
/// `2(vi − v_ref)·u + eps·(vi − v_ref)² ≤ e`.
pub fn build_clf(vi: f64, v_ref: f64, eps: f64) -> LinearConstraint {
    let dv = vi - v_ref;
    LinearConstraint {
        coef_u: 2.0 * dv,
        coef_e: -1.0,
        rhs: -eps * dv * dv,
        sense: Sense::Leq,
    }
}

/// One-step feasibility guards for the rear-end and merge barrier
/// constraints. Predecessor controls are the controls applied in the previous
/// step (zero for newly admitted vehicles).
///
/// Rear-end pair: `u_p − u + k1(v_p − v − phi·u_min) ≥ 0`.
/// Merge pair: `u_a − u − 2·phi2·v·u − phi2·v·u_min
///              + k2(v_a − v − phi2·v² − phi2·x·u_min) ≥ 0`.
pub fn build_feasibility_guards(
    xi: f64,
    vi: f64,
    rear: Option<(f64, f64)>,
    merge: Option<(f64, f64)>,
    k1: f64,
    k2: f64,
    phi: f64,
    phi2: f64,
    u_min: f64,
) -> Vec<LinearConstraint> {
    let mut out = Vec::with_capacity(2);
    if let Some((vp, up)) = rear {
        out.push(LinearConstraint {
            coef_u: -1.0,
            coef_e: 0.0,
            rhs: -(up + k1 * (vp - vi - phi * u_min)),
            sense: Sense::Geq,
        });
    }
    if let Some((va, ua)) = merge {
        out.push(LinearConstraint {
            coef_u: -(1.0 + 2.0 * phi2 * vi),
            coef_e: 0.0,
            rhs: -(ua - phi2 * vi * u_min + k2 * (va - vi - phi2 * vi * vi - phi2 * xi * u_min)),
            sense: Sense::Geq,
        });
    }
    out
}

/// Reference `(t_ref, v_ref, u_ref)` for a vehicle at position `x`, using the
/// position-feedback time `t_ref = t − (x*(t) − x)/v*(t)` clamped to the plan
/// horizon. Near-zero reference speeds fall back to `t_ref = t`.
pub fn reference_state(plan: &TrajectoryPlan, t: f64, x: f64) -> (f64, f64, f64) {
    let (x_star, v_star, _) = plan.eval(t);
    let t_ref = if v_star.abs() < 0.1 {
        t
    } else {
        t - (x_star - x) / v_star
    };
    let t_ref = t_ref.clamp(plan.t0, plan.exit_time());
    let (_, v_ref, u_ref) = plan.eval(t_ref);
    (t_ref, v_ref, u_ref)
}

/// Constraint oriented as `cu·u + ce·e ≥ rhs`.
#[derive(Debug, Clone, Copy)]
struct Oriented {
    cu: f64,
    ce: f64,
    rhs: f64,
}

impl Oriented {
    fn from(c: &LinearConstraint) -> Self {
        match c.sense {
            Sense::Geq => Oriented { cu: c.coef_u, ce: c.coef_e, rhs: c.rhs },
            Sense::Leq => Oriented { cu: -c.coef_u, ce: -c.coef_e, rhs: -c.rhs },
        }
    }

    fn slack(&self, u: f64, e: f64) -> f64 {
        self.cu * u + self.ce * e - self.rhs
    }
}

const PRIMAL_TOL: f64 = 1e-9;

/// Exact feasibility of the oriented system over `u ∈ [lo0, hi0]`, `e ≥ 0`.
///
/// Constraints without an e term shrink the u interval. E-involving
/// constraints define affine lower/upper envelopes for e; feasibility then
/// needs some u in the interval where the lower envelope stays below the
/// upper, which is checked at interval ends and at all pairwise envelope
/// crossings.
fn feasible_region(cons: &[Oriented], lo0: f64, hi0: f64) -> Option<(f64, f64)> {
    let mut lo = lo0;
    let mut hi = hi0;
    for c in cons.iter().filter(|c| c.ce == 0.0) {
        if c.cu == 0.0 {
            if 0.0 < c.rhs - PRIMAL_TOL {
                return None;
            }
        } else if c.cu > 0.0 {
            lo = lo.max(c.rhs / c.cu);
        } else {
            hi = hi.min(c.rhs / c.cu);
        }
    }
    if lo > hi + PRIMAL_TOL {
        return None;
    }
    // e >= m u + q envelopes (lowers) and e <= m u + q envelopes (uppers).
    let lowers: Vec<(f64, f64)> = cons
        .iter()
        .filter(|c| c.ce > 0.0)
        .map(|c| (-c.cu / c.ce, c.rhs / c.ce))
        .collect();
    let uppers: Vec<(f64, f64)> = cons
        .iter()
        .filter(|c| c.ce < 0.0)
        .map(|c| (c.cu / -c.ce, -c.rhs / -c.ce))
        .collect();
    if uppers.is_empty() {
        return Some((lo, hi));
    }
    let gap = |u: f64| {
        let l = lowers.iter().fold(0.0f64, |m, (s, q)| m.max(s * u + q));
        let r = uppers.iter().fold(f64::INFINITY, |m, (s, q)| m.min(s * u + q));
        r - l
    };
    let mut candidates = vec![lo, hi];
    let mut lines: Vec<(f64, f64)> = lowers.clone();
    lines.push((0.0, 0.0));
    for a in &lines {
        for b in &uppers {
            if (a.0 - b.0).abs() > 1e-12 {
                candidates.push((b.1 - a.1) / (a.0 - b.0));
            }
        }
    }
    if candidates
        .into_iter()
        .filter(|u| u.is_finite() && *u >= lo - PRIMAL_TOL && *u <= hi + PRIMAL_TOL)
        .any(|u| gap(u.clamp(lo, hi)) >= -PRIMAL_TOL)
    {
        Some((lo, hi))
    } else {
        None
    }
}

fn infeasible() -> QpSolution {
    QpSolution { u: 0.0, e: 0.0, feasible: false, active_set: Vec::new() }
}

/// Exact minimizer of the tracking QP, or `feasible = false` when the
/// constraint set is empty. Deterministic: identical inputs yield
/// bit-identical solutions.
pub fn solve_qp(qp: &QpInstance) -> QpSolution {
    let (u_min, u_max) = qp.u_bounds;
    let mut oriented: Vec<Oriented> = qp.constraints.iter().map(Oriented::from).collect();
    oriented.push(Oriented { cu: 1.0, ce: 0.0, rhs: u_min }); // index n: u >= u_min
    oriented.push(Oriented { cu: -1.0, ce: 0.0, rhs: -u_max }); // index n + 1: u <= u_max
    oriented.push(Oriented { cu: 0.0, ce: 1.0, rhs: 0.0 }); // index n + 2: e >= 0

    let Some((u_lo, u_hi)) = feasible_region(&oriented, u_min, u_max) else {
        return infeasible();
    };

    let min_feasible_e = |u: f64| {
        oriented
            .iter()
            .filter(|c| c.ce > 0.0)
            .fold(0.0f64, |m, c| m.max((c.rhs - c.cu * u) / c.ce))
    };

    if qp.beta_e <= 0.0 {
        // Degenerate relaxation weight: e carries no cost, so minimize over u
        // alone after folding every lower/upper e-envelope pair into the u
        // interval, then report the smallest feasible e.
        let mut lo = u_lo;
        let mut hi = u_hi;
        let uppers: Vec<Oriented> = oriented.iter().filter(|c| c.ce < 0.0).copied().collect();
        let mut lowers: Vec<(f64, f64)> = oriented
            .iter()
            .filter(|c| c.ce > 0.0)
            .map(|c| (-c.cu / c.ce, c.rhs / c.ce))
            .collect();
        lowers.push((0.0, 0.0));
        for (sa, qa) in &lowers {
            for b in &uppers {
                let (sb, qb) = (b.cu / -b.ce, -b.rhs / -b.ce);
                let ds = sa - sb;
                if ds.abs() < 1e-12 {
                    if *qa > qb + PRIMAL_TOL {
                        return infeasible();
                    }
                } else if ds > 0.0 {
                    hi = hi.min((qb - qa) / ds);
                } else {
                    lo = lo.max((qb - qa) / ds);
                }
            }
        }
        if lo > hi + PRIMAL_TOL {
            return infeasible();
        }
        let u = qp.u_ref.clamp(lo, hi);
        return QpSolution { u, e: min_feasible_e(u), feasible: true, active_set: Vec::new() };
    }

    let h_e = 2.0 * qp.beta_e;
    let primal_ok =
        |u: f64, e: f64| e >= -PRIMAL_TOL && oriented.iter().all(|c| c.slack(u, e) >= -PRIMAL_TOL);
    let objective = |u: f64, e: f64| qp.beta_e * e * e + 0.5 * (u - qp.u_ref) * (u - qp.u_ref);

    let mut best: Option<(f64, f64, f64, Vec<usize>)> = None;
    let mut consider = |u: f64, e: f64, active: Vec<usize>| {
        if !u.is_finite() || !e.is_finite() || !primal_ok(u, e) {
            return;
        }
        let obj = objective(u, e);
        if best.as_ref().map_or(true, |b| obj < b.2 - 1e-15) {
            best = Some((u, e, obj, active));
        }
    };

    // Empty active set: the unconstrained minimum.
    consider(qp.u_ref, 0.0, Vec::new());

    // Single active constraint: stationarity ∇J = λ c with λ ≥ 0.
    for (i, c) in oriented.iter().enumerate() {
        let denom = c.cu * c.cu + c.ce * c.ce / h_e;
        if denom < 1e-14 {
            continue;
        }
        let lambda = (c.rhs - c.cu * qp.u_ref) / denom;
        if lambda < -1e-12 {
            continue;
        }
        let u = qp.u_ref + lambda * c.cu;
        let e = lambda * c.ce / h_e;
        consider(u, e, vec![i]);
    }

    // Pairs of active constraints: vertex solve plus multiplier signs.
    for i in 0..oriented.len() {
        for j in i + 1..oriented.len() {
            let (ci, cj) = (oriented[i], oriented[j]);
            let det = ci.cu * cj.ce - cj.cu * ci.ce;
            if det.abs() < 1e-12 {
                continue;
            }
            let u = (ci.rhs * cj.ce - cj.rhs * ci.ce) / det;
            let e = (ci.cu * cj.rhs - cj.cu * ci.rhs) / det;
            // Multipliers from [cu ce]ᵀ λ = ∇J.
            let gu = u - qp.u_ref;
            let ge = h_e * e;
            let li = (gu * cj.ce - ge * cj.cu) / det;
            let lj = (ge * ci.cu - gu * ci.ce) / det;
            if li < -1e-12 || lj < -1e-12 {
                continue;
            }
            consider(u, e, vec![i, j]);
        }
    }

    match best {
        Some((u, e, _, active)) => {
            QpSolution { u, e: e.max(0.0), feasible: true, active_set: active }
        }
        None => {
            // Numerically cornered but provably nonempty region: fall back to
            // the clamped reference with the smallest feasible relaxation.
            let u = qp.u_ref.clamp(u_lo, u_hi);
            QpSolution { u, e: min_feasible_e(u), feasible: true, active_set: Vec::new() }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::plan_unconstrained;
    use czflow_oracles::follow_sim::{merge_min_barrier, rear_end_min_barrier, FollowScenario};
    use czflow_oracles::qp_grid::{solve as grid_solve, GridCon, GridQp};

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn rear_end_boundary_reduces_to_braking() {
        // vp = vi and b1 = 0: the constraint is exactly u <= 0.
        let c = build_rear_end_cbf(0.0, 20.0, 36.0, 20.0, 1.0, 1.8, 0.0);
        assert_eq!(c.sense, Sense::Geq);
        assert!(approx(c.coef_u, -1.8, 1e-12) && approx(c.rhs, 0.0, 1e-9));
        assert!(c.satisfied(-0.1, 0.0, 0.0) && !c.satisfied(0.1, 0.0, 0.0));
    }

    #[test]
    fn rear_end_bound_arithmetic() {
        let c = build_rear_end_cbf(0.0, 20.0, 50.0, 20.0, 1.0, 1.8, 0.0);
        // b1 = 14, bound u <= 14/1.8.
        let bound = c.rhs / c.coef_u;
        assert!(approx(bound, 14.0 / 1.8, 1e-12));
        assert!(c.satisfied(bound, 0.0, 1e-12));
        assert!(!c.satisfied(bound + 1e-6, 0.0, 0.0));
    }

    #[test]
    fn rear_end_bound_is_forward_invariant() {
        let sc = FollowScenario {
            x_leader: 50.0,
            v_leader: 20.0,
            u_leader: |_| 0.0,
            x_follower: 0.0,
            v_follower: 26.0,
            u_nominal: 3.0,
            u_min: -6.0,
            u_max: 4.0,
        };
        let min_b = rear_end_min_barrier(&sc, 1.0, 1.8, 0.0, 0.01, 60.0);
        assert!(min_b >= -1e-6, "min b1 = {min_b}");
    }

    #[test]
    fn merge_constraint_control_free_at_origin() {
        let c = build_merge_cbf(0.0, 22.0, 30.0, 16.0, 1.0, 0.009, 0.0);
        assert_eq!(c.coef_u, 0.0);
        // Pure check: v_ahead - vi + k2*b2 >= 0 with b2 = 30.
        assert_eq!(c.satisfied(0.0, 0.0, 1e-12), 16.0 - 22.0 + 30.0 >= 0.0);
        let tight = build_merge_cbf(0.0, 22.0, 4.0, 16.0, 1.0, 0.009, 0.0);
        assert!(!tight.satisfied(0.0, 0.0, 1e-12));
    }

    #[test]
    fn merge_constraint_matches_rear_end_form_at_merge_point() {
        // With phi2 = phi / L, at xi = L the barrier and the control
        // coefficient coincide with the rear-end constraint at phi = 1.8.
        let (length, phi) = (200.0, 1.8);
        let phi2 = phi / length;
        let (xi, vi, xa) = (200.0, 15.0, 240.0);
        let b2 = merge_barrier(xi, vi, xa, phi2, 0.0);
        let b1 = rear_end_barrier(xi, vi, xa, phi, 0.0);
        assert!(approx(b2, b1, 1e-12));
        let c = build_merge_cbf(xi, vi, xa, 14.0, 1.0, phi2, 0.0);
        assert!(approx(c.coef_u, -phi, 1e-12));
    }

    #[test]
    fn merge_bound_is_forward_invariant_until_merge_point() {
        let sc = FollowScenario {
            x_leader: 60.0,
            v_leader: 14.0,
            u_leader: |_| 0.0,
            x_follower: 0.0,
            v_follower: 24.0,
            u_nominal: 2.0,
            u_min: -6.0,
            u_max: 4.0,
        };
        let min_b = merge_min_barrier(&sc, 1.0, 1.8 / 200.0, 0.0, 200.0, 0.01, 120.0);
        assert!(min_b >= -1e-6, "min b2 = {min_b}");
    }

    #[test]
    fn speed_limits_at_boundaries() {
        let [hi, lo] = build_speed_cbfs(30.0, 1.0, 0.0, 30.0);
        assert!(hi.satisfied(-0.1, 0.0, 0.0) && !hi.satisfied(0.1, 0.0, 0.0));
        assert!(lo.satisfied(5.0, 0.0, 0.0));
        let [_, lo] = build_speed_cbfs(0.0, 1.0, 0.0, 30.0);
        assert!(lo.satisfied(0.1, 0.0, 0.0) && !lo.satisfied(-0.1, 0.0, 0.0));
        let [hi, _] = build_speed_cbfs(25.0, 1.0, 0.0, 30.0);
        // u <= 5
        assert!(hi.satisfied(5.0, 0.0, 1e-12) && !hi.satisfied(5.1, 0.0, 0.0));
    }

    #[test]
    fn clf_zero_error_always_satisfiable() {
        let c = build_clf(18.0, 18.0, 1.0);
        assert!(c.satisfied(3.0, 0.0, 1e-12));
        assert!(c.satisfied(-3.0, 0.0, 1e-12));
    }

    #[test]
    fn clf_arithmetic() {
        // vi=20, v_ref=18, eps=1: 4u + 4 <= e.
        let c = build_clf(20.0, 18.0, 1.0);
        assert!(approx(c.coef_u, 4.0, 1e-12));
        assert_eq!(c.coef_e, -1.0);
        assert!(approx(c.rhs, -4.0, 1e-12));
        assert_eq!(c.sense, Sense::Leq);
        assert!(c.satisfied(1.0, 8.0, 1e-12) && !c.satisfied(1.0, 7.9, 0.0));
    }

    #[test]
    fn guards_empty_without_predecessors() {
        assert!(
            build_feasibility_guards(0.0, 20.0, None, None, 1.0, 1.0, 1.8, 0.009, -4.0).is_empty()
        );
    }

    #[test]
    fn rear_guard_stationary_pair_is_loose_cap() {
        // Equal speeds, up = 0: the guard reduces to u <= k1*(-phi*u_min).
        let g =
            build_feasibility_guards(0.0, 20.0, Some((20.0, 0.0)), None, 1.0, 1.0, 1.8, 0.009, -4.0);
        assert_eq!(g.len(), 1);
        let cap = g[0].rhs / g[0].coef_u;
        assert!(approx(cap, 1.8 * 4.0, 1e-12));
        assert!(g[0].satisfied(cap, 0.0, 1e-12) && !g[0].satisfied(cap + 1e-6, 0.0, 0.0));
    }

    #[test]
    fn merge_guard_matches_formula() {
        let (xi, vi, va, ua) = (50.0, 22.0, 16.0, -1.0);
        let (k2, phi2, u_min) = (1.0, 0.009, -4.0);
        let g = build_feasibility_guards(xi, vi, None, Some((va, ua)), 1.0, k2, 1.8, phi2, u_min);
        assert_eq!(g.len(), 1);
        for trial in [-4.0, -2.0, 0.0, 1.0] {
            let direct = ua - trial - 2.0 * phi2 * vi * trial - phi2 * vi * u_min
                + k2 * (va - vi - phi2 * vi * vi - phi2 * xi * u_min);
            assert_eq!(g[0].satisfied(trial, 0.0, 1e-12), direct >= -1e-12, "u = {trial}");
        }
    }

    #[test]
    fn reference_state_zero_error() {
        let plan = plan_unconstrained(18.0, 15.0, 200.0, 0.5333, 0.0).unwrap();
        let t = 4.0;
        let (x_star, v_star, u_star) = plan.eval(t);
        let (t_ref, v_ref, u_ref) = reference_state(&plan, t, x_star);
        assert!(approx(t_ref, t, 1e-9) && approx(v_ref, v_star, 1e-9) && approx(u_ref, u_star, 1e-9));
    }

    #[test]
    fn reference_state_lagging_vehicle() {
        // Constant-speed plan at 20 m/s; vehicle 10 m behind the reference.
        let plan = plan_unconstrained(20.0, 20.0, 200.0, 0.0, 0.0).unwrap();
        let t = 5.0;
        let (x_star, _, _) = plan.eval(t);
        let (t_ref, v_ref, _) = reference_state(&plan, t, x_star - 10.0);
        assert!(approx(t_ref, t - 0.5, 1e-12));
        assert!(approx(v_ref, 20.0, 1e-12));
    }

    #[test]
    fn reference_state_position_accuracy() {
        // The one-step feedback time keeps the reference position within
        // 0.5 m of the vehicle for moderate errors and useful speeds. The
        // exact reference time solving x*(t_ref) = x exists inside the
        // horizon whenever the clamp is inactive.
        let mut state = 0x2545F4914F6CDD1Du64;
        let mut rand01 = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        let mut checked = 0;
        for _ in 0..400 {
            let v0 = 8.0 + 20.0 * rand01();
            let vm = 8.0 + 20.0 * rand01();
            let beta = 2.0 * rand01();
            let plan = plan_unconstrained(v0, vm, 200.0 + 200.0 * rand01(), beta, 0.0).unwrap();
            let t = plan.t0 + plan.tm * (0.1 + 0.8 * rand01());
            let (x_star, v_star, _) = plan.eval(t);
            if v_star < 5.0 {
                continue;
            }
            let x = (x_star + (rand01() * 20.0 - 10.0)).clamp(0.0, plan.length);
            let (t_ref, _, _) = reference_state(&plan, t, x);
            if t_ref <= plan.t0 + 1e-9 || t_ref >= plan.exit_time() - 1e-9 {
                continue; // clamped: position match not expected
            }
            let (x_at_ref, _, _) = plan.eval(t_ref);
            assert!(
                (x_at_ref - x).abs() <= 0.5,
                "position gap {} with plan error {}",
                (x_at_ref - x).abs(),
                x_star - x
            );
            checked += 1;
        }
        assert!(checked > 100, "only {checked} samples exercised the formula");
    }

    #[test]
    fn qp_unconstrained_returns_reference() {
        let qp =
            QpInstance { u_ref: 1.3, beta_e: 0.5333, constraints: vec![], u_bounds: (-4.0, 4.0) };
        let sol = solve_qp(&qp);
        assert!(sol.feasible && approx(sol.u, 1.3, 1e-12) && sol.e == 0.0);
        assert!(sol.active_set.is_empty());
    }

    #[test]
    fn qp_single_bound_projects() {
        let qp = QpInstance {
            u_ref: 1.0,
            beta_e: 0.5333,
            constraints: vec![LinearConstraint {
                coef_u: 1.0,
                coef_e: 0.0,
                rhs: 0.0,
                sense: Sense::Leq,
            }],
            u_bounds: (-4.0, 4.0),
        };
        let sol = solve_qp(&qp);
        assert!(sol.feasible && approx(sol.u, 0.0, 1e-12) && sol.e == 0.0);
        assert_eq!(sol.active_set, vec![0]);
    }

    #[test]
    fn qp_infeasible_interval_detected() {
        let qp = QpInstance {
            u_ref: 0.0,
            beta_e: 0.5333,
            constraints: vec![
                LinearConstraint { coef_u: 1.0, coef_e: 0.0, rhs: 2.0, sense: Sense::Geq },
                LinearConstraint { coef_u: 1.0, coef_e: 0.0, rhs: 1.0, sense: Sense::Leq },
            ],
            u_bounds: (-4.0, 4.0),
        };
        assert!(!solve_qp(&qp).feasible);
    }

    #[test]
    fn qp_state_only_violation_is_infeasible() {
        // A control-free constraint (merge form at xi = 0) that fails.
        let qp = QpInstance {
            u_ref: 0.0,
            beta_e: 0.5333,
            constraints: vec![LinearConstraint {
                coef_u: 0.0,
                coef_e: 0.0,
                rhs: 1.0,
                sense: Sense::Geq,
            }],
            u_bounds: (-4.0, 4.0),
        };
        assert!(!solve_qp(&qp).feasible);
    }

    #[test]
    fn qp_clf_relaxation_tradeoff_matches_grid() {
        // CLF active: the solver balances u deviation against e cost.
        let qp = QpInstance {
            u_ref: 2.0,
            beta_e: 0.5333,
            constraints: vec![build_clf(20.0, 18.0, 1.0)],
            u_bounds: (-4.0, 4.0),
        };
        let sol = solve_qp(&qp);
        let grid = GridQp {
            u_ref: qp.u_ref,
            beta_e: qp.beta_e,
            u_min: -4.0,
            u_max: 4.0,
            e_max: 40.0,
            cons: vec![GridCon { cu: 4.0, ce: -1.0, rhs: -4.0, leq: true }],
        };
        let (_, _, obj) = grid_solve(&grid, 1e-3, 1e-3).unwrap();
        let got = qp.beta_e * sol.e * sol.e + 0.5 * (sol.u - qp.u_ref).powi(2);
        assert!(got <= obj + 1e-4, "objective {got} vs grid {obj}");
        assert!(approx(got, obj, 1e-4), "objective {got} vs grid {obj}");
    }

    #[test]
    fn qp_deterministic_bitwise() {
        let qp = QpInstance {
            u_ref: -0.7,
            beta_e: 2.6667,
            constraints: vec![
                build_clf(17.3, 18.1, 10.0),
                build_rear_end_cbf(12.0, 17.3, 40.0, 16.0, 1.0, 1.8, 0.0),
            ],
            u_bounds: (-4.0, 4.0),
        };
        let a = solve_qp(&qp);
        let b = solve_qp(&qp);
        assert_eq!(a.u.to_bits(), b.u.to_bits());
        assert_eq!(a.e.to_bits(), b.e.to_bits());
        assert_eq!(a.active_set, b.active_set);
    }

    #[test]
    fn qp_zero_weight_degenerate_relaxation() {
        let qp = QpInstance {
            u_ref: 3.0,
            beta_e: 0.0,
            constraints: vec![
                build_clf(20.0, 18.0, 1.0),
                LinearConstraint { coef_u: 1.0, coef_e: 0.0, rhs: 1.0, sense: Sense::Leq },
            ],
            u_bounds: (-4.0, 4.0),
        };
        let sol = solve_qp(&qp);
        assert!(sol.feasible);
        assert!(approx(sol.u, 1.0, 1e-12));
        // Minimal feasible e for that u: 4*1 + 4 = 8.
        assert!(approx(sol.e, 8.0, 1e-9));
    }
}
