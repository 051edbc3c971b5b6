//! Unconstrained minimum-effort trajectories with a commanded terminal speed.
//!
//! A vehicle entering a segment of length `L` at speed `v0` must reach the
//! segment end at speed `vm`, minimizing `beta * tm + ∫ ½ u²` over the free
//! horizon `tm`. The optimal control is linear in time, `u(s) = a s + b`, and
//! the horizon solves the cubic
//!
//!   beta tm³ + (2 v0 + vm) tm² + (−3 L + 6 v0 vm + 6 v0²) tm − 12 L v0 = 0,
//!
//! after which the coefficients follow in closed form. A first-order
//! perturbation of the cubic gives a cheap update of `tm` when the terminal
//! speed command changes by a small amount, which is how replans triggered by
//! the flow controller stay O(1).
//!
//! All solutions here are expressed in shifted time `s = t − t0` with the
//! segment origin at `x = 0`.

use crate::cubic;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrajectoryError {
    #[error("no positive terminal-time root for v0={v0}, vm={vm}, length={length}, beta={beta}")]
    NoPositiveRoot { v0: f64, vm: f64, length: f64, beta: f64 },
    #[error("terminal time must be positive, got {tm}")]
    InvalidHorizon { tm: f64 },
    #[error("terminal-time derivative vanishes; perturbation undefined")]
    DegenerateDerivative,
    #[error("time/effort weight alpha must lie in [0, 1), got {alpha}")]
    InvalidWeight { alpha: f64 },
}

/// Weights of the time/effort objective. `beta` is derived from the convex
/// combination weight `alpha` and the largest control magnitude:
/// `beta = alpha * u_abs_max^2 / (2 (1 - alpha))`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CostWeights {
    pub alpha: f64,
    pub beta: f64,
    pub u_abs_max: f64,
}

impl CostWeights {
    pub fn from_alpha(alpha: f64, u_min: f64, u_max: f64) -> Result<Self, TrajectoryError> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(TrajectoryError::InvalidWeight { alpha });
        }
        let u_abs_max = u_min.abs().max(u_max.abs());
        Ok(Self {
            alpha,
            beta: alpha * u_abs_max * u_abs_max / (2.0 * (1.0 - alpha)),
            u_abs_max,
        })
    }

    /// Weighted time+effort objective for a completed traversal.
    pub fn objective_weighted(&self, travel_time: f64, effort: f64) -> f64 {
        self.beta * travel_time + effort
    }

    /// Normalized convex-combination form of the same objective.
    pub fn objective_normalized(&self, travel_time: f64, effort: f64) -> f64 {
        self.alpha * travel_time + (1.0 - self.alpha) * effort / (0.5 * self.u_abs_max * self.u_abs_max)
    }
}

/// One vehicle's reference trajectory over the remainder of a segment.
///
/// Position, speed, and control follow the cubic/quadratic/linear polynomials
/// in shifted time `s = t − t0`; `s = 0` is the anchor state `(0, v0)` and
/// `s = tm` the boundary `(length, vm)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryPlan {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    /// Absolute time of the anchor state.
    pub t0: f64,
    /// Horizon measured from `t0`.
    pub tm: f64,
    pub v0: f64,
    pub vm: f64,
    /// Segment length remaining at the anchor.
    pub length: f64,
    pub beta: f64,
}

impl TrajectoryPlan {
    /// Reference `(x, v, u)` at absolute time `t`, clamped to the horizon: the
    /// terminal state keeps being reported after `t0 + tm` so vehicles that
    /// physically lag the plan near the exit still see a defined reference.
    pub fn eval(&self, t: f64) -> (f64, f64, f64) {
        let s = (t - self.t0).clamp(0.0, self.tm);
        let u = self.a * s + self.b;
        let v = self.a * s * s / 2.0 + self.b * s + self.c;
        let x = self.a * s * s * s / 6.0 + self.b * s * s / 2.0 + self.c * s + self.d;
        (x, v, u)
    }

    /// Absolute time at which the plan reaches the segment end.
    pub fn exit_time(&self) -> f64 {
        self.t0 + self.tm
    }

    /// Minimum of the reference speed over the horizon.
    pub fn min_speed(&self) -> f64 {
        let mut lo = self.c.min(self.eval(self.exit_time()).1);
        if self.a.abs() > 1e-300 {
            let s = -self.b / self.a;
            if s > 0.0 && s < self.tm {
                lo = lo.min(self.a * s * s / 2.0 + self.b * s + self.c);
            }
        }
        lo
    }

    /// `beta * tm` plus the closed-form control effort of this plan.
    pub fn cost(&self) -> f64 {
        self.beta * self.tm + control_effort(self.a, self.b, self.tm)
    }
}

/// ∫₀^tm ½ (a s + b)² ds.
fn control_effort(a: f64, b: f64, tm: f64) -> f64 {
    a * a * tm.powi(3) / 6.0 + a * b * tm * tm / 2.0 + b * b * tm / 2.0
}

fn terminal_time_cubic(v0: f64, vm: f64, length: f64, beta: f64) -> (f64, f64, f64, f64) {
    (
        beta,
        2.0 * v0 + vm,
        -3.0 * length + 6.0 * v0 * vm + 6.0 * v0 * v0,
        -12.0 * length * v0,
    )
}

fn cubic_residual(v0: f64, vm: f64, length: f64, beta: f64, tm: f64) -> f64 {
    let (c3, c2, c1, c0) = terminal_time_cubic(v0, vm, length, beta);
    ((c3 * tm + c2) * tm + c1) * tm + c0
}

fn raw_params(v0: f64, vm: f64, length: f64, tm: f64) -> (f64, f64) {
    let a = 6.0 / (tm * tm) * (vm - v0) - 12.0 / tm.powi(3) * (length - v0 * tm);
    let b = -2.0 / tm * (vm - v0) + 6.0 / (tm * tm) * (length - v0 * tm);
    (a, b)
}

fn min_speed_of(a: f64, b: f64, v0: f64, vm: f64, tm: f64) -> f64 {
    let mut lo = v0.min(vm);
    if a.abs() > 1e-300 {
        let s = -b / a;
        if s > 0.0 && s < tm {
            lo = lo.min(a * s * s / 2.0 + b * s + v0);
        }
    }
    lo
}

/// Positive horizon solving the terminal-time cubic. When several positive
/// roots exist, horizons whose speed profile stays nonnegative are preferred
/// and ties are broken by the time+effort cost.
pub fn solve_terminal_time(v0: f64, vm: f64, length: f64, beta: f64) -> Result<f64, TrajectoryError> {
    let (c3, c2, c1, c0) = terminal_time_cubic(v0, vm, length, beta);
    let mut best: Option<(u8, f64, f64)> = None;
    for root in cubic::real_roots(c3, c2, c1, c0) {
        let mut tm = root;
        if tm <= 1e-9 {
            continue;
        }
        // Polish against the unnormalized cubic.
        for _ in 0..4 {
            let f = ((c3 * tm + c2) * tm + c1) * tm + c0;
            let df = (3.0 * c3 * tm + 2.0 * c2) * tm + c1;
            if df == 0.0 {
                break;
            }
            let next = tm - f / df;
            if next > 0.0 {
                tm = next;
            } else {
                break;
            }
        }
        let (a, b) = raw_params(v0, vm, length, tm);
        let viable = if min_speed_of(a, b, v0, vm, tm) >= -1e-9 { 0u8 } else { 1u8 };
        let cost = beta * tm + control_effort(a, b, tm);
        let key = (viable, cost, tm);
        if best.map_or(true, |(bv, bc, _)| (viable, cost) < (bv, bc)) {
            best = Some(key);
        }
    }
    match best {
        Some((_, _, tm)) => {
            debug_assert!(
                cubic_residual(v0, vm, length, beta, tm).abs() <= 1e-9 * (12.0 * length * v0.max(1.0)),
                "terminal-time residual out of tolerance"
            );
            Ok(tm)
        }
        None => Err(TrajectoryError::NoPositiveRoot { v0, vm, length, beta }),
    }
}

/// Closed-form coefficients `(a, b, c, d)` for a fixed horizon.
pub fn trajectory_params(v0: f64, vm: f64, length: f64, tm: f64) -> Result<(f64, f64, f64, f64), TrajectoryError> {
    if !(tm > 0.0) {
        return Err(TrajectoryError::InvalidHorizon { tm });
    }
    let (a, b) = raw_params(v0, vm, length, tm);
    Ok((a, b, v0, 0.0))
}

/// Solve the free-horizon problem and package the result anchored at `t0`.
pub fn plan_unconstrained(v0: f64, vm: f64, length: f64, beta: f64, t0: f64) -> Result<TrajectoryPlan, TrajectoryError> {
    let tm = solve_terminal_time(v0, vm, length, beta)?;
    let (a, b, c, d) = trajectory_params(v0, vm, length, tm)?;
    let plan = TrajectoryPlan { a, b, c, d, t0, tm, v0, vm, length, beta };
    if plan.min_speed() < 0.0 {
        log::debug!(
            "reference speed dips below zero (min {:.3} m/s) for v0={v0}, vm={vm}, L={length}",
            plan.min_speed()
        );
    }
    Ok(plan)
}

/// First-order update of the horizon when the terminal speed moves by `dv`.
///
/// `tm` must solve the cubic for `(v0, vm, length, beta)`; the updated horizon
/// for `vm + dv` is `tm − (∂f/∂vm) / (∂f/∂tm)|_(vm+dv) · dv` with both partial
/// derivatives taken coefficient-wise from the cubic.
pub fn perturb_terminal_time(
    tm: f64,
    v0: f64,
    vm: f64,
    dv: f64,
    length: f64,
    beta: f64,
) -> Result<f64, TrajectoryError> {
    let vm_new = vm + dv;
    let numer = tm * tm + 6.0 * v0 * tm;
    let denom = 3.0 * beta * tm * tm + (4.0 * v0 + 2.0 * vm_new) * tm - 3.0 * length
        + 6.0 * v0 * vm_new
        + 6.0 * v0 * v0;
    if denom.abs() < 1e-12 {
        return Err(TrajectoryError::DegenerateDerivative);
    }
    Ok(tm - numer / denom * dv)
}

/// Which path a replan took; exposed so callers can count fast vs exact
/// regenerations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplanMethod {
    Perturbed,
    Exact,
}

/// Remaining horizon of `old` at the plan position matching `length_remaining`,
/// found by safeguarded Newton on x*(s) = x.
fn remaining_horizon_at(old: &TrajectoryPlan, length_remaining: f64) -> f64 {
    let x = old.length - length_remaining;
    let pos = |s: f64| old.a * s * s * s / 6.0 + old.b * s * s / 2.0 + old.c * s;
    let spd = |s: f64| old.a * s * s / 2.0 + old.b * s + old.c;
    let mut s = (old.tm * x / old.length.max(1e-9)).clamp(0.0, old.tm);
    for _ in 0..8 {
        let v = spd(s);
        if v.abs() < 1e-6 {
            break;
        }
        let step = (pos(s) - x) / v;
        s = (s - step).clamp(0.0, old.tm);
        if step.abs() < 1e-12 {
            break;
        }
    }
    old.tm - s
}

/// Regenerate a reference for the remaining segment after a terminal-speed
/// command change.
///
/// The plan is re-anchored at the vehicle's current state `(v_now, remaining
/// length, now)`. For small command changes (|dv| within `perturb_threshold`)
/// the horizon is carried over from the old plan at the matching position and
/// corrected to first order; boundary conditions then hold exactly by
/// construction while stationarity is approximate. Larger changes re-solve
/// the cubic.
pub fn replan_on_vm_change(
    v_now: f64,
    length_remaining: f64,
    now: f64,
    old: &TrajectoryPlan,
    vm_new: f64,
    perturb_threshold: f64,
) -> Result<(TrajectoryPlan, ReplanMethod), TrajectoryError> {
    let dv = vm_new - old.vm;
    let tm_rem = remaining_horizon_at(old, length_remaining);
    if dv.abs() <= perturb_threshold && tm_rem > 1e-6 {
        let perturbed = perturb_terminal_time(tm_rem, v_now, old.vm, dv, length_remaining, old.beta);
        if let Ok(tm) = perturbed {
            if tm > 1e-6 {
                let (a, b, c, d) = trajectory_params(v_now, vm_new, length_remaining, tm)?;
                let plan = TrajectoryPlan {
                    a,
                    b,
                    c,
                    d,
                    t0: now,
                    tm,
                    v0: v_now,
                    vm: vm_new,
                    length: length_remaining,
                    beta: old.beta,
                };
                return Ok((plan, ReplanMethod::Perturbed));
            }
        }
    }
    let plan = plan_unconstrained(v_now, vm_new, length_remaining, old.beta, now)?;
    Ok((plan, ReplanMethod::Exact))
}

/// Optimal cost `beta·tm + ∫ ½ u²` of the free-horizon solution.
pub fn unconstrained_cost(v0: f64, vm: f64, length: f64, beta: f64) -> Result<f64, TrajectoryError> {
    let tm = solve_terminal_time(v0, vm, length, beta)?;
    let (a, b) = raw_params(v0, vm, length, tm);
    Ok(beta * tm + control_effort(a, b, tm))
}

/// Terminal speed minimizing the unconstrained cost over `[vm_min, vm_max]`,
/// located by golden-section search refined to 1e-3 m/s.
pub fn optimal_terminal_velocity(v0: f64, length: f64, beta: f64, vm_min: f64, vm_max: f64) -> f64 {
    debug_assert!(vm_min < vm_max);
    let cost = |vm: f64| unconstrained_cost(v0, vm, length, beta).unwrap_or(f64::INFINITY);
    let ratio = (5.0f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (vm_min, vm_max);
    let mut c = hi - ratio * (hi - lo);
    let mut d = lo + ratio * (hi - lo);
    let mut fc = cost(c);
    let mut fd = cost(d);
    while hi - lo > 1e-3 {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - ratio * (hi - lo);
            fc = cost(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + ratio * (hi - lo);
            fd = cost(d);
        }
    }
    0.5 * (lo + hi)
}
