//! Brute-force grid minimization of the two-variable tracking QP.
//!
//! The decision variables are a control `u` and a relaxation `e >= 0`; the
//! objective is `beta_e e^2 + 1/2 (u - u_ref)^2` under affine constraints
//! `cu·u + ce·e {>=,<=} rhs`. The exhaustive scan walks the u grid and, for
//! each u, the e grid. Because the e term of the objective is nondecreasing
//! on e >= 0, the scan of the e axis stops at the first feasible grid point;
//! `solve_full_scan` keeps the naive double loop for self-validation.

#[derive(Debug, Clone, Copy)]
pub struct GridCon {
    pub cu: f64,
    pub ce: f64,
    pub rhs: f64,
    /// true: cu·u + ce·e <= rhs; false: >=
    pub leq: bool,
}

impl GridCon {
    fn holds(&self, u: f64, e: f64, tol: f64) -> bool {
        let lhs = self.cu * u + self.ce * e;
        if self.leq {
            lhs <= self.rhs + tol
        } else {
            lhs >= self.rhs - tol
        }
    }
}

#[derive(Debug, Clone)]
pub struct GridQp {
    pub u_ref: f64,
    pub beta_e: f64,
    pub u_min: f64,
    pub u_max: f64,
    pub e_max: f64,
    pub cons: Vec<GridCon>,
}

impl GridQp {
    fn objective(&self, u: f64, e: f64) -> f64 {
        self.beta_e * e * e + 0.5 * (u - self.u_ref) * (u - self.u_ref)
    }

    /// Smallest feasible e on the grid for a fixed u, if any.
    fn min_feasible_e(&self, u: f64, de: f64, tol: f64) -> Option<f64> {
        // Constraints not involving e must already hold.
        for c in self.cons.iter().filter(|c| c.ce == 0.0) {
            if !c.holds(u, 0.0, tol) {
                return None;
            }
        }
        let mut lo = 0.0f64;
        let mut hi = self.e_max;
        for c in self.cons.iter().filter(|c| c.ce != 0.0) {
            let bound = (c.rhs - c.cu * u) / c.ce;
            // ce > 0, <=  -> e <= bound ; ce > 0, >= -> e >= bound
            // ce < 0, <=  -> e >= bound ; ce < 0, >= -> e <= bound
            let upper = c.leq == (c.ce > 0.0);
            if upper {
                hi = hi.min(bound);
            } else {
                lo = lo.max(bound);
            }
        }
        if lo > hi + tol {
            return None;
        }
        // Same tolerance as `holds`, so the chosen grid point matches the scan.
        let e = ((lo.max(0.0) - tol) / de).ceil().max(0.0) * de;
        if e <= hi + tol && e <= self.e_max + tol {
            Some(e)
        } else {
            None
        }
    }
}

/// Grid minimum as `(u, e, objective)`, or `None` when every grid point is
/// infeasible.
pub fn solve(qp: &GridQp, du: f64, de: f64) -> Option<(f64, f64, f64)> {
    let tol = 1e-9;
    let n = ((qp.u_max - qp.u_min) / du).round() as usize;
    let mut best: Option<(f64, f64, f64)> = None;
    for i in 0..=n {
        let u = (qp.u_min + i as f64 * du).min(qp.u_max);
        if let Some(e) = qp.min_feasible_e(u, de, tol) {
            let obj = qp.objective(u, e);
            if best.map_or(true, |b| obj < b.2) {
                best = Some((u, e, obj));
            }
        }
    }
    best
}

/// Naive double loop over the full (u, e) grid. Slow; used to validate the
/// shortcut in `solve` on a handful of instances.
pub fn solve_full_scan(qp: &GridQp, du: f64, de: f64) -> Option<(f64, f64, f64)> {
    let tol = 1e-9;
    let nu = ((qp.u_max - qp.u_min) / du).round() as usize;
    let ne = (qp.e_max / de).round() as usize;
    let mut best: Option<(f64, f64, f64)> = None;
    for i in 0..=nu {
        let u = (qp.u_min + i as f64 * du).min(qp.u_max);
        for j in 0..=ne {
            let e = j as f64 * de;
            if qp.cons.iter().all(|c| c.holds(u, e, tol)) {
                let obj = qp.objective(u, e);
                if best.map_or(true, |b| obj < b.2) {
                    best = Some((u, e, obj));
                }
                break; // objective only grows with e from the first feasible point
            }
        }
    }
    best
}
