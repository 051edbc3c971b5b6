//! Newton solve of the full five-equation boundary system for the
//! minimum-effort trajectory with free terminal time.
//!
//! The unknowns are the control-polynomial coefficients `(a, b, c, d)` of
//!   u(t) = a t + b,  v(t) = a t²/2 + b t + c,  x(t) = a t³/6 + b t²/2 + c t + d
//! together with the horizon `tm`, anchored at t0 = 0:
//!
//!   v(0)  = v0
//!   v(tm) = vm
//!   x(0)  = 0
//!   x(tm) = length
//!   beta - b/2 + a c = 0          (free-terminal-time stationarity)
//!
//! This solver is deliberately independent of the closed-form cubic路 used by
//! the production code: it iterates the raw system from several horizon
//! guesses and applies the same root-selection rule (prefer nonnegative-speed
//! trajectories, then minimum cost, cost evaluated by quadrature).

use crate::quadrature::simpson;
use crate::solve_dense;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FiveEqSolution {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub tm: f64,
}

impl FiveEqSolution {
    pub fn speed(&self, s: f64) -> f64 {
        self.a * s * s / 2.0 + self.b * s + self.c
    }

    pub fn min_speed(&self) -> f64 {
        let mut lo = self.speed(0.0).min(self.speed(self.tm));
        if self.a.abs() > 1e-15 {
            let s = -self.b / self.a;
            if s > 0.0 && s < self.tm {
                lo = lo.min(self.speed(s));
            }
        }
        lo
    }

    /// beta·tm + ∫ ½u² by quadrature (independent of the closed form).
    pub fn cost(&self, beta: f64) -> f64 {
        let (a, b) = (self.a, self.b);
        beta * self.tm + simpson(|s| 0.5 * (a * s + b).powi(2), 0.0, self.tm, 2000)
    }
}

fn residuals(z: &[f64; 5], v0: f64, vm: f64, length: f64, beta: f64) -> [f64; 5] {
    let [a, b, c, d, tm] = *z;
    [
        c - v0,
        a * tm * tm / 2.0 + b * tm + c - vm,
        d,
        a * tm * tm * tm / 6.0 + b * tm * tm / 2.0 + c * tm + d - length,
        beta - b / 2.0 + a * c,
    ]
}

fn newton_from(tm0: f64, v0: f64, vm: f64, length: f64, beta: f64) -> Option<FiveEqSolution> {
    if !(tm0.is_finite() && tm0 > 1e-9) {
        return None;
    }
    let mut z = [0.0, (vm - v0) / tm0, v0, 0.0, tm0];
    let scale = 1.0 + length.abs() + v0.abs() + vm.abs() + beta.abs();
    for _ in 0..200 {
        let f = residuals(&z, v0, vm, length, beta);
        let norm = f.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if norm < 1e-12 * scale {
            let [a, b, c, d, tm] = z;
            if tm > 1e-7 {
                return Some(FiveEqSolution { a, b, c, d, tm });
            }
            return None;
        }
        let [a, b, c, _d, tm] = z;
        let mut jac = vec![
            vec![0.0, 0.0, 1.0, 0.0, 0.0],
            vec![tm * tm / 2.0, tm, 1.0, 0.0, a * tm + b],
            vec![0.0, 0.0, 0.0, 1.0, 0.0],
            vec![
                tm * tm * tm / 6.0,
                tm * tm / 2.0,
                tm,
                1.0,
                a * tm * tm / 2.0 + b * tm + c,
            ],
            vec![c, -0.5, a, 0.0, 0.0],
        ];
        let mut rhs = f.map(|x| -x).to_vec();
        let step = solve_dense(&mut jac, &mut rhs)?;
        // Damped update: halve the step while it fails to reduce the residual.
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let mut trial = z;
            for (t, s) in trial.iter_mut().zip(&step) {
                *t += lambda * s;
            }
            let fnew = residuals(&trial, v0, vm, length, beta);
            let nnew = fnew.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            if nnew < norm || nnew < 1e-12 * scale {
                z = trial;
                accepted = true;
                break;
            }
            lambda *= 0.5;
        }
        if !accepted {
            return None;
        }
    }
    None
}

/// Solve the five-equation system, returning the solution selected the same
/// way the artifact specifies: prefer horizons whose speed trajectory stays
/// nonnegative, break ties by cost.
pub fn solve(v0: f64, vm: f64, length: f64, beta: f64) -> Option<FiveEqSolution> {
    let natural = 2.0 * length / (v0 + vm).max(1e-6);
    let guesses = [
        natural,
        length / v0.max(1.0),
        length / vm.max(1.0),
        natural * 0.5,
        natural * 2.0,
        natural * 4.0,
        natural * 8.0,
        natural * 0.25,
    ];
    let mut found: Vec<FiveEqSolution> = Vec::new();
    for g in guesses {
        if let Some(sol) = newton_from(g, v0, vm, length, beta) {
            if !found.iter().any(|s| (s.tm - sol.tm).abs() < 1e-6 * (1.0 + sol.tm)) {
                found.push(sol);
            }
        }
    }
    found
        .into_iter()
        .map(|s| {
            let viable = if s.min_speed() >= -1e-9 { 0u8 } else { 1u8 };
            (viable, s.cost(beta), s)
        })
        .min_by(|x, y| (x.0, x.1).partial_cmp(&(y.0, y.1)).unwrap())
        .map(|t| t.2)
}
