//! Real roots of cubic (and degenerate quadratic/linear) polynomials.
//!
//! Roots are isolated by splitting the axis at the stationary points of the
//! cubic, then polished with Newton steps safeguarded by bisection so the
//! iterate can never leave its bracket.

fn different_signs(a: f64, b: f64) -> bool {
    (a < 0.0) != (b < 0.0)
}

/// Safeguarded Newton on a bracketing interval [lo, hi] with f(lo), f(hi) of
/// opposite signs.
fn newton_bisect(f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let mut f_lo = f(lo);
    let mut x = 0.5 * (lo + hi);
    for _ in 0..128 {
        let fx = f(x);
        if fx == 0.0 {
            return x;
        }
        if different_signs(f_lo, fx) {
            hi = x;
        } else {
            lo = x;
            f_lo = fx;
        }
        let dfx = df(x);
        let mut next = if dfx != 0.0 { x - fx / dfx } else { f64::NAN };
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= f64::EPSILON * (1.0 + x.abs()) {
            return next;
        }
        x = next;
    }
    x
}

fn quadratic_roots(a: f64, b: f64, c: f64, out: &mut Vec<f64>) {
    if a == 0.0 {
        if b != 0.0 {
            out.push(-c / b);
        }
        return;
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return;
    }
    if disc == 0.0 {
        out.push(-b / (2.0 * a));
        return;
    }
    let q = -0.5 * (b + b.signum() * disc.sqrt());
    let r1 = q / a;
    let r2 = if q != 0.0 { c / q } else { -b / a - r1 };
    out.push(r1.min(r2));
    out.push(r1.max(r2));
}

/// All real roots of `c3 x^3 + c2 x^2 + c1 x + c0`, ascending. Multiple roots
/// (tangencies) appear once.
pub fn real_roots(c3: f64, c2: f64, c1: f64, c0: f64) -> Vec<f64> {
    let mut roots = Vec::with_capacity(3);
    let scale = c3.abs().max(c2.abs()).max(c1.abs()).max(c0.abs());
    if scale == 0.0 {
        return roots;
    }
    let (n3, n2, n1, n0) = (c3 / scale, c2 / scale, c1 / scale, c0 / scale);
    if n3.abs() < 1e-14 {
        quadratic_roots(n2, n1, n0, &mut roots);
        roots.sort_by(|a, b| a.partial_cmp(b).unwrap());
        return roots;
    }

    let f = |x: f64| ((n3 * x + n2) * x + n1) * x + n0;
    let df = |x: f64| (3.0 * n3 * x + 2.0 * n2) * x + n1;

    // Stationary points split the axis into monotone pieces.
    let mut stationary = Vec::with_capacity(2);
    quadratic_roots(3.0 * n3, 2.0 * n2, n1, &mut stationary);
    stationary.sort_by(|a, b| a.partial_cmp(b).unwrap());

    // Cauchy bound on root magnitude.
    let bound = 1.0 + (n2.abs().max(n1.abs()).max(n0.abs())) / n3.abs();

    let mut edges = Vec::with_capacity(4);
    edges.push(-bound);
    for s in &stationary {
        if *s > -bound && *s < bound {
            edges.push(*s);
        }
    }
    edges.push(bound);

    for w in edges.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let (f_lo, f_hi) = (f(lo), f(hi));
        if f_lo == 0.0 {
            roots.push(lo);
            continue;
        }
        if different_signs(f_lo, f_hi) {
            roots.push(newton_bisect(f, df, lo, hi));
        }
    }
    if f(bound) == 0.0 {
        roots.push(bound);
    }
    // Tangency at a stationary point: the sign never flips there, so check
    // the residual directly.
    for s in &stationary {
        if f(*s).abs() <= 1e-12 * (1.0 + s.abs().powi(3)) {
            roots.push(*s);
        }
    }

    roots.sort_by(|a, b| a.partial_cmp(b).unwrap());
    roots.dedup_by(|a, b| (*a - *b).abs() <= 1e-9 * (1.0 + a.abs()));
    roots
}
