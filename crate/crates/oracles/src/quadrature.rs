//! Composite Simpson quadrature for cost cross-checks.

pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = if n % 2 == 0 { n } else { n + 1 };
    let h = (b - a) / n as f64;
    if h == 0.0 {
        return 0.0;
    }
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

pub fn trapezoid(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    if h == 0.0 {
        return 0.0;
    }
    let mut acc = 0.5 * (f(a) + f(b));
    for i in 1..n {
        acc += f(a + i as f64 * h);
    }
    acc * h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integrates_quadratic_exactly() {
        let v = simpson(|x| x * x, 0.0, 3.0, 10);
        assert!((v - 9.0).abs() < 1e-12);
    }

    #[test]
    fn trapezoid_converges() {
        let v = trapezoid(|x| x.sin(), 0.0, std::f64::consts::PI, 20000);
        assert!((v - 2.0).abs() < 1e-7);
    }
}
