//! Fine-grained two-vehicle simulations that validate barrier-constraint
//! algebra by forward invariance: the follower applies a nominal control
//! clipped to the barrier bound, and the minimum barrier value over the run
//! is reported.

pub struct FollowScenario {
    pub x_leader: f64,
    pub v_leader: f64,
    /// Leader control as a function of time.
    pub u_leader: fn(f64) -> f64,
    pub x_follower: f64,
    pub v_follower: f64,
    /// Follower's nominal (desired) control before the safety clip.
    pub u_nominal: f64,
    pub u_min: f64,
    pub u_max: f64,
}

fn integrate(x: &mut f64, v: &mut f64, u: f64, dt: f64) {
    *x += *v * dt + 0.5 * u * dt * dt;
    *v = (*v + u * dt).max(0.0);
}

/// Rear-end pair: barrier b1 = (xp - xi) - phi*vi - delta, follower control
/// clipped to the bound from `vp - vi - phi*u + k1*b1 >= 0`. Returns the
/// minimum b1 observed over `duration` at step `dt`.
pub fn rear_end_min_barrier(sc: &FollowScenario, k1: f64, phi: f64, delta: f64, dt: f64, duration: f64) -> f64 {
    let (mut xp, mut vp) = (sc.x_leader, sc.v_leader);
    let (mut xi, mut vi) = (sc.x_follower, sc.v_follower);
    let mut min_b = f64::INFINITY;
    let steps = (duration / dt).round() as usize;
    for step in 0..steps {
        let t = step as f64 * dt;
        let b1 = (xp - xi) - phi * vi - delta;
        min_b = min_b.min(b1);
        let bound = (vp - vi + k1 * b1) / phi;
        let u = sc.u_nominal.min(bound).clamp(sc.u_min, sc.u_max);
        let up = (sc.u_leader)(t);
        integrate(&mut xp, &mut vp, up, dt);
        integrate(&mut xi, &mut vi, u, dt);
    }
    min_b
}

/// Merge pair: barrier b2 = (x_im1 - xi) - phi2*xi*vi - delta; the condition
/// `v_im1 - vi - phi2*vi^2 - phi2*xi*u + k2*b2 >= 0` bounds u whenever xi > 0.
/// Runs until the follower reaches `length` (the merging point) or `duration`
/// elapses; returns the minimum b2 observed.
pub fn merge_min_barrier(
    sc: &FollowScenario,
    k2: f64,
    phi2: f64,
    delta: f64,
    length: f64,
    dt: f64,
    duration: f64,
) -> f64 {
    let (mut xm, mut vm) = (sc.x_leader, sc.v_leader);
    let (mut xi, mut vi) = (sc.x_follower, sc.v_follower);
    let mut min_b = f64::INFINITY;
    let steps = (duration / dt).round() as usize;
    for step in 0..steps {
        if xi >= length {
            break;
        }
        let t = step as f64 * dt;
        let b2 = (xm - xi) - phi2 * xi * vi - delta;
        min_b = min_b.min(b2);
        let slack = vm - vi - phi2 * vi * vi + k2 * b2;
        let u = if phi2 * xi > 1e-12 {
            sc.u_nominal.min(slack / (phi2 * xi)).clamp(sc.u_min, sc.u_max)
        } else {
            sc.u_nominal.clamp(sc.u_min, sc.u_max)
        };
        let um = (sc.u_leader)(t);
        integrate(&mut xm, &mut vm, um, dt);
        integrate(&mut xi, &mut vi, u, dt);
    }
    min_b
}
