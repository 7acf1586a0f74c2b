//! Cart-pole with a member-specific pole mass, explicit Euler at 50 Hz.

pub const DT: f64 = 0.02;
pub const CART_MASS: f64 = 1.0;
pub const HALF_LENGTH: f64 = 0.5;
pub const GRAVITY: f64 = 9.8;
pub const MAX_FORCE: f64 = 10.0;
/// Bounds of `(x, θ, ẋ, θ̇)`.
pub const STATE_BOUNDS: [(f64, f64); 4] = [(-4.8, 4.8), (-0.42, 0.42), (-2.0, 2.0), (-2.0, 2.0)];

/// One step for state `(x, θ, ẋ, θ̇)` under horizontal `force` (clipped to
/// `±MAX_FORCE`). The result is clipped to [`STATE_BOUNDS`].
pub fn cart_pole_step(state: [f64; 4], force: f64, pole_mass: f64) -> [f64; 4] {
    let [x, theta, x_dot, theta_dot] = state;
    let f = force.clamp(-MAX_FORCE, MAX_FORCE);
    let total = CART_MASS + pole_mass;
    let (sin, cos) = theta.sin_cos();
    let temp = (f + pole_mass * HALF_LENGTH * theta_dot * theta_dot * sin) / total;
    let theta_acc = (GRAVITY * sin - cos * temp) / (HALF_LENGTH * (4.0 / 3.0 - pole_mass * cos * cos / total));
    let x_acc = temp - pole_mass * HALF_LENGTH * theta_acc * cos / total;
    let next = [
        x + DT * x_dot,
        theta + DT * theta_dot,
        x_dot + DT * x_acc,
        theta_dot + DT * theta_acc,
    ];
    let mut out = [0.0; 4];
    for (o, (v, (lo, hi))) in out.iter_mut().zip(next.iter().zip(STATE_BOUNDS)) {
        *o = v.clamp(lo, hi);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn upright_rest_is_an_equilibrium() {
        assert_eq!(cart_pole_step([0.0; 4], 0.0, 0.1), [0.0; 4]);
    }

    #[test]
    fn tilted_pole_falls() {
        let next = cart_pole_step([0.0, 0.05, 0.0, 0.0], 0.0, 0.1);
        assert!(next[3] > 0.0);
        let next = cart_pole_step([0.0, -0.05, 0.0, 0.0], 0.0, 0.5);
        assert!(next[3] < 0.0);
    }

    /// Lagrangian form of the same system, written independently: the
    /// coupled equations `M ẍ + m l (θ̈ cos θ − θ̇² sin θ) = F` and
    /// `(4/3) l θ̈ + ẍ cos θ = g sin θ` solved as a 2x2 linear system.
    fn reference(state: [f64; 4], force: f64, m: f64) -> [f64; 4] {
        let [x, th, xd, thd] = state;
        let big_m = CART_MASS + m;
        let (s, c) = (th.sin(), th.cos());
        let l = HALF_LENGTH;
        // [[M, m l c], [c, 4l/3]] [ẍ, θ̈]ᵀ = [F + m l θ̇² s, g s]ᵀ
        let (a11, a12, a21, a22) = (big_m, m * l * c, c, 4.0 * l / 3.0);
        let (b1, b2) = (force + m * l * thd * thd * s, GRAVITY * s);
        let det = a11 * a22 - a12 * a21;
        let xdd = (b1 * a22 - a12 * b2) / det;
        let thdd = (a11 * b2 - a21 * b1) / det;
        let raw = [x + DT * xd, th + DT * thd, xd + DT * xdd, thd + DT * thdd];
        let mut out = [0.0; 4];
        for i in 0..4 {
            out[i] = raw[i].max(STATE_BOUNDS[i].0).min(STATE_BOUNDS[i].1);
        }
        out
    }

    #[test]
    fn matches_reference_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let s = [
                rng.random_range(-4.8..4.8),
                rng.random_range(-0.42..0.42),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            ];
            let f = rng.random_range(-10.0..10.0);
            for m in [0.1, 0.2, 0.5] {
                let a = cart_pole_step(s, f, m);
                let b = reference(s, f, m);
                for i in 0..4 {
                    assert!((a[i] - b[i]).abs() < 1e-10, "{a:?} vs {b:?}");
                }
            }
        }
    }

    #[test]
    fn state_stays_within_bounds() {
        let next = cart_pole_step([4.79, 0.41, 2.0, 2.0], 10.0, 0.5);
        for (v, (lo, hi)) in next.iter().zip(STATE_BOUNDS) {
            assert!(*v >= lo && *v <= hi);
        }
    }
}
