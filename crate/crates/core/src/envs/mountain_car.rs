//! Continuous mountain car with a member-specific engine power.

pub const GRAVITY: f64 = 0.0025;
pub const POSITION_BOUNDS: (f64, f64) = (-1.1, 0.55);
pub const MAX_SPEED: f64 = 0.07;

/// One step of the car on the `cos(3p)` hill. `action` is the throttle in
/// `[-1, 1]` and is clipped. Hitting either end of the track stops the car.
pub fn mountain_car_step(state: [f64; 2], action: f64, power: f64) -> [f64; 2] {
    let [p, v] = state;
    let a = action.clamp(-1.0, 1.0);
    let mut v2 = (v + a * power - GRAVITY * (3.0 * p).cos()).clamp(-MAX_SPEED, MAX_SPEED);
    let p2 = (p + v2).clamp(POSITION_BOUNDS.0, POSITION_BOUNDS.1);
    if p2 <= POSITION_BOUNDS.0 || p2 >= POSITION_BOUNDS.1 {
        v2 = 0.0;
    }
    [p2, v2]
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn flat_point_is_an_equilibrium() {
        // cos(3p) = 0 at p = -π/6
        let p = -PI / 6.0;
        let next = mountain_car_step([p, 0.0], 0.0, 1.5e-3);
        assert!((next[0] - p).abs() < 1e-15);
        assert!(next[1].abs() < 1e-18);
    }

    #[test]
    fn hand_evaluated_step() {
        // v' = 0 + 1.5e-3 - 0.0025 cos(-1.5), p' = -0.5 + v'
        let next = mountain_car_step([-0.5, 0.0], 1.0, 1.5e-3);
        let v = 1.5e-3 - 0.0025 * (-1.5f64).cos();
        assert!((next[1] - v).abs() < 1e-16);
        assert!((next[1] - 0.001_323_156_9).abs() < 1e-10);
        assert!((next[0] - (-0.5 + v)).abs() < 1e-16);
    }

    #[test]
    fn velocity_increases_with_action() {
        let mut last = f64::NEG_INFINITY;
        for i in 0..=20 {
            let a = -1.0 + 0.1 * i as f64;
            let v = mountain_car_step([-0.3, 0.01], a, 1e-3)[1];
            assert!(v > last);
            last = v;
        }
    }

    #[test]
    fn walls_clip_and_stop() {
        let left = mountain_car_step([-1.09, -0.05], -1.0, 1.5e-3);
        assert_eq!(left, [POSITION_BOUNDS.0, 0.0]);
        let right = mountain_car_step([0.54, 0.06], 1.0, 1.5e-3);
        assert_eq!(right, [POSITION_BOUNDS.1, 0.0]);
        let fast = mountain_car_step([0.0, 0.0699], 1.0, 1.5e-3);
        assert!(fast[1] <= MAX_SPEED);
    }
}
