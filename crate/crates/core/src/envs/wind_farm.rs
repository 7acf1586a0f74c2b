//! Two turbines in a row with wake steering.
//!
//! An analytic surrogate replaces a full wake simulator. The upstream rotor
//! produces `η P₀ cos³(γ₁)`. Its wake has a Gaussian lateral profile of width
//! `σ_w` whose centre is pushed sideways by `k_d · spacing · sin(γ₁)` at the
//! downstream rotor, so the downstream inflow is `U (1 − A exp(−δ²/(2σ_w²)))`
//! and its power is `P₀ (inflow / U)³ cos³(γ₂)`. Misaligning the upstream
//! rotor costs it power but lets more wind reach the downstream one.

use serde::{Deserialize, Serialize};

pub const YAW_LIMIT_DEG: f64 = 45.0;
pub const POWER_BOUNDS_MW: (f64, f64) = (0.5, 1.05);

/// Frozen surrogate coefficients, calibrated for a 6 m/s free stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WakeSurrogate {
    /// Power of one aligned turbine in free stream, MW.
    pub rated_power_mw: f64,
    /// Centre-line velocity deficit at the downstream rotor.
    pub deficit: f64,
    /// Turbine spacing, m.
    pub spacing_m: f64,
    /// Lateral wake deflection per unit `spacing · sin(γ₁)`.
    pub deflection_gain: f64,
    /// Gaussian wake half-width at the downstream rotor, m.
    pub wake_width_m: f64,
}

impl Default for WakeSurrogate {
    fn default() -> Self {
        Self {
            rated_power_mw: 0.62,
            deficit: 0.2,
            spacing_m: 100.0,
            deflection_gain: 1.2,
            wake_width_m: 25.0,
        }
    }
}

impl WakeSurrogate {
    /// Unclipped total power (MW) for yaws in degrees; `efficiency` scales
    /// the upstream generator only.
    pub fn raw_power(&self, yaw1_deg: f64, yaw2_deg: f64, efficiency: f64) -> f64 {
        let (y1, y2) = (yaw1_deg.to_radians(), yaw2_deg.to_radians());
        let upstream = efficiency * self.rated_power_mw * y1.cos().powi(3);
        let offset = self.deflection_gain * self.spacing_m * y1.sin();
        let inflow = 1.0 - self.deficit * (-(offset * offset) / (2.0 * self.wake_width_m * self.wake_width_m)).exp();
        let downstream = self.rated_power_mw * inflow.powi(3) * y2.cos().powi(3);
        upstream + downstream
    }

    /// Total power clipped to the state range.
    pub fn power(&self, yaw1_deg: f64, yaw2_deg: f64, efficiency: f64) -> f64 {
        self.raw_power(yaw1_deg, yaw2_deg, efficiency)
            .clamp(POWER_BOUNDS_MW.0, POWER_BOUNDS_MW.1)
    }

    /// Exhaustive search over integer yaw pairs. Returns `(yaw1, yaw2, power)`;
    /// ties keep the first pair in row-major order from `-45`.
    pub fn grid_optimum(&self, efficiency: f64) -> (f64, f64, f64) {
        let lim = YAW_LIMIT_DEG as i32;
        let mut best = (0.0, 0.0, f64::NEG_INFINITY);
        for a in -lim..=lim {
            for b in -lim..=lim {
                let p = self.power(a as f64, b as f64, efficiency);
                if p > best.2 {
                    best = (a as f64, b as f64, p);
                }
            }
        }
        best
    }
}

/// Applies yaw changes (degrees, clipped to `±1` each) and recomputes power.
/// State is `(yaw₁, yaw₂, total power)`.
pub fn wind_farm_step(state: [f64; 3], action: [f64; 2], efficiency: f64, wake: &WakeSurrogate) -> [f64; 3] {
    let y1 = (state[0] + action[0].clamp(-1.0, 1.0)).clamp(-YAW_LIMIT_DEG, YAW_LIMIT_DEG);
    let y2 = (state[1] + action[1].clamp(-1.0, 1.0)).clamp(-YAW_LIMIT_DEG, YAW_LIMIT_DEG);
    [y1, y2, wake.power(y1, y2, efficiency)]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aligned_baseline_below_goal() {
        let w = WakeSurrogate::default();
        let p = w.power(0.0, 0.0, 1.0);
        // 0.62 + 0.62 * 0.8³
        assert!((p - 0.937_44).abs() < 1e-12);
        assert!(p < 1.07);
    }

    #[test]
    fn efficiency_scales_upstream_term() {
        let w = WakeSurrogate::default();
        for (y1, y2) in [(0.0, 0.0), (15.0, -3.0), (-30.0, 10.0)] {
            let full = w.raw_power(y1, y2, 1.0);
            let low = w.raw_power(y1, y2, 0.8);
            let upstream = 0.62 * f64::cos(f64::to_radians(y1)).powi(3);
            assert!((full - low - 0.2 * upstream).abs() < 1e-12);
        }
    }

    #[test]
    fn steering_beats_alignment() {
        let w = WakeSurrogate::default();
        let (y1, y2, p) = w.grid_optimum(1.0);
        assert!(p > w.power(0.0, 0.0, 1.0));
        assert!(y1 != 0.0);
        assert_eq!(y2, 0.0);
        assert!(p <= POWER_BOUNDS_MW.1 && p > 1.03, "optimum {p}");
    }

    #[test]
    fn power_decreases_with_downstream_yaw() {
        let w = WakeSurrogate::default();
        let mut last = f64::INFINITY;
        for y2 in 0..=45 {
            let p = w.raw_power(0.0, y2 as f64, 1.0);
            assert!(p < last);
            last = p;
            assert!((w.raw_power(0.0, -(y2 as f64), 1.0) - p).abs() < 1e-12);
        }
    }

    #[test]
    fn power_stays_in_range() {
        let w = WakeSurrogate::default();
        for a in -45..=45 {
            for b in -45..=45 {
                for eff in [0.8, 0.9, 1.0] {
                    let p = w.power(a as f64, b as f64, eff);
                    assert!((POWER_BOUNDS_MW.0..=POWER_BOUNDS_MW.1).contains(&p));
                }
            }
        }
    }

    #[test]
    fn step_moves_yaws_and_recomputes_power() {
        let w = WakeSurrogate::default();
        let s = wind_farm_step([44.5, -3.0, 0.9], [1.0, -1.0], 1.0, &w);
        assert_eq!(s[0], 45.0);
        assert_eq!(s[1], -4.0);
        assert_eq!(s[2], w.power(45.0, -4.0, 1.0));
    }
}
