use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::model::GaussianState;
use crate::gp::{optimize_kernel, row_major, GpDataset, GpModel, OptimizeOptions, ScaledSe, SeKernelParams};
use crate::{Error, Result};

/// Observation noise of the value GP.
pub const VALUE_NOISE_VARIANCE: f64 = 0.1;

/// Bell-shaped reward around a goal state.
///
/// Planning uses the multivariate Gaussian density
/// `R(s) = a |2π σ_R² I|^{-1/2} exp(-‖s - g‖² / (2σ_R²))` over the active
/// dimensions, with amplitude `a = 1` by default. A scalar `1/√(2πσ_R)`
/// prefactor is the other common convention; it corresponds to a different
/// positive `a`, which leaves every greedy action unchanged but rescales
/// values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub goal: Vec<f64>,
    pub width: f64,
    /// State features the reward depends on.
    pub dims: Vec<usize>,
    #[serde(default = "unit")]
    pub amplitude: f64,
}

fn unit() -> f64 {
    1.0
}

impl RewardSpec {
    pub fn new(goal: Vec<f64>, width: f64) -> Result<Self> {
        let dims = (0..goal.len()).collect();
        Self::with_dims(goal, width, dims)
    }

    /// Reward that only looks at `dims`; `goal` is still a full state vector.
    pub fn with_dims(goal: Vec<f64>, width: f64, dims: Vec<usize>) -> Result<Self> {
        if !(width > 0.0) || !width.is_finite() {
            return Err(Error::invalid("reward width must be positive"));
        }
        if dims.is_empty() || dims.iter().any(|&d| d >= goal.len()) {
            return Err(Error::invalid("reward dimensions must index the goal state"));
        }
        Ok(Self {
            goal,
            width,
            dims,
            amplitude: 1.0,
        })
    }

    /// `a (2π σ_R²)^{-D/2}`, the largest attainable reward.
    pub fn peak(&self) -> f64 {
        self.amplitude * (2.0 * PI * self.width * self.width).powf(-0.5 * self.dims.len() as f64)
    }

    /// Deterministic reward at a state.
    pub fn reward(&self, state: &[f64]) -> f64 {
        expected_reward(&GaussianState::point(state), self)
    }
}

/// `E[R(s')]` for `s' ~ N(μ, Σ)` with diagonal `Σ`.
pub fn expected_reward(g: &GaussianState, r: &RewardSpec) -> f64 {
    let s2 = r.width * r.width;
    let mut log = 0.0;
    for &d in &r.dims {
        let c = g.variance[d] + s2;
        let diff = r.goal[d] - g.mean[d];
        log -= 0.5 * ((2.0 * PI * c).ln() + diff * diff / c);
    }
    r.amplitude * log.exp()
}

/// GP over support states holding the current value estimate.
#[derive(Clone, Debug)]
pub struct ValueModel {
    gp: GpModel,
    supports: DMatrix<f64>,
    rows: Vec<f64>,
    values: DVector<f64>,
}

impl ValueModel {
    /// Conditions a value GP with a fixed kernel on `(supports, values)`.
    pub fn fit(supports: &DMatrix<f64>, values: &DVector<f64>, kernel: ScaledSe) -> Result<Self> {
        let data = GpDataset::new(supports.clone(), values.clone(), VALUE_NOISE_VARIANCE)?;
        Ok(Self {
            gp: GpModel::fit(&data, kernel)?,
            rows: row_major(supports),
            supports: supports.clone(),
            values: values.clone(),
        })
    }

    /// Fits the kernel by evidence maximization, the first restart starting
    /// from `init`. The signal variance stays at its `init` value unless
    /// `fit_variance` is set.
    pub fn fit_optimized(
        supports: &DMatrix<f64>,
        values: &DVector<f64>,
        init: &ScaledSe,
        fit_variance: bool,
        restarts: usize,
        seed: u64,
    ) -> Result<Self> {
        let data = GpDataset::new(supports.clone(), values.clone(), VALUE_NOISE_VARIANCE)?;
        let opts = OptimizeOptions {
            restarts,
            seed,
            fit_variance,
            ..Default::default()
        };
        let fit = optimize_kernel(&data, init, &opts)?;
        Self::fit(supports, values, fit.kernel)
    }

    /// Starting kernel for a fresh value GP: unit length scales.
    pub fn initial_kernel(dim: usize) -> Result<ScaledSe> {
        Ok(ScaledSe::unit(SeKernelParams::isotropic(dim, 1.0)?))
    }

    pub fn kernel(&self) -> &ScaledSe {
        self.gp.kernel()
    }

    pub fn gp(&self) -> &GpModel {
        &self.gp
    }

    pub fn supports(&self) -> &DMatrix<f64> {
        &self.supports
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.supports.ncols()
    }

    pub fn predict(&self, state: &[f64]) -> (f64, f64) {
        self.gp.predict(state)
    }

    /// Mean posterior standard deviation over `points` (one per row).
    pub fn mean_posterior_sd(&self, points: &DMatrix<f64>) -> f64 {
        let n = points.nrows();
        let sum: f64 = (0..n)
            .map(|i| {
                let x: Vec<f64> = points.row(i).iter().copied().collect();
                self.predict(&x).1.sqrt()
            })
            .sum();
        sum / n.max(1) as f64
    }

    fn row_into(&self, g: &GaussianState, out: &mut [f64]) {
        let k = self.kernel();
        let dim = self.dim();
        let mut scale = k.variance;
        let mut inv = Vec::with_capacity(dim);
        for (d, l) in k.se.lengthscales.iter().enumerate() {
            let l2 = l * l;
            scale /= (1.0 + g.variance[d] / l2).sqrt();
            inv.push(1.0 / (g.variance[d] + l2));
        }
        for (j, o) in out.iter_mut().enumerate() {
            let s = &self.rows[j * dim..(j + 1) * dim];
            let mut q = 0.0;
            for d in 0..dim {
                let diff = g.mean[d] - s[d];
                q += diff * diff * inv[d];
            }
            *o = scale * (-0.5 * q).exp();
        }
    }

    /// `E[V(s')]` for `s' ~ N(μ, Σ)` without materializing the row.
    pub fn expected_value(&self, g: &GaussianState) -> f64 {
        let k = self.kernel();
        let dim = self.dim();
        let mut scale = k.variance;
        let mut inv = Vec::with_capacity(dim);
        for (d, l) in k.se.lengthscales.iter().enumerate() {
            let l2 = l * l;
            scale /= (1.0 + g.variance[d] / l2).sqrt();
            inv.push(1.0 / (g.variance[d] + l2));
        }
        let beta = self.gp.weights();
        let mut acc = 0.0;
        for (j, b) in beta.iter().enumerate() {
            let s = &self.rows[j * dim..(j + 1) * dim];
            let mut q = 0.0;
            for d in 0..dim {
                let diff = g.mean[d] - s[d];
                q += diff * diff * inv[d];
            }
            acc += b * (-0.5 * q).exp();
        }
        scale * acc
    }
}

/// Kernel expectations `row_j = ∫ k_V(s', s_j) N(s'; μ, Σ) ds'` against every
/// support state, and the expected value-GP mean `row · C_V⁻¹ v`.
pub fn expected_value_row(g: &GaussianState, v: &ValueModel) -> (Vec<f64>, f64) {
    let mut row = vec![0.0; v.supports.nrows()];
    v.row_into(g, &mut row);
    let value = row.iter().zip(v.gp.weights().iter()).map(|(a, b)| a * b).sum();
    (row, value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random_value_model(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> ValueModel {
        let s = DMatrix::from_fn(n, dim, |_, _| rng.random_range(-1.0..1.0));
        let v = DVector::from_fn(n, |_, _| rng.random_range(0.0..10.0));
        let k = ScaledSe::new(
            SeKernelParams::new((0..dim).map(|_| rng.random_range(0.3..1.0)).collect()).unwrap(),
            rng.random_range(1.0..20.0),
        )
        .unwrap();
        ValueModel::fit(&s, &v, k).unwrap()
    }

    #[test]
    fn peak_reward_at_goal() {
        let r = RewardSpec::new(vec![0.2, -0.4], 0.05).unwrap();
        let v = expected_reward(&GaussianState::point(&[0.2, -0.4]), &r);
        assert!((v - 63.661_977_236_758_13).abs() < 1e-9);
        assert!((r.peak() - v).abs() < 1e-12);
    }

    #[test]
    fn reward_vanishes_with_large_variance() {
        let r = RewardSpec::new(vec![0.0, 0.0], 0.05).unwrap();
        let g = GaussianState::new(vec![0.0, 0.0], vec![1e12, 0.0]).unwrap();
        assert!(expected_reward(&g, &r) < 1e-4);
    }

    #[test]
    fn reward_ignores_inactive_dims() {
        let r = RewardSpec::with_dims(vec![0.0, 0.0, 0.5], 0.1, vec![2]).unwrap();
        let a = r.reward(&[0.9, -0.9, 0.5]);
        let b = r.reward(&[-0.3, 0.1, 0.5]);
        assert_eq!(a, b);
        assert!((a - r.peak()).abs() < 1e-12);
        assert!(RewardSpec::with_dims(vec![0.0], 0.1, vec![1]).is_err());
        assert!(RewardSpec::new(vec![0.0], 0.0).is_err());
    }

    #[test]
    fn expected_reward_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..3 {
            let r = RewardSpec::new(vec![rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)], rng.random_range(0.1..0.5)).unwrap();
            let mean: Vec<f64> = (0..2).map(|d| r.goal[d] + rng.random_range(-0.2..0.2)).collect();
            let var: Vec<f64> = (0..2).map(|_| rng.random_range(0.001..0.05)).collect();
            let g = GaussianState::new(mean.clone(), var.clone()).unwrap();
            let n = 200_000;
            let mut acc = 0.0;
            for _ in 0..n {
                let s: Vec<f64> = (0..2)
                    .map(|d| Normal::new(mean[d], var[d].sqrt()).unwrap().sample(&mut rng))
                    .collect();
                acc += r.reward(&s);
            }
            let mc = acc / n as f64;
            let exact = expected_reward(&g, &r);
            assert!((mc - exact).abs() / exact < 0.02, "mc {mc} exact {exact}");
        }
    }

    #[test]
    fn point_mass_row_is_kernel_and_value_is_posterior_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = random_value_model(&mut rng, 15, 2);
        let x = [0.1, -0.3];
        let (row, value) = expected_value_row(&GaussianState::point(&x), &v);
        let k = v.kernel();
        for j in 0..15 {
            let s: Vec<f64> = v.supports().row(j).iter().copied().collect();
            assert!((row[j] - crate::gp::Kernel::eval(k, &x, &s)).abs() < 1e-12);
        }
        assert!((value - v.predict(&x).0).abs() < 1e-9);
        assert!((v.expected_value(&GaussianState::point(&x)) - value).abs() < 1e-9);
    }

    #[test]
    fn row_vanishes_for_huge_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let v = random_value_model(&mut rng, 10, 2);
        let g = GaussianState::new(vec![0.0, 0.0], vec![1e12, 1e12]).unwrap();
        assert!(expected_value_row(&g, &v).0.iter().all(|r| r.abs() < 1e-8));
    }

    #[test]
    fn expected_row_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let v = random_value_model(&mut rng, 6, 2);
        let mean = vec![0.2, -0.1];
        let var = vec![0.04, 0.1];
        let g = GaussianState::new(mean.clone(), var.clone()).unwrap();
        let (row, _) = expected_value_row(&g, &v);
        let n = 200_000;
        let mut acc = [0.0; 6];
        for _ in 0..n {
            let s: Vec<f64> = (0..2).map(|d| Normal::new(mean[d], var[d].sqrt()).unwrap().sample(&mut rng)).collect();
            for (j, a) in acc.iter_mut().enumerate() {
                let sj: Vec<f64> = v.supports().row(j).iter().copied().collect();
                *a += crate::gp::Kernel::eval(v.kernel(), &s, &sj);
            }
        }
        for j in 0..6 {
            let mc = acc[j] / n as f64;
            assert!((mc - row[j]).abs() / row[j] < 0.01, "j {j}: mc {mc} exact {}", row[j]);
        }
    }

    #[test]
    fn value_gp_with_fitted_amplitude_interpolates_supports() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = DMatrix::from_fn(60, 2, |_, _| rng.random_range(-1.0..1.0));
        let values = DVector::from_fn(60, |i, _| {
            let d: f64 = s[(i, 0)] - 0.5;
            3000.0 * (-4.0 * d * d).exp() + 100.0 * s[(i, 1)]
        });
        let init = ValueModel::initial_kernel(2).unwrap();
        let v = ValueModel::fit_optimized(&s, &values, &init, true, 3, 1).unwrap();
        for i in 0..60 {
            let x: Vec<f64> = s.row(i).iter().copied().collect();
            assert!((v.predict(&x).0 - values[i]).abs() <= 3.0 * VALUE_NOISE_VARIANCE.sqrt());
        }
    }
}
