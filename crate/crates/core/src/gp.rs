//! Single-output Gaussian-process regression with the squared-exponential kernel.
//!
//! Inputs are stored as `N x D` matrices, one point per row. All solves go
//! through a Cholesky factor of `C = K + σ²I`; when that factorization fails
//! the diagonal is escalated along [`crate::linalg::JITTER_LADDER`].

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::{self, cholesky_jittered};
use crate::optim::{self, LbfgsOptions};
use crate::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Covariance function over `D`-dimensional inputs.
pub trait Kernel: Sync {
    fn input_dim(&self) -> usize;

    /// Evaluates the kernel; callers guarantee both slices have `input_dim` entries.
    fn eval(&self, a: &[f64], b: &[f64]) -> f64;
}

/// Per-dimension length scales of the unit-amplitude SE kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeKernelParams {
    pub lengthscales: Vec<f64>,
}

impl SeKernelParams {
    pub fn new(lengthscales: Vec<f64>) -> Result<Self> {
        if lengthscales.is_empty() {
            return Err(Error::invalid("SE kernel needs at least one length scale"));
        }
        if let Some(l) = lengthscales.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
            return Err(Error::invalid(format!("length scale must be positive, got {l}")));
        }
        Ok(Self { lengthscales })
    }

    pub fn isotropic(dim: usize, lengthscale: f64) -> Result<Self> {
        Self::new(vec![lengthscale; dim])
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    /// `1 / l_d²` per dimension.
    pub fn inverse_squares(&self) -> Vec<f64> {
        self.lengthscales.iter().map(|l| 1.0 / (l * l)).collect()
    }
}

#[inline]
pub(crate) fn se_unit(a: &[f64], b: &[f64], inv_l2: &[f64]) -> f64 {
    let mut s = 0.0;
    for d in 0..inv_l2.len() {
        let diff = a[d] - b[d];
        s += diff * diff * inv_l2[d];
    }
    (-0.5 * s).exp()
}

impl Kernel for SeKernelParams {
    fn input_dim(&self) -> usize {
        self.dim()
    }

    fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut s = 0.0;
        for (d, l) in self.lengthscales.iter().enumerate() {
            let z = (a[d] - b[d]) / l;
            s += z * z;
        }
        (-0.5 * s).exp()
    }
}

/// SE kernel with a signal variance: `variance * k_SE(x, x')`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaledSe {
    pub se: SeKernelParams,
    pub variance: f64,
}

impl ScaledSe {
    pub fn new(se: SeKernelParams, variance: f64) -> Result<Self> {
        if !(variance.is_finite() && variance > 0.0) {
            return Err(Error::invalid(format!("signal variance must be positive, got {variance}")));
        }
        Ok(Self { se, variance })
    }

    pub fn unit(se: SeKernelParams) -> Self {
        Self { se, variance: 1.0 }
    }
}

impl Kernel for ScaledSe {
    fn input_dim(&self) -> usize {
        self.se.dim()
    }

    fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        self.variance * self.se.eval(a, b)
    }
}

fn check_dims(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::invalid(format!("{what}: dimension {a} does not match {b}")));
    }
    Ok(())
}

/// `exp(-Σ_d (x_d - x2_d)² / (2 l_d²))`.
pub fn se_kernel(x: &[f64], x2: &[f64], params: &SeKernelParams) -> Result<f64> {
    check_dims(x.len(), params.dim(), "se_kernel")?;
    check_dims(x2.len(), params.dim(), "se_kernel")?;
    Ok(params.eval(x, x2))
}

/// Cross-covariance matrix with entry `(i, j) = k(X[i], X2[j])`.
pub fn gram_matrix<K: Kernel>(x: &DMatrix<f64>, x2: &DMatrix<f64>, kernel: &K) -> Result<DMatrix<f64>> {
    check_dims(x.ncols(), kernel.input_dim(), "gram_matrix")?;
    check_dims(x2.ncols(), kernel.input_dim(), "gram_matrix")?;
    let rows = row_major(x);
    let rows2 = row_major(x2);
    let d = kernel.input_dim();
    Ok(DMatrix::from_fn(x.nrows(), x2.nrows(), |i, j| {
        kernel.eval(&rows[i * d..(i + 1) * d], &rows2[j * d..(j + 1) * d])
    }))
}

/// Copies an `N x D` matrix into a row-major buffer.
pub(crate) fn row_major(x: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.nrows() {
        out.extend(x.row(i).iter());
    }
    out
}

/// Training inputs, scalar targets, and observational noise variance σ².
#[derive(Clone, Debug, PartialEq)]
pub struct GpDataset {
    pub inputs: DMatrix<f64>,
    pub targets: DVector<f64>,
    pub noise_variance: f64,
}

impl GpDataset {
    pub fn new(inputs: DMatrix<f64>, targets: DVector<f64>, noise_variance: f64) -> Result<Self> {
        if inputs.nrows() != targets.len() {
            return Err(Error::invalid(format!(
                "{} inputs but {} targets",
                inputs.nrows(),
                targets.len()
            )));
        }
        if !(noise_variance >= 0.0 && noise_variance.is_finite()) {
            return Err(Error::invalid(format!("noise variance must be >= 0, got {noise_variance}")));
        }
        Ok(Self {
            inputs,
            targets,
            noise_variance,
        })
    }

    /// A dataset with no samples over `dim`-dimensional inputs.
    pub fn empty(dim: usize, noise_variance: f64) -> Self {
        Self {
            inputs: DMatrix::zeros(0, dim),
            targets: DVector::zeros(0),
            noise_variance,
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }
}

/// Posterior mean and covariance at a set of query points.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorStats {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

fn noisy_gram<K: Kernel>(data: &GpDataset, kernel: &K) -> Result<DMatrix<f64>> {
    let mut c = gram_matrix(&data.inputs, &data.inputs, kernel)?;
    for i in 0..c.nrows() {
        c[(i, i)] += data.noise_variance;
    }
    Ok(c)
}

/// Posterior statistics of the latent function at `queries`.
pub fn gp_posterior<K: Kernel>(queries: &DMatrix<f64>, data: &GpDataset, kernel: &K) -> Result<PosteriorStats> {
    if queries.nrows() == 0 {
        return Err(Error::invalid("gp_posterior needs at least one query"));
    }
    check_dims(data.dim(), kernel.input_dim(), "gp_posterior data")?;
    let kqq = gram_matrix(queries, queries, kernel)?;
    if data.is_empty() {
        return Ok(PosteriorStats {
            mean: DVector::zeros(queries.nrows()),
            covariance: kqq,
        });
    }
    let c = noisy_gram(data, kernel)?;
    let (l, _) = cholesky_jittered(&c)?;
    let ktq = gram_matrix(&data.inputs, queries, kernel)?;
    let alpha = linalg::cholesky_solve_vec(&l, &data.targets);
    let mean = ktq.transpose() * alpha;
    let mut v = ktq;
    linalg::solve_lower_mut(&l, &mut v);
    let mut covariance = kqq - v.transpose() * &v;
    linalg::symmetrize(&mut covariance);
    Ok(PosteriorStats { mean, covariance })
}

/// `log N(y; 0, C)`.
pub fn log_marginal_likelihood<K: Kernel>(data: &GpDataset, kernel: &K) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("log marginal likelihood needs data"));
    }
    let c = noisy_gram(data, kernel)?;
    let (l, _) = cholesky_jittered(&c)?;
    let alpha = linalg::cholesky_solve_vec(&l, &data.targets);
    let n = data.len() as f64;
    Ok(-0.5 * data.targets.dot(&alpha) - 0.5 * linalg::cholesky_log_det(&l) - 0.5 * n * LN_2PI)
}

/// Log marginal likelihood of a [`ScaledSe`] model and its gradient with
/// respect to `[ln l_1, .., ln l_D]`, followed by `ln variance` when
/// `with_variance` is set.
pub fn log_marginal_likelihood_grad(
    data: &GpDataset,
    kernel: &ScaledSe,
    with_variance: bool,
) -> Result<(f64, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::invalid("log marginal likelihood needs data"));
    }
    let n = data.len();
    let dim = kernel.se.dim();
    check_dims(data.dim(), dim, "log_marginal_likelihood_grad")?;
    let x = row_major(&data.inputs);
    let inv_l2 = kernel.se.inverse_squares();

    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = kernel.variance;
        for j in 0..i {
            let v = kernel.variance * se_unit(&x[i * dim..(i + 1) * dim], &x[j * dim..(j + 1) * dim], &inv_l2);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    let mut c = k.clone();
    for i in 0..n {
        c[(i, i)] += data.noise_variance;
    }
    let (l, _) = cholesky_jittered(&c)?;
    let alpha = linalg::cholesky_solve_vec(&l, &data.targets);
    let lml = -0.5 * data.targets.dot(&alpha) - 0.5 * linalg::cholesky_log_det(&l) - 0.5 * n as f64 * LN_2PI;

    // dLML/dθ = ½ tr((ααᵀ - C⁻¹) dC/dθ)
    let c_inv = linalg::cholesky_solve(&l, &DMatrix::identity(n, n));
    let mut grad = vec![0.0; dim + usize::from(with_variance)];
    let mut var_acc = 0.0;
    for j in 0..n {
        for i in 0..n {
            let a = alpha[i] * alpha[j] - c_inv[(i, j)];
            let w = a * k[(i, j)];
            if i != j {
                for d in 0..dim {
                    let diff = x[i * dim + d] - x[j * dim + d];
                    grad[d] += w * diff * diff * inv_l2[d];
                }
            }
            var_acc += w;
        }
    }
    for g in grad.iter_mut().take(dim) {
        *g *= 0.5;
    }
    if with_variance {
        grad[dim] = 0.5 * var_acc;
    }
    Ok((lml, grad))
}

/// Settings for multi-start evidence maximization.
#[derive(Clone, Debug)]
pub struct OptimizeOptions {
    pub restarts: usize,
    pub seed: u64,
    /// Also optimize the signal variance (otherwise held at its initial value).
    pub fit_variance: bool,
    /// Range for fresh log-uniform length-scale draws on restarts after the first.
    pub init_range: (f64, f64),
    pub lengthscale_bounds: (f64, f64),
    pub variance_bounds: (f64, f64),
    pub lbfgs: LbfgsOptions,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        Self {
            restarts: 5,
            seed: 0,
            fit_variance: false,
            init_range: (0.1, 2.0),
            lengthscale_bounds: (1e-2, 1e2),
            variance_bounds: (1e-6, 1e12),
            lbfgs: LbfgsOptions {
                max_iters: 100,
                grad_tol: 1e-5,
                ..Default::default()
            },
        }
    }
}

/// Result of an evidence maximization.
#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub kernel: ScaledSe,
    pub log_likelihood: f64,
}

/// Draws a length scale log-uniformly from `range`.
pub(crate) fn log_uniform(rng: &mut impl Rng, range: (f64, f64)) -> f64 {
    let (lo, hi) = (range.0.ln(), range.1.ln());
    (lo + (hi - lo) * rng.random::<f64>()).exp()
}

/// Multi-start L-BFGS over log length scales (and log variance). The first
/// restart starts from `init`; later ones draw length scales log-uniformly.
/// A failing restart is discarded. The returned kernel is never worse than
/// `init`.
pub fn optimize_kernel(data: &GpDataset, init: &ScaledSe, opts: &OptimizeOptions) -> Result<FitOutcome> {
    if opts.restarts == 0 {
        return Err(Error::invalid("restarts must be >= 1"));
    }
    if data.is_empty() {
        return Err(Error::invalid("cannot fit hyperparameters without data"));
    }
    let dim = init.se.dim();
    check_dims(data.dim(), dim, "optimize_kernel")?;
    let with_var = opts.fit_variance;
    let mut bounds = vec![(opts.lengthscale_bounds.0.ln(), opts.lengthscale_bounds.1.ln()); dim];
    if with_var {
        bounds.push((opts.variance_bounds.0.ln(), opts.variance_bounds.1.ln()));
    }

    let unpack = |x: &[f64]| ScaledSe {
        se: SeKernelParams {
            lengthscales: x[..dim].iter().map(|v| v.exp()).collect(),
        },
        variance: if with_var { x[dim].exp() } else { init.variance },
    };
    let objective = |x: &[f64]| {
        let kernel = unpack(x);
        let (lml, g) = log_marginal_likelihood_grad(data, &kernel, with_var).ok()?;
        Some((-lml, g.into_iter().map(|v| -v).collect()))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<FitOutcome> = log_marginal_likelihood(data, init)
        .ok()
        .filter(|v| v.is_finite())
        .map(|lml| FitOutcome {
            kernel: init.clone(),
            log_likelihood: lml,
        });
    let mut failures = Vec::new();
    for restart in 0..opts.restarts {
        let mut x0: Vec<f64> = if restart == 0 {
            init.se.lengthscales.iter().map(|l| l.ln()).collect()
        } else {
            (0..dim).map(|_| log_uniform(&mut rng, opts.init_range).ln()).collect()
        };
        if with_var {
            x0.push(init.variance.ln());
        }
        match optim::minimize(objective, &x0, &bounds, &opts.lbfgs) {
            Ok(min) => {
                let lml = -min.value;
                if best.as_ref().is_none_or(|b| lml > b.log_likelihood) {
                    best = Some(FitOutcome {
                        kernel: unpack(&min.x),
                        log_likelihood: lml,
                    });
                }
            }
            Err(e) => {
                log::debug!("restart {restart} discarded: {e}");
                failures.push(e.to_string());
            }
        }
    }
    best.ok_or_else(|| Error::Optimization(format!("all restarts failed: {}", failures.join("; "))))
}

/// Evidence maximization for a unit-variance SE kernel.
pub fn optimize_hyperparameters(data: &GpDataset, init: &SeKernelParams, restarts: usize) -> Result<SeKernelParams> {
    let opts = OptimizeOptions {
        restarts,
        ..Default::default()
    };
    Ok(optimize_kernel(data, &ScaledSe::unit(init.clone()), &opts)?.kernel.se)
}

/// A GP conditioned on a dataset, ready for repeated prediction.
#[derive(Clone, Debug)]
pub struct GpModel {
    kernel: ScaledSe,
    inv_l2: Vec<f64>,
    inputs: Vec<f64>,
    n: usize,
    dim: usize,
    noise_variance: f64,
    l: DMatrix<f64>,
    alpha: DVector<f64>,
    jitter: f64,
}

impl GpModel {
    pub fn fit(data: &GpDataset, kernel: ScaledSe) -> Result<Self> {
        let dim = kernel.se.dim();
        check_dims(data.dim(), dim, "GpModel::fit")?;
        let (l, jitter) = if data.is_empty() {
            (DMatrix::zeros(0, 0), 0.0)
        } else {
            cholesky_jittered(&noisy_gram(data, &kernel)?)?
        };
        let alpha = linalg::cholesky_solve_vec(&l, &data.targets);
        Ok(Self {
            inv_l2: kernel.se.inverse_squares(),
            kernel,
            inputs: row_major(&data.inputs),
            n: data.len(),
            dim,
            noise_variance: data.noise_variance,
            l,
            alpha,
            jitter,
        })
    }

    pub fn kernel(&self) -> &ScaledSe {
        &self.kernel
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Jitter that had to be added to the diagonal to factorize.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// `C⁻¹ y`.
    pub fn weights(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn inputs(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.dim, &self.inputs)
    }

    /// Lower Cholesky factor of the training covariance.
    pub fn factor(&self) -> &DMatrix<f64> {
        &self.l
    }

    /// Posterior mean and variance of the latent function at `x`.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        debug_assert_eq!(x.len(), self.dim);
        let mut k: Vec<f64> = (0..self.n)
            .map(|i| self.kernel.variance * se_unit(&self.inputs[i * self.dim..(i + 1) * self.dim], x, &self.inv_l2))
            .collect();
        let mean: f64 = k.iter().zip(self.alpha.iter()).map(|(a, b)| a * b).sum();
        linalg::forward_substitute(&self.l, &mut k);
        let reduction: f64 = k.iter().map(|v| v * v).sum();
        (mean, (self.kernel.variance - reduction).max(0.0))
    }

    pub fn predict_mean(&self, x: &[f64]) -> f64 {
        (0..self.n)
            .map(|i| self.kernel.variance * se_unit(&self.inputs[i * self.dim..(i + 1) * self.dim], x, &self.inv_l2) * self.alpha[i])
            .sum()
    }

    pub fn posterior(&self, queries: &DMatrix<f64>) -> Result<PosteriorStats> {
        check_dims(queries.ncols(), self.dim, "GpModel::posterior")?;
        let kqq = gram_matrix(queries, queries, &self.kernel)?;
        if self.n == 0 {
            return Ok(PosteriorStats {
                mean: DVector::zeros(queries.nrows()),
                covariance: kqq,
            });
        }
        let ktq = gram_matrix(&self.inputs(), queries, &self.kernel)?;
        let mean = ktq.transpose() * &self.alpha;
        let mut v = ktq;
        linalg::solve_lower_mut(&self.l, &mut v);
        let mut covariance = kqq - v.transpose() * &v;
        linalg::symmetrize(&mut covariance);
        Ok(PosteriorStats { mean, covariance })
    }
}
