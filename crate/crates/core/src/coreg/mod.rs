//! Sparse coregionalization across fleet members.
//!
//! The target's transition function is modelled as
//! `τ_t = Σ_s w_{t,s} g_s + α_t l_t` and each source as `τ_s = w_{s,s} g_s + α_s l_s`,
//! with every latent component an independent unit SE process. The resulting
//! fleet kernel is `k_SE(x, x') G[m, m']` with
//! `G = Σ_s w_s w_sᵀ + diag(α²)`, where `w_s` is nonzero only at `t` and `s`.
//! Two distinct sources therefore never covary, which is what makes the
//! training covariance block-arrow shaped (see [`block_arrow`]).

pub mod block_arrow;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gp::{self, row_major, se_unit, GpDataset, Kernel, PosteriorStats, SeKernelParams};
use crate::optim::{self, LbfgsOptions};
use crate::{Error, Result};

pub use block_arrow::{block_arrow_solve, ArrowInverseBlocks, BlockArrow, BlockArrowFactor};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Coupling weights of one source: `w_{t,s}` on the target and `w_{s,s}` on itself.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceWeights {
    pub source: usize,
    pub target_weight: f64,
    pub source_weight: f64,
}

/// Hyperparameters `θ^(t)` of a target-specific fleet kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FleetKernelParams {
    pub se: SeKernelParams,
    pub target: usize,
    /// One entry per source, in ascending member id.
    pub sources: Vec<SourceWeights>,
    /// `α_m` for every member.
    pub alphas: Vec<f64>,
}

impl FleetKernelParams {
    pub fn new(se: SeKernelParams, target: usize, sources: Vec<SourceWeights>, alphas: Vec<f64>) -> Result<Self> {
        let p = Self {
            se,
            target,
            sources,
            alphas,
        };
        p.validate()?;
        Ok(p)
    }

    /// Uniform weights: every `w` equal to `weight`, every `α` equal to `alpha`.
    pub fn uniform(se: SeKernelParams, members: usize, target: usize, weight: f64, alpha: f64) -> Result<Self> {
        let sources = (0..members)
            .filter(|&m| m != target)
            .map(|source| SourceWeights {
                source,
                target_weight: weight,
                source_weight: weight,
            })
            .collect();
        Self::new(se, target, sources, vec![alpha; members])
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.alphas.len();
        if m == 0 || self.target >= m {
            return Err(Error::invalid(format!("target {} outside fleet of {m}", self.target)));
        }
        let expected: Vec<usize> = (0..m).filter(|&s| s != self.target).collect();
        let got: Vec<usize> = self.sources.iter().map(|s| s.source).collect();
        if got != expected {
            return Err(Error::invalid(format!(
                "source weights must cover members {expected:?} in order, got {got:?}"
            )));
        }
        let finite = self
            .sources
            .iter()
            .all(|s| s.target_weight.is_finite() && s.source_weight.is_finite())
            && self.alphas.iter().all(|a| a.is_finite());
        if !finite {
            return Err(Error::invalid("fleet weights must be finite"));
        }
        Ok(())
    }

    pub fn num_members(&self) -> usize {
        self.alphas.len()
    }

    /// Number of free entries in `G`: `M` alphas plus two weights per source.
    pub fn g_parameter_count(&self) -> usize {
        self.alphas.len() + 2 * self.sources.len()
    }

    /// Sources in ascending id followed by the target: the block order used
    /// by the solver, so the Schur complement pivots on the target block.
    pub fn block_order(&self) -> Vec<usize> {
        self.sources
            .iter()
            .map(|s| s.source)
            .chain(std::iter::once(self.target))
            .collect()
    }

    fn pack(&self) -> Vec<f64> {
        let mut x: Vec<f64> = self.se.lengthscales.iter().map(|l| l.ln()).collect();
        x.extend(self.sources.iter().map(|s| s.target_weight));
        x.extend(self.sources.iter().map(|s| s.source_weight));
        x.extend(self.alphas.iter().copied());
        x
    }

    fn unpack(&self, x: &[f64]) -> Self {
        let d = self.se.dim();
        let k = self.sources.len();
        Self {
            se: SeKernelParams {
                lengthscales: x[..d].iter().map(|v| v.exp()).collect(),
            },
            target: self.target,
            sources: self
                .sources
                .iter()
                .enumerate()
                .map(|(i, s)| SourceWeights {
                    source: s.source,
                    target_weight: x[d + i],
                    source_weight: x[d + k + i],
                })
                .collect(),
            alphas: x[d + 2 * k..].to_vec(),
        }
    }
}

/// The `M x M` coregionalization matrix `G`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoregionalizationMatrix(pub DMatrix<f64>);

impl CoregionalizationMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.0.clone().symmetric_eigenvalues().min()
    }
}

/// `G = Σ_{s≠t} w_s w_sᵀ + diag(α²)`.
pub fn build_g_matrix(params: &FleetKernelParams) -> Result<CoregionalizationMatrix> {
    params.validate()?;
    let m = params.num_members();
    let t = params.target;
    let mut g = DMatrix::from_diagonal(&DVector::from_iterator(m, params.alphas.iter().map(|a| a * a)));
    for w in &params.sources {
        g[(t, t)] += w.target_weight * w.target_weight;
        g[(w.source, w.source)] += w.source_weight * w.source_weight;
        let c = w.target_weight * w.source_weight;
        g[(t, w.source)] += c;
        g[(w.source, t)] += c;
    }
    Ok(CoregionalizationMatrix(g))
}

/// `corr(G) = diag(G)^{-1/2} G diag(G)^{-1/2}`.
pub fn correlation_matrix(g: &CoregionalizationMatrix) -> Result<DMatrix<f64>> {
    let g = &g.0;
    let d = g.diagonal();
    if let Some(v) = d.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::invalid(format!("correlation needs a positive diagonal, found {v}")));
    }
    let n = g.nrows();
    Ok(DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            1.0
        } else {
            (g[(i, j)] / (d[i] * d[j]).sqrt()).clamp(-1.0, 1.0)
        }
    }))
}

/// `k_SE(x, x2) G[m, m2]`.
pub fn fleet_kernel(x: &[f64], m: usize, x2: &[f64], m2: usize, params: &FleetKernelParams) -> Result<f64> {
    let members = params.num_members();
    if m >= members || m2 >= members {
        return Err(Error::invalid(format!("member id out of range for fleet of {members}")));
    }
    let g = build_g_matrix(params)?;
    Ok(gp::se_kernel(x, x2, &params.se)? * g.0[(m, m2)])
}

/// Samples of one fleet member. `targets` holds one column per output feature.
#[derive(Clone, Debug, PartialEq)]
pub struct MemberSamples {
    pub inputs: DMatrix<f64>,
    pub targets: DMatrix<f64>,
}

impl MemberSamples {
    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }

    /// Same samples with each target replaced by its increment over the
    /// matching leading input column.
    pub fn increments(&self) -> MemberSamples {
        let mut targets = self.targets.clone();
        for j in 0..targets.ncols() {
            targets.column_mut(j).axpy(-1.0, &self.inputs.column(j), 1.0);
        }
        MemberSamples {
            inputs: self.inputs.clone(),
            targets,
        }
    }
}

/// Transition samples of the whole fleet, indexed by member id.
#[derive(Clone, Debug, PartialEq)]
pub struct FleetDataset {
    pub members: Vec<MemberSamples>,
    pub noise_variance: f64,
}

impl FleetDataset {
    pub fn new(members: Vec<MemberSamples>, noise_variance: f64) -> Result<Self> {
        let Some(first) = members.first() else {
            return Err(Error::invalid("fleet needs at least one member"));
        };
        let (d, e) = (first.inputs.ncols(), first.targets.ncols());
        for (m, s) in members.iter().enumerate() {
            if s.inputs.ncols() != d || s.targets.ncols() != e || s.inputs.nrows() != s.targets.nrows() {
                return Err(Error::invalid(format!("member {m} has inconsistent sample shapes")));
            }
        }
        if !(noise_variance >= 0.0) {
            return Err(Error::invalid("noise variance must be >= 0"));
        }
        Ok(Self {
            members,
            noise_variance,
        })
    }

    pub fn num_members(&self) -> usize {
        self.members.len()
    }

    pub fn input_dim(&self) -> usize {
        self.members[0].inputs.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.members[0].targets.ncols()
    }

    pub fn total_len(&self) -> usize {
        self.members.iter().map(|m| m.len()).sum()
    }

    fn check_output(&self, output: usize) -> Result<()> {
        if output >= self.output_dim() {
            return Err(Error::invalid(format!("output {output} out of range")));
        }
        Ok(())
    }

    /// One member's samples for a single output feature.
    pub fn member_dataset(&self, member: usize, output: usize) -> Result<GpDataset> {
        self.check_output(output)?;
        let s = self
            .members
            .get(member)
            .ok_or_else(|| Error::invalid(format!("member {member} out of range")))?;
        GpDataset::new(s.inputs.clone(), s.targets.column(output).into_owned(), self.noise_variance)
    }

    /// All samples stacked in member order, ignoring member identity.
    pub fn pooled(&self, output: usize) -> Result<GpDataset> {
        self.check_output(output)?;
        let n = self.total_len();
        let mut inputs = DMatrix::zeros(n, self.input_dim());
        let mut targets = DVector::zeros(n);
        let mut off = 0;
        for s in &self.members {
            inputs.rows_mut(off, s.len()).copy_from(&s.inputs);
            targets.rows_mut(off, s.len()).copy_from(&s.targets.column(output));
            off += s.len();
        }
        GpDataset::new(inputs, targets, self.noise_variance)
    }
}

struct Block {
    member: usize,
    inputs: Vec<f64>,
    targets: Vec<f64>,
    n: usize,
}

fn blocks_for(data: &FleetDataset, output: usize, params: &FleetKernelParams) -> Result<Vec<Block>> {
    if data.num_members() != params.num_members() {
        return Err(Error::invalid(format!(
            "dataset has {} members, kernel expects {}",
            data.num_members(),
            params.num_members()
        )));
    }
    if data.input_dim() != params.se.dim() {
        return Err(Error::invalid("fleet data dimension does not match length scales"));
    }
    data.check_output(output)?;
    Ok(params
        .block_order()
        .into_iter()
        .map(|m| {
            let s = &data.members[m];
            Block {
                member: m,
                inputs: row_major(&s.inputs),
                targets: s.targets.column(output).iter().copied().collect(),
                n: s.len(),
            }
        })
        .collect())
}

fn se_block(a: &Block, b: &Block, dim: usize, inv_l2: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(a.n, b.n, |i, j| {
        se_unit(&a.inputs[i * dim..(i + 1) * dim], &b.inputs[j * dim..(j + 1) * dim], inv_l2)
    })
}

/// Unit SE blocks of the arrow: per-source diagonal, source-target, target diagonal.
struct SeBlocks {
    source: Vec<DMatrix<f64>>,
    coupling: Vec<DMatrix<f64>>,
    target: DMatrix<f64>,
}

fn se_blocks(blocks: &[Block], dim: usize, inv_l2: &[f64]) -> SeBlocks {
    let (t, sources) = blocks.split_last().expect("target block present");
    SeBlocks {
        source: sources.iter().map(|s| se_block(s, s, dim, inv_l2)).collect(),
        coupling: sources.iter().map(|s| se_block(s, t, dim, inv_l2)).collect(),
        target: se_block(t, t, dim, inv_l2),
    }
}

fn arrow_from(se: &SeBlocks, g: &DMatrix<f64>, order: &[usize], noise: f64) -> Result<BlockArrow> {
    let t = *order.last().expect("target in order");
    let add_noise = |mut m: DMatrix<f64>| {
        for i in 0..m.nrows() {
            m[(i, i)] += noise;
        }
        m
    };
    BlockArrow::new(
        se.source
            .iter()
            .zip(order)
            .map(|(k, &s)| add_noise(k * g[(s, s)]))
            .collect(),
        se.coupling.iter().zip(order).map(|(k, &s)| k * g[(s, t)]).collect(),
        add_noise(&se.target * g[(t, t)]),
    )
}

/// A target-specific fleet GP conditioned on the whole fleet's samples for one
/// output feature. Predictions are for the target member.
#[derive(Clone, Debug)]
pub struct FleetGpModel {
    params: FleetKernelParams,
    g: DMatrix<f64>,
    inv_l2: Vec<f64>,
    dim: usize,
    /// Per block in solver order: (G[t, member], row-major inputs, n).
    blocks: Vec<(f64, Vec<f64>, usize)>,
    factor: BlockArrowFactor,
    alpha: Vec<f64>,
    targets: Vec<f64>,
}

impl FleetGpModel {
    pub fn fit(data: &FleetDataset, output: usize, params: FleetKernelParams) -> Result<Self> {
        let g = build_g_matrix(&params)?.0;
        let blocks = blocks_for(data, output, &params)?;
        let dim = params.se.dim();
        let inv_l2 = params.se.inverse_squares();
        let order = params.block_order();
        let se = se_blocks(&blocks, dim, &inv_l2);
        let arrow = arrow_from(&se, &g, &order, data.noise_variance)?;
        let factor = arrow.factor()?;
        let targets: Vec<f64> = blocks.iter().flat_map(|b| b.targets.iter().copied()).collect();
        let alpha = factor.solve_vec(&DVector::from_column_slice(&targets));
        let t = params.target;
        Ok(Self {
            blocks: blocks.into_iter().map(|b| (g[(t, b.member)], b.inputs, b.n)).collect(),
            g,
            inv_l2,
            dim,
            factor,
            alpha: alpha.as_slice().to_vec(),
            targets,
            params,
        })
    }

    pub fn params(&self) -> &FleetKernelParams {
        &self.params
    }

    pub fn g_matrix(&self) -> CoregionalizationMatrix {
        CoregionalizationMatrix(self.g.clone())
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    /// Prior variance of the target's output, `G_tt`.
    pub fn prior_variance(&self) -> f64 {
        self.g[(self.params.target, self.params.target)]
    }

    fn cross_cov(&self, x: &[f64]) -> Vec<f64> {
        let mut k = Vec::with_capacity(self.alpha.len());
        for (gtm, inputs, n) in &self.blocks {
            if *gtm == 0.0 {
                k.extend(std::iter::repeat_n(0.0, *n));
            } else {
                k.extend((0..*n).map(|i| gtm * se_unit(&inputs[i * self.dim..(i + 1) * self.dim], x, &self.inv_l2)));
            }
        }
        k
    }

    /// Posterior mean and variance of the target's output at `x`.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        debug_assert_eq!(x.len(), self.dim);
        let k = self.cross_cov(x);
        let mean = k.iter().zip(&self.alpha).map(|(a, b)| a * b).sum();
        let mut scratch = vec![0.0; k.len()];
        let reduction = self.factor.quadratic_form(&k, &mut scratch);
        (mean, (self.prior_variance() - reduction).max(0.0))
    }

    pub fn posterior(&self, queries: &DMatrix<f64>) -> Result<PosteriorStats> {
        if queries.ncols() != self.dim {
            return Err(Error::invalid("query dimension mismatch"));
        }
        let q = queries.nrows();
        let rows = row_major(queries);
        let n = self.alpha.len();
        let mut kq = DMatrix::zeros(n, q);
        for j in 0..q {
            let k = self.cross_cov(&rows[j * self.dim..(j + 1) * self.dim]);
            kq.column_mut(j).copy_from_slice(&k);
        }
        let mean = kq.transpose() * DVector::from_column_slice(&self.alpha);
        let solved = self.factor.solve(&kq);
        let gtt = self.prior_variance();
        let mut covariance = DMatrix::from_fn(q, q, |i, j| {
            gtt * se_unit(&rows[i * self.dim..(i + 1) * self.dim], &rows[j * self.dim..(j + 1) * self.dim], &self.inv_l2)
        }) - kq.transpose() * solved;
        crate::linalg::symmetrize(&mut covariance);
        Ok(PosteriorStats { mean, covariance })
    }

    /// `log p(y^F | X^F, θ^(t))`.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let quad: f64 = self.targets.iter().zip(&self.alpha).map(|(a, b)| a * b).sum();
        -0.5 * quad - 0.5 * self.factor.log_det() - 0.5 * self.alpha.len() as f64 * LN_2PI
    }
}

/// Posterior statistics of the target's output at `queries`, conditioned on
/// all annotated fleet samples, computed through the block-arrow solver.
pub fn fleet_posterior(
    queries: &DMatrix<f64>,
    data: &FleetDataset,
    output: usize,
    params: &FleetKernelParams,
) -> Result<PosteriorStats> {
    FleetGpModel::fit(data, output, params.clone())?.posterior(queries)
}

/// Fleet log marginal likelihood and its gradient in packed parameter order:
/// `[ln l_1..ln l_D, w_{t,s}.., w_{s,s}.., α_0..α_{M-1}]`.
pub fn fleet_log_marginal_likelihood_grad(
    data: &FleetDataset,
    output: usize,
    params: &FleetKernelParams,
) -> Result<(f64, Vec<f64>)> {
    let g = build_g_matrix(params)?.0;
    let blocks = blocks_for(data, output, params)?;
    let dim = params.se.dim();
    let inv_l2 = params.se.inverse_squares();
    let order = params.block_order();
    let se = se_blocks(&blocks, dim, &inv_l2);
    let factor = arrow_from(&se, &g, &order, data.noise_variance)?.factor()?;

    let y: Vec<f64> = blocks.iter().flat_map(|b| b.targets.iter().copied()).collect();
    let alpha = factor.solve_vec(&DVector::from_column_slice(&y));
    let lml = -0.5 * DVector::from_column_slice(&y).dot(&alpha) - 0.5 * factor.log_det() - 0.5 * y.len() as f64 * LN_2PI;

    let inv = factor.inverse_blocks();
    let (tb, sb) = blocks.split_last().expect("target block");
    let t = params.target;
    let offsets: Vec<usize> = blocks
        .iter()
        .scan(0, |acc, b| {
            let o = *acc;
            *acc += b.n;
            Some(o)
        })
        .collect();
    let t0 = *offsets.last().unwrap();
    let at = alpha.rows(t0, tb.n);

    let k = params.sources.len();
    let mut grad = vec![0.0; dim + 2 * k + params.num_members()];

    // Accumulates Σ_ij A_ij K_ij (returned) and Σ_ij A_ij K_ij Δ²_ijd / l_d² into `ls`.
    let accumulate = |a_of: &dyn Fn(usize, usize) -> f64, kb: &DMatrix<f64>, ba: &Block, bb: &Block, scale: f64, ls: &mut [f64]| {
        let mut q = 0.0;
        for j in 0..bb.n {
            let xj = &bb.inputs[j * dim..(j + 1) * dim];
            for i in 0..ba.n {
                let w = a_of(i, j) * kb[(i, j)];
                q += w;
                let xi = &ba.inputs[i * dim..(i + 1) * dim];
                for d in 0..dim {
                    let diff = xi[d] - xj[d];
                    ls[d] += scale * w * diff * diff * inv_l2[d];
                }
            }
        }
        q
    };

    let mut ls = vec![0.0; dim];
    let q_tt = accumulate(
        &|i, j| at[i] * at[j] - inv.target[(i, j)],
        &se.target,
        tb,
        tb,
        0.5 * g[(t, t)],
        &mut ls,
    );
    for (si, sbk) in sb.iter().enumerate() {
        let s = sbk.member;
        let as_ = alpha.rows(offsets[si], sbk.n);
        let q_ss = accumulate(
            &|i, j| as_[i] * as_[j] - inv.source_diagonal[si][(i, j)],
            &se.source[si],
            sbk,
            sbk,
            0.5 * g[(s, s)],
            &mut ls,
        );
        // the (s, t) block appears twice in the symmetric trace
        let q_st = accumulate(
            &|i, j| as_[i] * at[j] - inv.source_target[si][(i, j)],
            &se.coupling[si],
            sbk,
            tb,
            g[(s, t)],
            &mut ls,
        );
        let w = &params.sources[si];
        grad[dim + si] = w.target_weight * q_tt + w.source_weight * q_st;
        grad[dim + k + si] = w.source_weight * q_ss + w.target_weight * q_st;
        grad[dim + 2 * k + s] = params.alphas[s] * q_ss;
    }
    grad[dim + 2 * k + t] = params.alphas[t] * q_tt;
    // Both w_{t,s} gradients share the target-block term; sources enter it once each.
    grad[..dim].copy_from_slice(&ls);
    Ok((lml, grad))
}

/// Settings for fleet evidence maximization.
#[derive(Clone, Debug)]
pub struct FleetFitOptions {
    pub restarts: usize,
    pub seed: u64,
    /// Length scales for the first restart; drawn log-uniformly when absent.
    pub init_lengthscales: Option<Vec<f64>>,
    pub init_weight: f64,
    pub init_alpha: f64,
    pub init_range: (f64, f64),
    pub lengthscale_bounds: (f64, f64),
    pub lbfgs: LbfgsOptions,
}

impl Default for FleetFitOptions {
    fn default() -> Self {
        Self {
            restarts: 5,
            seed: 0,
            init_lengthscales: None,
            init_weight: 0.5,
            init_alpha: 0.5,
            init_range: (0.1, 2.0),
            lengthscale_bounds: (1e-2, 1e2),
            lbfgs: LbfgsOptions {
                max_iters: 150,
                grad_tol: 1e-5,
                ..Default::default()
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct FleetFit {
    pub params: FleetKernelParams,
    pub log_likelihood: f64,
    /// Evidence at the first restart's starting point.
    pub initial_log_likelihood: f64,
}

/// Jointly fits `θ_SE`, all `w` pairs and `α` for target `target` by
/// multi-start evidence maximization over the whole fleet dataset.
pub fn fit_fleet_hyperparameters(
    data: &FleetDataset,
    output: usize,
    target: usize,
    opts: &FleetFitOptions,
) -> Result<FleetFit> {
    if opts.restarts == 0 {
        return Err(Error::invalid("restarts must be >= 1"));
    }
    let members = data.num_members();
    if target >= members {
        return Err(Error::invalid(format!("target {target} outside fleet of {members}")));
    }
    if data.members[target].is_empty() {
        return Err(Error::invalid("target member has no samples"));
    }
    let dim = data.input_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let ls_bounds = (opts.lengthscale_bounds.0.ln(), opts.lengthscale_bounds.1.ln());

    let mut best: Option<FleetFit> = None;
    let mut initial = f64::NAN;
    let mut failures = Vec::new();
    for restart in 0..opts.restarts {
        let lengthscales = match (&opts.init_lengthscales, restart) {
            (Some(l), 0) => l.clone(),
            _ => (0..dim).map(|_| gp::log_uniform(&mut rng, opts.init_range)).collect(),
        };
        let mut start = FleetKernelParams::uniform(
            SeKernelParams::new(lengthscales)?,
            members,
            target,
            opts.init_weight,
            opts.init_alpha,
        )?;
        if restart > 0 {
            for w in &mut start.sources {
                if rng.random::<bool>() {
                    w.target_weight = -w.target_weight;
                }
                if rng.random::<bool>() {
                    w.source_weight = -w.source_weight;
                }
            }
        }
        let x0 = start.pack();
        let mut bounds = vec![ls_bounds; dim];
        bounds.resize(x0.len(), (f64::NEG_INFINITY, f64::INFINITY));
        let template = start.clone();
        let objective = |x: &[f64]| {
            let p = template.unpack(x);
            let (lml, g) = fleet_log_marginal_likelihood_grad(data, output, &p).ok()?;
            Some((-lml, g.into_iter().map(|v| -v).collect()))
        };
        match optim::minimize(objective, &x0, &bounds, &opts.lbfgs) {
            Ok(min) => {
                let lml = -min.value;
                if restart == 0 {
                    initial = fleet_log_marginal_likelihood_grad(data, output, &start)
                        .map(|r| r.0)
                        .unwrap_or(f64::NAN);
                }
                if best.as_ref().is_none_or(|b| lml > b.log_likelihood) {
                    best = Some(FleetFit {
                        params: template.unpack(&min.x),
                        log_likelihood: lml,
                        initial_log_likelihood: f64::NAN,
                    });
                }
            }
            Err(e) => {
                log::debug!("fleet restart {restart} discarded: {e}");
                failures.push(e.to_string());
            }
        }
    }
    let mut fit = best.ok_or_else(|| Error::Optimization(format!("all fleet restarts failed: {}", failures.join("; "))))?;
    fit.initial_log_likelihood = initial;
    Ok(fit)
}

/// Dense fleet covariance over all samples (solver block order) and the
/// matching target vector. Used by validation code.
pub fn dense_fleet_covariance(data: &FleetDataset, output: usize, params: &FleetKernelParams) -> Result<(DMatrix<f64>, DVector<f64>, Vec<usize>)> {
    let g = build_g_matrix(params)?.0;
    let blocks = blocks_for(data, output, params)?;
    let dim = params.se.dim();
    let mut members = Vec::new();
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for b in &blocks {
        for i in 0..b.n {
            members.push(b.member);
            rows.push(b.inputs[i * dim..(i + 1) * dim].to_vec());
            y.push(b.targets[i]);
        }
    }
    let n = y.len();
    let mut c = DMatrix::from_fn(n, n, |i, j| params.se.eval(&rows[i], &rows[j]) * g[(members[i], members[j])]);
    for i in 0..n {
        c[(i, i)] += data.noise_variance;
    }
    Ok((c, DVector::from_vec(y), members))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_params(rng: &mut ChaCha8Rng, members: usize, dim: usize) -> FleetKernelParams {
        let target = rng.random_range(0..members);
        let mut p = FleetKernelParams::uniform(
            SeKernelParams::new((0..dim).map(|_| rng.random_range(0.3..1.5)).collect()).unwrap(),
            members,
            target,
            0.0,
            0.0,
        )
        .unwrap();
        for w in &mut p.sources {
            w.target_weight = rng.random_range(-1.5..1.5);
            w.source_weight = rng.random_range(-1.5..1.5);
        }
        for a in &mut p.alphas {
            *a = rng.random_range(-1.0..1.0);
        }
        p
    }

    fn random_fleet(rng: &mut ChaCha8Rng, sizes: &[usize], dim: usize, noise: f64) -> FleetDataset {
        FleetDataset::new(
            sizes
                .iter()
                .map(|&n| MemberSamples {
                    inputs: DMatrix::from_fn(n, dim, |_, _| rng.random_range(-1.0..1.0)),
                    targets: DMatrix::from_fn(n, 1, |_, _| rng.random_range(-1.0..1.0)),
                })
                .collect(),
            noise,
        )
        .unwrap()
    }

    /// Dense joint-normal conditioning with an LU inverse.
    fn dense_fleet_posterior(q: &DMatrix<f64>, data: &FleetDataset, p: &FleetKernelParams) -> PosteriorStats {
        let g = build_g_matrix(p).unwrap().0;
        let mut xs = Vec::new();
        let mut ms = Vec::new();
        let mut y = Vec::new();
        for (m, s) in data.members.iter().enumerate() {
            for i in 0..s.len() {
                xs.push(s.inputs.row(i).iter().copied().collect::<Vec<_>>());
                ms.push(m);
                y.push(s.targets[(i, 0)]);
            }
        }
        let n = y.len();
        let k = |a: &[f64], ma: usize, b: &[f64], mb: usize| p.se.eval(a, b) * g[(ma, mb)];
        let mut c = DMatrix::from_fn(n, n, |i, j| k(&xs[i], ms[i], &xs[j], ms[j]));
        for i in 0..n {
            c[(i, i)] += data.noise_variance;
        }
        let qs: Vec<Vec<f64>> = (0..q.nrows()).map(|i| q.row(i).iter().copied().collect()).collect();
        let kq = DMatrix::from_fn(q.nrows(), n, |i, j| k(&qs[i], p.target, &xs[j], ms[j]));
        let kqq = DMatrix::from_fn(q.nrows(), q.nrows(), |i, j| k(&qs[i], p.target, &qs[j], p.target));
        let inv = c.lu().try_inverse().unwrap();
        PosteriorStats {
            mean: &kq * &inv * DVector::from_vec(y),
            covariance: kqq - &kq * inv * kq.transpose(),
        }
    }

    #[test]
    fn g_identity_when_weights_vanish() {
        let p = FleetKernelParams::uniform(SeKernelParams::new(vec![1.0]).unwrap(), 3, 1, 0.0, 1.0).unwrap();
        assert_eq!(build_g_matrix(&p).unwrap().0, DMatrix::identity(3, 3));
    }

    #[test]
    fn g_two_member_example() {
        let p = FleetKernelParams::new(
            SeKernelParams::new(vec![1.0]).unwrap(),
            0,
            vec![SourceWeights {
                source: 1,
                target_weight: 0.5,
                source_weight: 1.0,
            }],
            vec![0.1, 0.2],
        )
        .unwrap();
        let g = build_g_matrix(&p).unwrap().0;
        // G_tt = 0.25 + 0.01, G_ss = 1 + 0.04, G_ts = 0.5
        assert_relative_eq!(g[(0, 0)], 0.26, epsilon = 1e-15);
        assert_relative_eq!(g[(1, 1)], 1.04, epsilon = 1e-15);
        assert_relative_eq!(g[(0, 1)], 0.5, epsilon = 1e-15);
        assert_relative_eq!(g[(1, 0)], 0.5, epsilon = 1e-15);
        let c = correlation_matrix(&CoregionalizationMatrix(g)).unwrap();
        assert_relative_eq!(c[(0, 1)], 0.5 / (0.26f64 * 1.04).sqrt(), epsilon = 1e-14);
        assert_relative_eq!(c[(0, 1)], 0.9615, epsilon = 1e-4);
    }

    #[test]
    fn g_matches_cross_covariance_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut p = random_params(&mut rng, 3, 1);
        p.target = 0;
        p.sources = vec![
            SourceWeights {
                source: 1,
                target_weight: 0.7,
                source_weight: -0.4,
            },
            SourceWeights {
                source: 2,
                target_weight: 1.3,
                source_weight: 0.9,
            },
        ];
        let a = p.alphas.clone();
        let g = build_g_matrix(&p).unwrap().0;
        // Cov(τ_t, τ_t) = Σ w_ts² + α_t², Cov(τ_s, τ_s) = w_ss² + α_s²,
        // Cov(τ_t, τ_s) = w_ts w_ss, Cov(τ_s, τ_s') = 0
        assert_relative_eq!(g[(0, 0)], 0.49 + 1.69 + a[0] * a[0], epsilon = 1e-14);
        assert_relative_eq!(g[(1, 1)], 0.16 + a[1] * a[1], epsilon = 1e-14);
        assert_relative_eq!(g[(2, 2)], 0.81 + a[2] * a[2], epsilon = 1e-14);
        assert_relative_eq!(g[(0, 1)], -0.28, epsilon = 1e-14);
        assert_relative_eq!(g[(0, 2)], 1.17, epsilon = 1e-14);
        assert_eq!(g[(1, 2)], 0.0);
        assert_eq!(g[(2, 1)], 0.0);
        assert_eq!(p.g_parameter_count(), 3 * 3 - 2);
    }

    #[test]
    fn fleet_kernel_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = random_params(&mut rng, 4, 2);
        p.target = 1;
        p.sources = [0, 2, 3]
            .iter()
            .map(|&s| SourceWeights {
                source: s,
                target_weight: rng.random_range(-1.0..1.0),
                source_weight: rng.random_range(-1.0..1.0),
            })
            .collect();
        let g = build_g_matrix(&p).unwrap().0;
        let x = [0.1, -0.3];
        assert_relative_eq!(fleet_kernel(&x, 1, &x, 1, &p).unwrap(), g[(1, 1)], epsilon = 1e-15);
        assert_eq!(fleet_kernel(&x, 0, &[0.4, 0.4], 2, &p).unwrap(), 0.0);
        assert_eq!(fleet_kernel(&x, 3, &x, 2, &p).unwrap(), 0.0);
        let w = p.sources[1];
        assert_relative_eq!(
            fleet_kernel(&x, 1, &x, 2, &p).unwrap(),
            w.target_weight * w.source_weight,
            epsilon = 1e-15
        );
        assert!(fleet_kernel(&x, 4, &x, 0, &p).is_err());
    }

    #[test]
    fn invalid_params_rejected() {
        let se = SeKernelParams::new(vec![1.0]).unwrap();
        assert!(FleetKernelParams::new(se.clone(), 3, vec![], vec![1.0, 1.0]).is_err());
        assert!(FleetKernelParams::new(
            se.clone(),
            0,
            vec![SourceWeights {
                source: 0,
                target_weight: 1.0,
                source_weight: 1.0
            }],
            vec![1.0, 1.0]
        )
        .is_err());
        let bad = CoregionalizationMatrix(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]));
        assert!(correlation_matrix(&bad).is_err());
    }

    #[test]
    fn diagonal_g_gives_identity_correlation() {
        let g = CoregionalizationMatrix(DMatrix::from_diagonal(&DVector::from_vec(vec![0.3, 2.0, 5.0])));
        assert_eq!(correlation_matrix(&g).unwrap(), DMatrix::identity(3, 3));
    }

    #[test]
    fn zero_cross_weights_match_single_member_posterior() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let data = random_fleet(&mut rng, &[6, 7, 5], 2, 1e-6);
        let mut p = random_params(&mut rng, 3, 2);
        for w in &mut p.sources {
            w.target_weight = 0.0;
        }
        let q = DMatrix::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0));
        let got = fleet_posterior(&q, &data, 0, &p).unwrap();
        let at = p.alphas[p.target];
        let single = gp::gp_posterior(
            &q,
            &data.member_dataset(p.target, 0).unwrap(),
            &gp::ScaledSe::new(p.se.clone(), at * at).unwrap(),
        )
        .unwrap();
        assert!((got.mean - single.mean).amax() < 1e-10);
        assert!((got.covariance - single.covariance).amax() < 1e-10);
    }

    #[test]
    fn perfect_correlation_matches_pooled_posterior() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let data = random_fleet(&mut rng, &[6, 8], 2, 1e-6);
        let se = SeKernelParams::new(vec![0.5, 0.7]).unwrap();
        for target in 0..2 {
            let p = FleetKernelParams::uniform(se.clone(), 2, target, 1.0, 0.0).unwrap();
            let q = DMatrix::from_fn(3, 2, |_, _| rng.random_range(-1.0..1.0));
            let got = fleet_posterior(&q, &data, 0, &p).unwrap();
            let pooled = gp::gp_posterior(&q, &data.pooled(0).unwrap(), &se).unwrap();
            assert!((got.mean - pooled.mean).amax() < 1e-8);
            assert!((got.covariance - pooled.covariance).amax() < 1e-8);
        }
    }

    #[test]
    fn fleet_posterior_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let sizes: Vec<usize> = (0..3).map(|_| rng.random_range(1..=8)).collect();
            let data = random_fleet(&mut rng, &sizes, 2, 1e-4);
            let p = random_params(&mut rng, 3, 2);
            let q = DMatrix::from_fn(3, 2, |_, _| rng.random_range(-1.0..1.0));
            let got = fleet_posterior(&q, &data, 0, &p).unwrap();
            let want = dense_fleet_posterior(&q, &data, &p);
            assert!((&got.mean - &want.mean).amax() < 1e-6);
            assert!((&got.covariance - &want.covariance).amax() < 1e-6);
            let model = FleetGpModel::fit(&data, 0, p.clone()).unwrap();
            for i in 0..3 {
                let row: Vec<f64> = q.row(i).iter().copied().collect();
                let (m, v) = model.predict(&row);
                assert!((m - want.mean[i]).abs() < 1e-6);
                assert!((v - want.covariance[(i, i)].max(0.0)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn lml_matches_dense_and_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..6 {
            let members = rng.random_range(2..=4);
            let sizes: Vec<usize> = (0..members).map(|_| rng.random_range(3..=7)).collect();
            let data = random_fleet(&mut rng, &sizes, 2, 1e-2);
            let p = random_params(&mut rng, members, 2);
            let (lml, grad) = fleet_log_marginal_likelihood_grad(&data, 0, &p).unwrap();

            let (c, y, _) = dense_fleet_covariance(&data, 0, &p).unwrap();
            let n = y.len() as f64;
            let lu = c.clone().lu();
            let dense = -0.5 * y.dot(&lu.solve(&y).unwrap()) - 0.5 * lu.determinant().ln() - 0.5 * n * LN_2PI;
            assert_relative_eq!(lml, dense, epsilon = 1e-8, max_relative = 1e-10);

            let x = p.pack();
            let h = 1e-6;
            for i in 0..x.len() {
                let mut up = x.clone();
                let mut dn = x.clone();
                up[i] += h;
                dn[i] -= h;
                let fu = fleet_log_marginal_likelihood_grad(&data, 0, &p.unpack(&up)).unwrap().0;
                let fd = fleet_log_marginal_likelihood_grad(&data, 0, &p.unpack(&dn)).unwrap().0;
                let num = (fu - fd) / (2.0 * h);
                let rel = (num - grad[i]).abs() / num.abs().max(1e-2);
                assert!(rel < 1e-4, "param {i}: fd {num} analytic {}", grad[i]);
            }
        }
    }

    /// Samples members as linear combinations of shared and local latent functions.
    fn latent_fleet(rng: &mut ChaCha8Rng, shared: f64, local: f64, n: usize) -> FleetDataset {
        // The latent functions are random Fourier-ish curves, fixed per call.
        let freqs: Vec<(f64, f64)> = (0..6).map(|_| (rng.random_range(0.5..3.0), rng.random_range(0.0..std::f64::consts::TAU))).collect();
        let locals: Vec<Vec<(f64, f64)>> = (0..2)
            .map(|_| (0..6).map(|_| (rng.random_range(0.5..3.0), rng.random_range(0.0..std::f64::consts::TAU))).collect())
            .collect();
        let eval = |f: &[(f64, f64)], x: f64| f.iter().map(|(w, p)| (w * x + p).sin()).sum::<f64>() / 2.0;
        let members = (0..2)
            .map(|m| {
                let inputs = DMatrix::from_fn(n, 1, |_, _| rng.random_range(-1.0..1.0));
                let targets = DMatrix::from_fn(n, 1, |i, _| {
                    let x = inputs[(i, 0)];
                    shared * eval(&freqs, x) + local * eval(&locals[m], x)
                });
                MemberSamples { inputs, targets }
            })
            .collect();
        FleetDataset::new(members, 1e-6).unwrap()
    }

    #[test]
    fn recovers_high_correlation_for_shared_function() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let data = latent_fleet(&mut rng, 1.0, 0.0, 50);
        let fit = fit_fleet_hyperparameters(&data, 0, 0, &FleetFitOptions::default()).unwrap();
        let corr = correlation_matrix(&build_g_matrix(&fit.params).unwrap()).unwrap();
        assert!(corr[(0, 1)].abs() >= 0.8, "corr {}", corr[(0, 1)]);
        assert!(fit.log_likelihood >= fit.initial_log_likelihood);
    }

    #[test]
    fn recovers_low_correlation_for_independent_functions() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let data = latent_fleet(&mut rng, 0.0, 1.0, 50);
        let fit = fit_fleet_hyperparameters(&data, 0, 0, &FleetFitOptions::default()).unwrap();
        let corr = correlation_matrix(&build_g_matrix(&fit.params).unwrap()).unwrap();
        assert!(corr[(0, 1)].abs() <= 0.3, "corr {}", corr[(0, 1)]);
        assert!(fit.log_likelihood >= fit.initial_log_likelihood);
    }

    #[test]
    fn fit_requires_target_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let data = random_fleet(&mut rng, &[0, 5], 1, 1e-6);
        assert!(fit_fleet_hyperparameters(&data, 0, 0, &FleetFitOptions::default()).is_err());
    }

    proptest! {
        #[test]
        fn g_is_positive_semidefinite(seed in 0u64..2000, members in 1usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_params(&mut rng, members, 1);
            let g = build_g_matrix(&p).unwrap();
            prop_assert!((&g.0 - g.0.transpose()).amax() == 0.0);
            prop_assert!(g.min_eigenvalue() >= -1e-8);
            for _ in 0..5 {
                let z = DVector::from_fn(members, |_, _| rng.random_range(-1.0..1.0));
                prop_assert!(z.dot(&(&g.0 * &z)) >= -1e-12);
            }
            for s in 0..members {
                for s2 in 0..members {
                    if s != s2 && s != p.target && s2 != p.target {
                        prop_assert_eq!(g.0[(s, s2)], 0.0);
                    }
                }
            }
        }

        #[test]
        fn correlation_has_unit_diagonal(seed in 0u64..500, members in 2usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p = random_params(&mut rng, members, 1);
            for a in &mut p.alphas {
                *a = a.abs() + 0.05;
            }
            let c = correlation_matrix(&build_g_matrix(&p).unwrap()).unwrap();
            for i in 0..members {
                prop_assert_eq!(c[(i, i)], 1.0);
                for j in 0..members {
                    prop_assert!(c[(i, j)].abs() <= 1.0);
                }
            }
        }
    }
}
