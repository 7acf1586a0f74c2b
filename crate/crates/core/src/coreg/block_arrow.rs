//! Solver for symmetric block-arrow systems.
//!
//! Under the fleet kernel two distinct sources never covary, so the training
//! covariance ordered as `[source_1, .., source_k, target]` has the shape
//!
//! ```text
//! | D_1             B_1 |
//! |      D_2        B_2 |
//! |           ..    ..  |
//! | B_1ᵀ B_2ᵀ  ..   D_t |
//! ```
//!
//! A block LDLᵀ elimination factors each `D_s` on its own and pivots on the
//! Schur complement `S = D_t - Σ B_sᵀ D_s⁻¹ B_s`, for a cost of
//! `O(Σ N_s³ + N_t² Σ N_s + N_t³)` instead of `O((Σ N)³)`.

use nalgebra::{DMatrix, DVector};

use crate::linalg::{self, cholesky_lower, with_jitter};
use crate::{Error, Result};

/// A symmetric block-arrow matrix. `couplings[s]` is the `N_s x N_t` block
/// between source `s` and the target.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockArrow {
    pub source_blocks: Vec<DMatrix<f64>>,
    pub couplings: Vec<DMatrix<f64>>,
    pub target_block: DMatrix<f64>,
}

impl BlockArrow {
    pub fn new(
        source_blocks: Vec<DMatrix<f64>>,
        couplings: Vec<DMatrix<f64>>,
        target_block: DMatrix<f64>,
    ) -> Result<Self> {
        if source_blocks.len() != couplings.len() {
            return Err(Error::invalid("one coupling block per source block is required"));
        }
        let nt = target_block.nrows();
        if target_block.ncols() != nt {
            return Err(Error::invalid("target block must be square"));
        }
        for (d, b) in source_blocks.iter().zip(&couplings) {
            if d.nrows() != d.ncols() || b.nrows() != d.nrows() || b.ncols() != nt {
                return Err(Error::invalid("inconsistent block shapes"));
            }
        }
        Ok(Self {
            source_blocks,
            couplings,
            target_block,
        })
    }

    /// Sizes of the source blocks followed by the target block.
    pub fn block_sizes(&self) -> Vec<usize> {
        self.source_blocks
            .iter()
            .map(|d| d.nrows())
            .chain(std::iter::once(self.target_block.nrows()))
            .collect()
    }

    pub fn dim(&self) -> usize {
        self.block_sizes().iter().sum()
    }

    /// Dense assembly, used by tests and oracles.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let nt = self.target_block.nrows();
        let t0 = n - nt;
        let mut m = DMatrix::zeros(n, n);
        let mut off = 0;
        for (d, b) in self.source_blocks.iter().zip(&self.couplings) {
            let ns = d.nrows();
            m.view_mut((off, off), (ns, ns)).copy_from(d);
            m.view_mut((off, t0), (ns, nt)).copy_from(b);
            m.view_mut((t0, off), (nt, ns)).copy_from(&b.transpose());
            off += ns;
        }
        m.view_mut((t0, t0), (nt, nt)).copy_from(&self.target_block);
        m
    }

    fn try_factor(&self, jitter: f64) -> Option<BlockArrowFactor> {
        let mut sources = Vec::with_capacity(self.source_blocks.len());
        let mut schur = self.target_block.clone();
        for (d, b) in self.source_blocks.iter().zip(&self.couplings) {
            let l = cholesky_lower(d, jitter)?;
            let mut f = b.clone();
            linalg::solve_lower_mut(&l, &mut f);
            if f.nrows() > 0 && f.ncols() > 0 {
                schur -= f.transpose() * &f;
            }
            sources.push(SourceFactor { l, f });
        }
        let schur_l = if schur.nrows() == 0 {
            DMatrix::zeros(0, 0)
        } else {
            linalg::symmetrize(&mut schur);
            cholesky_lower(&schur, jitter)?
        };
        Some(BlockArrowFactor {
            sources,
            schur_l,
            jitter,
        })
    }

    /// Factorizes, escalating diagonal jitter on every block if any block fails.
    pub fn factor(&self) -> Result<BlockArrowFactor> {
        with_jitter(|j| self.try_factor(j)).map(|(f, _)| f)
    }
}

#[derive(Clone, Debug)]
struct SourceFactor {
    /// Cholesky factor of `D_s`.
    l: DMatrix<f64>,
    /// `L_s⁻¹ B_s`.
    f: DMatrix<f64>,
}

/// Blocks of `C⁻¹` that carry nonzero kernel weight under the fleet kernel.
#[derive(Clone, Debug)]
pub struct ArrowInverseBlocks {
    /// `(C⁻¹)_{ss}` per source.
    pub source_diagonal: Vec<DMatrix<f64>>,
    /// `(C⁻¹)_{st}` per source.
    pub source_target: Vec<DMatrix<f64>>,
    /// `(C⁻¹)_{tt}`.
    pub target: DMatrix<f64>,
}

/// Block LDLᵀ factorization of a [`BlockArrow`].
#[derive(Clone, Debug)]
pub struct BlockArrowFactor {
    sources: Vec<SourceFactor>,
    schur_l: DMatrix<f64>,
    jitter: f64,
}

impl BlockArrowFactor {
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    fn target_size(&self) -> usize {
        self.schur_l.nrows()
    }

    pub fn dim(&self) -> usize {
        self.sources.iter().map(|s| s.l.nrows()).sum::<usize>() + self.target_size()
    }

    /// Solves `C X = B` for a right-hand side in block layout.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let nt = self.target_size();
        let t0 = self.dim() - nt;
        let mut us = Vec::with_capacity(self.sources.len());
        let mut bt = b.rows(t0, nt).into_owned();
        let mut off = 0;
        for s in &self.sources {
            let ns = s.l.nrows();
            let mut u = b.rows(off, ns).into_owned();
            linalg::solve_lower_mut(&s.l, &mut u);
            if ns > 0 && nt > 0 {
                bt -= s.f.transpose() * &u;
            }
            us.push(u);
            off += ns;
        }
        let xt = linalg::cholesky_solve(&self.schur_l, &bt);
        let mut x = DMatrix::zeros(b.nrows(), b.ncols());
        let mut off = 0;
        for (s, mut u) in self.sources.iter().zip(us) {
            let ns = s.l.nrows();
            if ns > 0 && nt > 0 {
                u -= &s.f * &xt;
            }
            linalg::solve_upper_t_mut(&s.l, &mut u);
            x.rows_mut(off, ns).copy_from(&u);
            off += ns;
        }
        x.rows_mut(t0, nt).copy_from(&xt);
        x
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let m = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
        DVector::from_column_slice(self.solve(&m).as_slice())
    }

    /// `bᵀ C⁻¹ b` through the block forward sweep only.
    ///
    /// `b` is in block layout; `scratch` must have the same length and is overwritten.
    pub fn quadratic_form(&self, b: &[f64], scratch: &mut [f64]) -> f64 {
        let nt = self.target_size();
        let t0 = self.dim() - nt;
        scratch.copy_from_slice(b);
        let (head, tail) = scratch.split_at_mut(t0);
        let mut total = 0.0;
        let mut off = 0;
        for s in &self.sources {
            let ns = s.l.nrows();
            let u = &mut head[off..off + ns];
            linalg::forward_substitute(&s.l, u);
            total += u.iter().map(|v| v * v).sum::<f64>();
            if ns > 0 {
                for j in 0..nt {
                    let col = s.f.column(j);
                    let mut acc = 0.0;
                    for i in 0..ns {
                        acc += col[i] * u[i];
                    }
                    tail[j] -= acc;
                }
            }
            off += ns;
        }
        linalg::forward_substitute(&self.schur_l, tail);
        total + tail.iter().map(|v| v * v).sum::<f64>()
    }

    /// `log |C|`.
    pub fn log_det(&self) -> f64 {
        self.sources.iter().map(|s| linalg::cholesky_log_det(&s.l)).sum::<f64>()
            + linalg::cholesky_log_det(&self.schur_l)
    }

    /// The diagonal and source-target blocks of `C⁻¹`.
    pub fn inverse_blocks(&self) -> ArrowInverseBlocks {
        let nt = self.target_size();
        let target = linalg::cholesky_solve(&self.schur_l, &DMatrix::identity(nt, nt));
        let mut source_diagonal = Vec::with_capacity(self.sources.len());
        let mut source_target = Vec::with_capacity(self.sources.len());
        for s in &self.sources {
            let ns = s.l.nrows();
            let d_inv = linalg::cholesky_solve(&s.l, &DMatrix::identity(ns, ns));
            // H = D_s⁻¹ B_s = L_s⁻ᵀ F_s
            let mut h = s.f.clone();
            linalg::solve_upper_t_mut(&s.l, &mut h);
            let hs = &h * &target;
            source_diagonal.push(d_inv + &hs * h.transpose());
            source_target.push(-hs);
        }
        ArrowInverseBlocks {
            source_diagonal,
            source_target,
            target,
        }
    }
}

/// `C⁻¹ B` for a block-arrow `C`, with jitter escalation on factorization failure.
pub fn block_arrow_solve(c: &BlockArrow, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if b.nrows() != c.dim() {
        return Err(Error::invalid(format!(
            "right-hand side has {} rows, system has {}",
            b.nrows(),
            c.dim()
        )));
    }
    Ok(c.factor()?.solve(b))
}
