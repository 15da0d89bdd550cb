//! Graphon kernels on `[0,1]²`, their step-function samples, and the
//! discrete spectral decomposition used by the spectral solver.

use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::model::AlphaGrid;
use crate::{Error, Result};

/// Default cut-off below which eigenvalues are discarded.
pub const DEFAULT_RANK_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub enum Graphon {
    Constant(f64),
    /// `cos²(π(α−β)/2)`
    Sinusoidal,
    /// `1 − max(α, β)`
    UniformAttachment,
    /// `1` if `|α − β| ≥ 1/2`, else `0`.
    Half,
    /// Piecewise constant on the cells of an `N_g`-point grid.
    Step(StepWeights),
}

impl Graphon {
    pub fn constant(c: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::OutOfRange(format!("constant graphon value {c} outside [0,1]")));
        }
        Ok(Graphon::Constant(c))
    }

    pub fn evaluate(&self, alpha: f64, beta: f64) -> Result<f64> {
        for x in [alpha, beta] {
            if !(0.0..=1.0).contains(&x) {
                return Err(Error::OutOfRange(format!("graphon argument {x} outside [0,1]")));
            }
        }
        Ok(self.value(alpha, beta))
    }

    /// Unchecked evaluation for arguments already known to lie in `[0,1]`.
    pub(crate) fn value(&self, alpha: f64, beta: f64) -> f64 {
        match self {
            Graphon::Constant(c) => *c,
            Graphon::Sinusoidal => {
                let c = libm::cos(0.5 * PI * (alpha - beta));
                c * c
            }
            Graphon::UniformAttachment => 1.0 - alpha.max(beta),
            Graphon::Half => {
                if beta >= alpha + 0.5 || alpha >= beta + 0.5 {
                    1.0
                } else {
                    0.0
                }
            }
            Graphon::Step(w) => {
                let cells = AlphaGrid { n: w.size() };
                w.weights[(cells.cell_of(alpha), cells.cell_of(beta))]
            }
        }
    }

    /// `g(α, β_j)/N` for the midpoints `β_j` of `grid`.
    pub fn section_weights(&self, alpha: f64, grid: AlphaGrid) -> Vec<f64> {
        let inv = 1.0 / grid.n as f64;
        (0..grid.n).map(|j| self.value(alpha, grid.node(j)) * inv).collect()
    }

    /// Midpoint rule for `∫₀¹ g(α, β) h(β) dβ` with `h` sampled on the grid.
    pub fn section_apply(&self, alpha: f64, h: &[DVector<f64>]) -> Result<DVector<f64>> {
        if h.is_empty() {
            return Err(Error::Dimension("section_apply needs at least one sample".into()));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::OutOfRange(format!("graphon argument {alpha} outside [0,1]")));
        }
        let grid = AlphaGrid { n: h.len() };
        let mut acc = DVector::zeros(h[0].len());
        for (w, hj) in self.section_weights(alpha, grid).into_iter().zip(h) {
            acc.axpy(w, hj, 1.0);
        }
        Ok(acc)
    }

    /// Midpoint samples `g^N_ij = g(α_i, α_j)`.
    pub fn sample_step(&self, n: usize) -> Result<StepWeights> {
        let grid = AlphaGrid::new(n)?;
        let weights = DMatrix::from_fn(n, n, |i, j| self.value(grid.node(i), grid.node(j)));
        Ok(StepWeights { weights })
    }

    /// Eigendecomposition of `K_ij = g(α_i, α_j)/N`, eigenvectors scaled to be
    /// orthonormal for the grid inner product `(1/N) Σ_i f(α_i) h(α_i)`.
    pub fn spectral_decompose(&self, grid: AlphaGrid, rank_tol: f64) -> Result<SpectralDecomposition> {
        if grid.n < 2 {
            return Err(Error::InvalidModel("spectral decomposition needs N >= 2".into()));
        }
        let weights = self.sample_step(grid.n)?;
        SpectralDecomposition::of_weights(&weights, rank_tol)
    }
}

/// Symmetric `N×N` weights with entries in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepWeights {
    pub weights: DMatrix<f64>,
}

impl StepWeights {
    pub fn new(weights: DMatrix<f64>) -> Result<Self> {
        if !weights.is_square() || weights.nrows() == 0 {
            return Err(Error::Dimension(format!(
                "step weights must be square and non-empty, got {:?}",
                weights.shape()
            )));
        }
        if weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::OutOfRange("step weights must lie in [0,1]".into()));
        }
        if crate::linalg::asymmetry(&weights) > 0.0 {
            return Err(Error::InvalidModel("step weights must be symmetric".into()));
        }
        Ok(StepWeights { weights })
    }

    /// Replaces `W` by `(W + Wᵀ)/2` and reports the asymmetry that was removed.
    pub fn symmetrized(weights: DMatrix<f64>) -> Result<(Self, f64)> {
        if !weights.is_square() {
            return Err(Error::Dimension("step weights must be square".into()));
        }
        let asym = crate::linalg::asymmetry(&weights);
        let sym = crate::linalg::symmetrize(&weights);
        Ok((StepWeights::new(sym)?, asym))
    }

    pub fn size(&self) -> usize {
        self.weights.nrows()
    }

    /// Kernel `g^N_ij / N` acting on grid samples.
    pub fn kernel(&self) -> DMatrix<f64> {
        &self.weights / self.size() as f64
    }

    /// `max_i (1/N) Σ_j g^N_ij`.
    pub fn max_row_mass(&self) -> f64 {
        let n = self.size() as f64;
        self.weights.row_iter().map(|r| r.sum() / n).fold(0.0, f64::max)
    }

    /// Step-approximation error
    /// `max_i Σ_j |g^N_ij/N − ∫_{I_j} g(α_i, β) dβ|`, the inner integral by a
    /// 16-point midpoint rule on each cell.
    pub fn coupling_error(&self, g: &Graphon) -> f64 {
        self.coupling_error_refined(g, 16)
    }

    pub fn coupling_error_refined(&self, g: &Graphon, sub: usize) -> f64 {
        let n = self.size();
        let grid = AlphaGrid { n };
        let cell = 1.0 / n as f64;
        let sub_w = cell / sub as f64;
        let mut worst = 0.0f64;
        for i in 0..n {
            let a = grid.node(i);
            let mut row = 0.0;
            for j in 0..n {
                let lo = j as f64 * cell;
                let integral: f64 =
                    (0..sub).map(|k| g.value(a, lo + (k as f64 + 0.5) * sub_w)).sum::<f64>() * sub_w;
                row += libm::fabs(self.weights[(i, j)] * cell - integral);
            }
            worst = worst.max(row);
        }
        worst
    }
}

/// Truncated eigen-expansion of a sampled kernel.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct SpectralDecomposition {
    /// Retained eigenvalues, descending in absolute value.
    pub eigenvalues: Vec<f64>,
    /// `eigenvectors[ℓ][i] = f_ℓ(α_i)`, grid-orthonormal.
    pub eigenvectors: Vec<Vec<f64>>,
    pub rank: usize,
    /// `sqrt((1/N²) Σ_ij (g_ij − Σ_ℓ λ_ℓ f_ℓ(α_i) f_ℓ(α_j))²)`.
    pub residual: f64,
    /// Eigenvalues below the cut-off, kept so that truncations can report
    /// their residual.
    #[cfg_attr(feature = "serde", serde(skip))]
    pub discarded: Vec<f64>,
}

impl SpectralDecomposition {
    pub fn of_weights(weights: &StepWeights, rank_tol: f64) -> Result<Self> {
        let n = weights.size();
        let kernel = weights.kernel();
        let eig = SymmetricEigen::try_new(kernel, 1e-15, 100_000)
            .ok_or_else(|| Error::Eigen(format!("symmetric eigensolver failed for N = {n}")))?;
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            libm::fabs(eig.eigenvalues[b]).total_cmp(&libm::fabs(eig.eigenvalues[a])).then(a.cmp(&b))
        });
        let scale = libm::sqrt(n as f64);
        let mut eigenvalues = Vec::new();
        let mut eigenvectors = Vec::new();
        let mut discarded = Vec::new();
        for &k in &order {
            let lambda = eig.eigenvalues[k];
            if libm::fabs(lambda) <= rank_tol {
                discarded.push(lambda);
                continue;
            }
            let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().map(|x| x * scale).collect();
            orient(&mut v);
            eigenvalues.push(lambda);
            eigenvectors.push(v);
        }
        let rank = eigenvalues.len();
        let mut decomposition =
            SpectralDecomposition { eigenvalues, eigenvectors, rank, residual: 0.0, discarded };
        decomposition.residual = decomposition.reconstruction_residual(weights);
        Ok(decomposition)
    }

    /// Residual of the expansion evaluated directly on the grid.
    pub fn reconstruction_residual(&self, weights: &StepWeights) -> f64 {
        let n = weights.size();
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                let approx: f64 = self
                    .eigenvalues
                    .iter()
                    .zip(&self.eigenvectors)
                    .map(|(l, f)| l * f[i] * f[j])
                    .sum();
                let e = weights.weights[(i, j)] - approx;
                acc += e * e;
            }
        }
        libm::sqrt(acc) / n as f64
    }

    /// Keeps the `rank` leading terms. The residual follows from the
    /// discarded spectrum by orthogonality.
    pub fn truncated(&self, rank: usize) -> SpectralDecomposition {
        let rank = rank.min(self.rank);
        let mut discarded: Vec<f64> = self.eigenvalues[rank..].to_vec();
        discarded.extend_from_slice(&self.discarded);
        let tail: f64 = discarded.iter().map(|l| l * l).sum();
        SpectralDecomposition {
            eigenvalues: self.eigenvalues[..rank].to_vec(),
            eigenvectors: self.eigenvectors[..rank].to_vec(),
            rank,
            residual: libm::sqrt(tail),
            discarded,
        }
    }

    pub fn grid_size(&self) -> usize {
        self.eigenvectors.first().map_or(0, Vec::len)
    }

    /// Step weights `Σ_ℓ λ_ℓ f_ℓ(α_i) f_ℓ(α_j)` of the truncated kernel. Entries
    /// are not clipped to `[0,1]`.
    pub fn truncated_kernel(&self, n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, n, |i, j| {
            self.eigenvalues
                .iter()
                .zip(&self.eigenvectors)
                .map(|(l, f)| l * f[i] * f[j])
                .sum::<f64>()
                / n as f64
        })
    }
}

/// Fixes the sign so that the largest-magnitude entry (first on ties) is positive.
fn orient(v: &mut [f64]) {
    let mut best = 0usize;
    for (i, x) in v.iter().enumerate() {
        if libm::fabs(*x) > libm::fabs(v[best]) + 1e-12 {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}
