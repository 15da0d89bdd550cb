//! The graphon mean-field equation system
//!
//! ```text
//! ż_α = (A − BR⁻¹BᵀΠ) z_α + D ∫g(α,β) z_β dβ − BR⁻¹Bᵀ ∫g(α,β) S_β dβ,  z_α(0) = ∫g(α,β) m(β) dβ
//! Ṡ_α = −(Aᵀ − ΠBR⁻¹Bᵀ + 2γΠσσᵀ) S_α + (QΓ − ΠD) z_α,                  S_α(T) = −Q_fΓ_f z_α(T)
//! ```
//!
//! solved either by Picard iteration on the forward equation with the
//! backward one eliminated, or by decoupling along the graphon eigenbasis.
//! All `α`-integrals use the midpoint rule on the solver grid.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::exec::Executor;
use crate::graphon::{Graphon, SpectralDecomposition, StepWeights};
use crate::linalg::{self, PSD_TOL};
use crate::model::{Grids, ProblemSpec};
use crate::ode::{
    self, fundamental_matrices, rk4, ClosedLoop, Direction, FundamentalMatrices,
    MatrixPath, RiccatiSolution,
};
use crate::{Error, Result};

/// Values of an `ℝⁿ`-valued function on the `(α, t)` grid, stored
/// `[alpha][time][component]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub data: Vec<f64>,
    pub n_alpha: usize,
    pub nodes: usize,
    pub dim: usize,
}

impl Field {
    pub fn zeros(n_alpha: usize, nodes: usize, dim: usize) -> Self {
        Field { data: vec![0.0; n_alpha * nodes * dim], n_alpha, nodes, dim }
    }

    pub fn at(&self, i: usize, k: usize) -> &[f64] {
        let o = (i * self.nodes + k) * self.dim;
        &self.data[o..o + self.dim]
    }

    pub fn at_mut(&mut self, i: usize, k: usize) -> &mut [f64] {
        let o = (i * self.nodes + k) * self.dim;
        &mut self.data[o..o + self.dim]
    }

    /// All times for one `α`, `nodes × dim` row-major.
    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.nodes * self.dim;
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let w = self.nodes * self.dim;
        &mut self.data[i * w..(i + 1) * w]
    }

    /// `sup_{α,t} |u(α,t)|` with the Euclidean norm on components.
    pub fn sup_norm(&self) -> f64 {
        self.data.chunks(self.dim).map(linalg::vector_norm).fold(0.0, f64::max)
    }

    pub fn sup_distance(&self, other: &Field) -> f64 {
        self.data
            .chunks(self.dim)
            .zip(other.data.chunks(self.dim))
            .map(|(a, b)| {
                libm::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
            })
            .fold(0.0, f64::max)
    }

    /// Path of one `α` as `n×1` matrices on the time grid.
    pub fn path(&self, i: usize) -> MatrixPath {
        MatrixPath {
            values: (0..self.nodes)
                .map(|k| DMatrix::from_column_slice(self.dim, 1, self.at(i, k)))
                .collect(),
            direction: Direction::Forward,
        }
    }

    fn set_path(&mut self, i: usize, path: &MatrixPath) {
        for (k, v) in path.values.iter().enumerate() {
            self.at_mut(i, k).copy_from_slice(v.as_slice());
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Method {
    FixedPoint,
    Spectral,
}

/// Gain paths produced by the spectral solver.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralGains {
    pub decomposition: SpectralDecomposition,
    pub p_perp: MatrixPath,
    pub p_ell: Vec<MatrixPath>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldSolution {
    pub method: Method,
    pub z: Field,
    pub s: Field,
    /// `r[i][k]`.
    pub r: Vec<Vec<f64>>,
    pub iterations: usize,
    /// Last sup-change of the Picard iteration (zero for the spectral solver).
    pub last_change: f64,
    pub gains: Option<SpectralGains>,
}

/// Everything the solvers share: Π, its closed-loop terms, fundamental
/// matrices, the sampled kernel, and the initial section `z(·, 0)`.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub spec: ProblemSpec,
    pub graphon: Graphon,
    pub riccati: RiccatiSolution,
    pub closed_loop: ClosedLoop,
    pub fundamental: FundamentalMatrices,
    pub weights: StepWeights,
    /// `g(α_i, α_j)/N`.
    pub kernel: DMatrix<f64>,
    /// `m(α_i)`.
    pub means: Vec<DVector<f64>>,
    /// `z(α_i, 0)`, `N × n` row-major.
    pub initial_section: Vec<f64>,
}

impl Prepared {
    pub fn new(spec: &ProblemSpec, graphon: &Graphon) -> Result<Self> {
        let grids = spec.grids;
        let riccati = ode::solve_riccati_pi(spec, grids.time)?;
        Self::with_riccati(spec, graphon, riccati)
    }

    pub fn with_riccati(spec: &ProblemSpec, graphon: &Graphon, riccati: RiccatiSolution) -> Result<Self> {
        let grids = spec.grids;
        let closed_loop = ClosedLoop::new(spec, &riccati, grids.time)?;
        let fundamental = fundamental_matrices(&closed_loop)?;
        let weights = graphon.sample_step(grids.alpha.n)?;
        let kernel = weights.kernel();
        let means: Vec<DVector<f64>> =
            grids.alpha.nodes().into_iter().map(|a| spec.initial.mean.at(a)).collect();
        let n = spec.dim();
        let flat: Vec<f64> = means.iter().flat_map(|m| m.iter().copied()).collect();
        let mut initial_section = vec![0.0; grids.alpha.n * n];
        linalg::kernel_apply(1.0, &kernel, &flat, n, &mut initial_section);
        Ok(Prepared {
            spec: spec.clone(),
            graphon: graphon.clone(),
            riccati,
            closed_loop,
            fundamental,
            weights,
            kernel,
            means,
            initial_section,
        })
    }

    pub fn grids(&self) -> Grids {
        self.spec.grids
    }

    pub fn dim(&self) -> usize {
        self.spec.dim()
    }

    /// Spectral decomposition of the same sampled kernel.
    pub fn decompose(&self, rank_tol: f64) -> Result<SpectralDecomposition> {
        SpectralDecomposition::of_weights(&self.weights, rank_tol)
    }

    /// `z(·,0)` replaced by a user-provided section.
    fn initial_field(&self, section: &[f64]) -> Field {
        let g = self.grids();
        let n = self.dim();
        let mut f = Field::zeros(g.alpha.n, g.time.nodes(), n);
        for i in 0..g.alpha.n {
            for k in 0..g.time.nodes() {
                f.at_mut(i, k).copy_from_slice(&section[i * n..(i + 1) * n]);
            }
        }
        f
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct ContractionReport {
    pub c_g: f64,
    pub c_z: f64,
    pub c_s: f64,
    pub d_norm: f64,
    pub brb_norm: f64,
    pub source_norm: f64,
    pub terminal_norm: f64,
    pub horizon: f64,
    pub c_xi: f64,
    pub contraction_ok: bool,
}

impl ContractionReport {
    /// `c_g c_z |D| T + c_g c_z c_S |BR⁻¹Bᵀ| (|QΓ − ΠD| T + |Q_fΓ_f|) T`.
    pub fn formula(&self) -> f64 {
        let t = self.horizon;
        self.c_g * self.c_z * self.d_norm * t
            + self.c_g
                * self.c_z
                * self.c_s
                * self.brb_norm
                * (self.source_norm * t + self.terminal_norm)
                * t
    }
}

pub fn contraction_constant(p: &Prepared) -> ContractionReport {
    let lp = &p.closed_loop;
    let grid = lp.grid;
    let nodes = 0..grid.nodes();
    let max_over = |f: &dyn Fn(usize) -> f64| nodes.clone().map(f).fold(0.0, f64::max);
    let c = &p.spec.coefficients;
    let mut report = ContractionReport {
        c_g: p.weights.max_row_mass(),
        c_z: p.fundamental.psi_z.max_norm(),
        c_s: p.fundamental.psi_s.max_norm(),
        d_norm: max_over(&|k| linalg::spectral_norm(&lp.frames.node(k).d)),
        brb_norm: max_over(&|k| linalg::spectral_norm(&lp.frames.node(k).brb)),
        source_norm: max_over(&|k| linalg::spectral_norm(&lp.source[2 * k])),
        terminal_norm: linalg::spectral_norm(&(&c.terminal_weight * &c.terminal_tracking)),
        horizon: c.horizon,
        c_xi: 0.0,
        contraction_ok: false,
    };
    report.c_xi = report.formula();
    report.contraction_ok = report.c_xi < 1.0;
    report
}

/// Node-wise matrices used by [`apply_xi`].
struct XiTerms {
    /// `Ψ_S(0,t_k)(QΓ − ΠD)(t_k)`
    back_source: Vec<DMatrix<f64>>,
    /// `Ψ_S(0,T) Q_fΓ_f`
    back_terminal: DMatrix<f64>,
    psi_s_from_zero: Vec<DMatrix<f64>>,
    d: Vec<DMatrix<f64>>,
    brb: Vec<DMatrix<f64>>,
    psi_z_to_zero: Vec<DMatrix<f64>>,
    psi_z_from_zero: Vec<DMatrix<f64>>,
}

impl XiTerms {
    fn new(p: &Prepared) -> Self {
        let lp = &p.closed_loop;
        let fm = &p.fundamental;
        let nodes = lp.grid.nodes();
        let c = &p.spec.coefficients;
        XiTerms {
            back_source: (0..nodes).map(|k| &fm.psi_s.to_zero[k] * &lp.source[2 * k]).collect(),
            back_terminal: &fm.psi_s.to_zero[nodes - 1] * (&c.terminal_weight * &c.terminal_tracking),
            psi_s_from_zero: fm.psi_s.from_zero.clone(),
            d: (0..nodes).map(|k| lp.frames.node(k).d.clone()).collect(),
            brb: (0..nodes).map(|k| lp.frames.node(k).brb.clone()).collect(),
            psi_z_to_zero: fm.psi_z.to_zero.clone(),
            psi_z_from_zero: fm.psi_z.from_zero.clone(),
        }
    }
}

/// `(Ξz)(α,t) = ∫_0^t Ψ_z(t,s) ∫g(α,β) [D z_β(s) + BR⁻¹Bᵀ W_β(s)] dβ ds` with
/// `W_β(s) = Ψ_S(s,T)Q_fΓ_f z_β(T) + ∫_s^T Ψ_S(s,r)(QΓ − ΠD) z_β(r) dr`, i.e.
/// `W = −S` for the backward equation driven by `z`. Time integrals use the
/// trapezoid rule on the grid.
pub fn apply_xi(p: &Prepared, z: &Field) -> Field {
    apply_xi_with(p, &XiTerms::new(p), z)
}

fn apply_xi_with(p: &Prepared, t: &XiTerms, z: &Field) -> Field {
    let n = z.dim;
    let nodes = z.nodes;
    let na = z.n_alpha;
    let h = p.grids().time.step();
    let mut v = Field::zeros(na, nodes, n);
    let mut tmp = vec![0.0; n];
    let mut acc = vec![0.0; n];
    let mut w = vec![0.0; n];
    for b in 0..na {
        // Cumulative trapezoid from T backwards.
        linalg::mat_vec(&t.back_terminal, z.at(b, nodes - 1), &mut acc);
        let mut prev = vec![0.0; n];
        linalg::mat_vec(&t.back_source[nodes - 1], z.at(b, nodes - 1), &mut prev);
        for k in (0..nodes).rev() {
            if k + 1 < nodes {
                linalg::mat_vec(&t.back_source[k], z.at(b, k), &mut tmp);
                for c in 0..n {
                    acc[c] += 0.5 * h * (tmp[c] + prev[c]);
                }
                prev.copy_from_slice(&tmp);
            }
            linalg::mat_vec(&t.psi_s_from_zero[k], &acc, &mut w);
            let out = v.at_mut(b, k);
            linalg::mat_vec(&t.d[k], z.at(b, k), out);
            linalg::mat_vec_add(&t.brb[k], &w, out);
        }
    }
    let mut y = Field::zeros(na, nodes, n);
    linalg::kernel_apply(1.0, &p.kernel, &v.data, nodes * n, &mut y.data);
    let mut out = Field::zeros(na, nodes, n);
    let mut cum = vec![0.0; n];
    let mut prev = vec![0.0; n];
    for a in 0..na {
        cum.iter_mut().for_each(|x| *x = 0.0);
        linalg::mat_vec(&t.psi_z_to_zero[0], y.at(a, 0), &mut prev);
        for k in 1..nodes {
            linalg::mat_vec(&t.psi_z_to_zero[k], y.at(a, k), &mut tmp);
            for c in 0..n {
                cum[c] += 0.5 * h * (tmp[c] + prev[c]);
            }
            prev.copy_from_slice(&tmp);
            linalg::mat_vec(&t.psi_z_from_zero[k], &cum, out.at_mut(a, k));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPointOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Relaxation factor `θ ∈ (0, 1]`; 1 is the plain Picard update.
    pub relaxation: f64,
    /// Iterate even when the contraction bound is not below one.
    pub force: bool,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        FixedPointOptions { tol: 1e-9, max_iter: 500, relaxation: 1.0, force: false }
    }
}

/// Picard iteration `z ← Ξz + Ψ_z(t,0) z(·,0)` from the frozen initial
/// section, followed by backward solves for `S` and `r`.
pub fn solve_fixed_point<E: Executor>(
    p: &Prepared,
    opts: &FixedPointOptions,
    exec: &E,
) -> Result<MeanFieldSolution> {
    if !(opts.relaxation > 0.0 && opts.relaxation <= 1.0) {
        return Err(Error::InvalidModel(format!(
            "relaxation must lie in (0,1], got {}",
            opts.relaxation
        )));
    }
    let report = contraction_constant(p);
    if !report.contraction_ok && !opts.force {
        return Err(Error::NotContractive { c_xi: report.c_xi });
    }
    let n = p.dim();
    let g = p.grids();
    let nodes = g.time.nodes();
    let terms = XiTerms::new(p);
    // Homogeneous part Ψ_z(t,0) z(α,0).
    let mut free = Field::zeros(g.alpha.n, nodes, n);
    for i in 0..g.alpha.n {
        let z0 = &p.initial_section[i * n..(i + 1) * n];
        for k in 0..nodes {
            linalg::mat_vec(&terms.psi_z_from_zero[k], z0, free.at_mut(i, k));
        }
    }
    let mut z = p.initial_field(&p.initial_section);
    let mut change = f64::INFINITY;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        let mut next = apply_xi_with(p, &terms, &z);
        for (x, f) in next.data.iter_mut().zip(&free.data) {
            *x += f;
        }
        if opts.relaxation < 1.0 {
            let th = opts.relaxation;
            for (x, old) in next.data.iter_mut().zip(&z.data) {
                *x = th * *x + (1.0 - th) * old;
            }
        }
        change = next.sup_distance(&z);
        z = next;
        iterations += 1;
        if !change.is_finite() {
            break;
        }
        if change <= opts.tol {
            let (s, r) = backward_solves(p, &z, exec)?;
            return Ok(MeanFieldSolution {
                method: Method::FixedPoint,
                z,
                s,
                r,
                iterations,
                last_change: change,
                gains: None,
            });
        }
    }
    Err(Error::NonConvergence { iterations, residual: change })
}

/// `S` by backward RK4 of its linear equation driven by `z`, then `r`.
fn backward_solves<E: Executor>(p: &Prepared, z: &Field, exec: &E) -> Result<(Field, Vec<Vec<f64>>)> {
    let per_alpha = exec.map(z.n_alpha, |i| -> Result<(MatrixPath, Vec<f64>)> {
        let zp = z.path(i);
        let s = solve_s(p, &zp)?;
        let r = solve_r(p, &zp, &s)?;
        Ok((s, r))
    });
    let mut s_field = Field::zeros(z.n_alpha, z.nodes, z.dim);
    let mut r = Vec::with_capacity(z.n_alpha);
    for (i, item) in per_alpha.into_iter().enumerate() {
        let (s, ri) = item?;
        s_field.set_path(i, &s);
        r.push(ri);
    }
    Ok((s_field, r))
}

/// `Ṡ = −(Aᵀ − ΠBR⁻¹Bᵀ + 2γΠσσᵀ) S + (QΓ − ΠD) z`, `S(T) = −Q_fΓ_f z(T)`.
pub fn solve_s(p: &Prepared, z: &MatrixPath) -> Result<MatrixPath> {
    solve_s_with(&p.spec, &p.closed_loop, z)
}

pub fn solve_s_with(spec: &ProblemSpec, lp: &ClosedLoop, z: &MatrixPath) -> Result<MatrixPath> {
    let c = &spec.coefficients;
    let last = z.len() - 1;
    let terminal = -(&c.terminal_weight * &c.terminal_tracking * z.at_node(last));
    rk4(
        |j, s| -(&lp.h[j] * s) + &lp.source[j] * z.at_half(j),
        terminal,
        lp.grid,
        Direction::Backward,
        false,
        "S",
    )
}

/// `ṙ = Sᵀ(BR⁻¹Bᵀ − 2γσσᵀ)S − 2zᵀDᵀS − zᵀΓᵀQΓz − Tr(σσᵀΠ)`,
/// `r(T) = z(T)ᵀΓ_fᵀQ_fΓ_f z(T)`.
pub fn solve_r(p: &Prepared, z: &MatrixPath, s: &MatrixPath) -> Result<Vec<f64>> {
    solve_r_with(&p.spec, &p.closed_loop, z, s)
}

pub fn solve_r_with(
    spec: &ProblemSpec,
    lp: &ClosedLoop,
    z: &MatrixPath,
    s: &MatrixPath,
) -> Result<Vec<f64>> {
    let c = &spec.coefficients;
    let gamma = c.risk_sensitivity;
    let last = z.len() - 1;
    let zt = &c.terminal_tracking * z.at_node(last);
    let terminal = (zt.transpose() * &c.terminal_weight * &zt)[(0, 0)];
    let path = rk4(
        |j, _| {
            let fr = lp.frames.half(j);
            let zj = z.at_half(j);
            let sj = s.at_half(j);
            let quad = &fr.brb - &fr.sst * (2.0 * gamma);
            let gz = &c.tracking * &zj;
            let value = (sj.transpose() * quad * &sj)[(0, 0)]
                - 2.0 * (zj.transpose() * fr.d.transpose() * &sj)[(0, 0)]
                - (gz.transpose() * &fr.q * &gz)[(0, 0)]
                - (&fr.sst * &lp.pi[j]).trace();
            DMatrix::from_element(1, 1, value)
        },
        DMatrix::from_element(1, 1, terminal),
        lp.grid,
        Direction::Backward,
        false,
        "r",
    )?;
    Ok(path.values.iter().map(|v| v[(0, 0)]).collect())
}

/// Spectral decoupling with the decomposition of the solver kernel.
pub fn solve_spectral<E: Executor>(
    p: &Prepared,
    decomposition: &SpectralDecomposition,
    exec: &E,
) -> Result<MeanFieldSolution> {
    solve_spectral_with(p, decomposition, &p.initial_section, exec)
}

/// Spectral decoupling `S(·,t) = P⊥(t) z + Σ_ℓ (P_ℓ(t) − P⊥(t)) ⟨f_ℓ, z⟩ f_ℓ`.
///
/// The eigencomponents `c_ℓ = ⟨f_ℓ, z⟩` follow
/// `ċ_ℓ = (A − BR⁻¹BᵀΠ + λ_ℓD − λ_ℓBR⁻¹BᵀP_ℓ) c_ℓ`; the orthogonal remainder
/// of the initial section is carried by `Ψ_z`.
pub fn solve_spectral_with<E: Executor>(
    p: &Prepared,
    decomposition: &SpectralDecomposition,
    initial_section: &[f64],
    exec: &E,
) -> Result<MeanFieldSolution> {
    let n = p.dim();
    let g = p.grids();
    let na = g.alpha.n;
    let nodes = g.time.nodes();
    if decomposition.rank > 0 && decomposition.grid_size() != na {
        return Err(Error::Dimension(format!(
            "decomposition has grid size {}, solver grid has {na}",
            decomposition.grid_size()
        )));
    }
    if initial_section.len() != na * n {
        return Err(Error::Dimension("initial section has the wrong length".into()));
    }
    let lp = &p.closed_loop;
    let p_perp = ode::solve_p_perp(&p.spec, lp)?;
    let gains: Vec<Result<MatrixPath>> = exec.map(decomposition.rank, |l| {
        let lambda = decomposition.eigenvalues[l];
        ode::solve_p_ell(&p.spec, lp, lambda).map_err(|e| match e {
            Error::Blowup { time, .. } => {
                Error::Blowup { what: format!("P_ell for l = {} (lambda = {lambda})", l + 1), time }
            }
            other => other,
        })
    });
    let p_ell: Vec<MatrixPath> = gains.into_iter().collect::<Result<_>>()?;

    // Initial components and orthogonal remainder.
    let inv_n = 1.0 / na as f64;
    let mut remainder: Vec<f64> = initial_section.to_vec();
    let mut comps0 = Vec::with_capacity(decomposition.rank);
    for f in &decomposition.eigenvectors {
        let mut c = DMatrix::zeros(n, 1);
        for i in 0..na {
            for d in 0..n {
                c[(d, 0)] += f[i] * initial_section[i * n + d] * inv_n;
            }
        }
        for i in 0..na {
            for d in 0..n {
                remainder[i * n + d] -= c[(d, 0)] * f[i];
            }
        }
        comps0.push(c);
    }
    let comps: Vec<Result<MatrixPath>> = exec.map(decomposition.rank, |l| {
        let lambda = decomposition.eigenvalues[l];
        let pl = &p_ell[l];
        rk4(
            |j, c| {
                let fr = lp.frames.half(j);
                let gen = &lp.f[j] + &fr.d * lambda - &fr.brb * pl.at_half(j) * lambda;
                gen * c
            },
            comps0[l].clone(),
            g.time,
            Direction::Forward,
            false,
            "eigencomponent",
        )
    });
    let comps: Vec<MatrixPath> = comps.into_iter().collect::<Result<_>>()?;

    let psi_z = &p.fundamental.psi_z;
    let mut z = Field::zeros(na, nodes, n);
    let mut s = Field::zeros(na, nodes, n);
    let mut rho = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    for i in 0..na {
        let rho0 = &remainder[i * n..(i + 1) * n];
        for k in 0..nodes {
            linalg::mat_vec(&psi_z.from_zero[k], rho0, &mut rho);
            linalg::mat_vec(p_perp.at_node(k), &rho, &mut tmp);
            z.at_mut(i, k).copy_from_slice(&rho);
            s.at_mut(i, k).copy_from_slice(&tmp);
            for (l, f) in decomposition.eigenvectors.iter().enumerate() {
                let c = comps[l].at_node(k);
                let pc = p_ell[l].at_node(k) * c;
                let zi = z.at_mut(i, k);
                for d in 0..n {
                    zi[d] += f[i] * c[(d, 0)];
                }
                let si = s.at_mut(i, k);
                for d in 0..n {
                    si[d] += f[i] * pc[(d, 0)];
                }
            }
        }
    }
    let r: Vec<Result<Vec<f64>>> = exec.map(na, |i| solve_r(p, &z.path(i), &s.path(i)));
    let r = r.into_iter().collect::<Result<_>>()?;
    Ok(MeanFieldSolution {
        method: Method::Spectral,
        z,
        s,
        r,
        iterations: 0,
        last_change: 0.0,
        gains: Some(SpectralGains { decomposition: decomposition.clone(), p_perp, p_ell }),
    })
}

/// Rebuilds `E x_α` from `d/dt E x_α = (A − BR⁻¹BᵀΠ) E x_α − BR⁻¹Bᵀ S_α + D z_α`,
/// `E x_α(0) = m(α)`, and returns `sup_{α,t} |z_α(t) − ∫g(α,β) E x_β(t) dβ|`.
pub fn consistency_residual(p: &Prepared, sol: &MeanFieldSolution) -> Result<f64> {
    let mean = mean_paths(p, sol)?;
    let mut rebuilt = Field::zeros(mean.n_alpha, mean.nodes, mean.dim);
    linalg::kernel_apply(1.0, &p.kernel, &mean.data, mean.nodes * mean.dim, &mut rebuilt.data);
    Ok(rebuilt.sup_distance(&sol.z))
}

/// `E x_α(t)` on the grid under the equilibrium feedback.
pub fn mean_paths(p: &Prepared, sol: &MeanFieldSolution) -> Result<Field> {
    let lp = &p.closed_loop;
    let mut out = Field::zeros(sol.z.n_alpha, sol.z.nodes, sol.z.dim);
    for i in 0..sol.z.n_alpha {
        let zp = sol.z.path(i);
        let sp = sol.s.path(i);
        let m0 = DMatrix::from_column_slice(p.dim(), 1, p.means[i].as_slice());
        let path = rk4(
            |j, x| {
                let fr = lp.frames.half(j);
                &lp.f[j] * x - &fr.brb * sp.at_half(j) + &fr.d * zp.at_half(j)
            },
            m0,
            lp.grid,
            Direction::Forward,
            false,
            "mean state",
        )?;
        out.set_path(i, &path);
    }
    Ok(out)
}

/// Equilibrium objects at a single `α` off the solver grid.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeSolution {
    pub alpha: f64,
    pub z: MatrixPath,
    pub s: MatrixPath,
    pub r: Vec<f64>,
}

/// Nyström extension: with the grid solution frozen inside the graphon
/// integrals, `z_α`, `S_α` and `r_α` solve linear ODEs for any `α ∈ [0,1]`.
pub fn extend(p: &Prepared, sol: &MeanFieldSolution, alpha: f64) -> Result<NodeSolution> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::OutOfRange(format!("alpha = {alpha} outside [0,1]")));
    }
    let n = p.dim();
    let g = p.grids();
    let lp = &p.closed_loop;
    let w = p.graphon.section_weights(alpha, g.alpha);
    let z0 = {
        let mut acc = DMatrix::zeros(n, 1);
        for (wj, m) in w.iter().zip(&p.means) {
            for d in 0..n {
                acc[(d, 0)] += wj * m[d];
            }
        }
        acc
    };
    // Forcing D ∫g z − BR⁻¹Bᵀ ∫g S on nodes.
    let nodes = g.time.nodes();
    let mut gz = vec![0.0; n];
    let mut gs = vec![0.0; n];
    let mut forcing = Vec::with_capacity(nodes);
    for k in 0..nodes {
        gz.iter_mut().for_each(|x| *x = 0.0);
        gs.iter_mut().for_each(|x| *x = 0.0);
        for (j, wj) in w.iter().enumerate() {
            let zj = sol.z.at(j, k);
            let sj = sol.s.at(j, k);
            for d in 0..n {
                gz[d] += wj * zj[d];
                gs[d] += wj * sj[d];
            }
        }
        let fr = lp.frames.node(k);
        let mut out = vec![0.0; n];
        linalg::mat_vec(&fr.d, &gz, &mut out);
        let mut b = vec![0.0; n];
        linalg::mat_vec(&fr.brb, &gs, &mut b);
        for d in 0..n {
            out[d] -= b[d];
        }
        forcing.push(DMatrix::from_column_slice(n, 1, &out));
    }
    let forcing = MatrixPath { values: forcing, direction: Direction::Forward };
    let z = rk4(
        |j, x| &lp.f[j] * x + forcing.at_half(j),
        z0,
        g.time,
        Direction::Forward,
        false,
        "z",
    )?;
    let s = solve_s(p, &z)?;
    let r = solve_r(p, &z, &s)?;
    Ok(NodeSolution { alpha, z, s, r })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub enum MonotonicityCase {
    A,
    B,
    Neither,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct MonotonicityReport {
    pub mu: f64,
    pub nu: f64,
    pub case: MonotonicityCase,
    /// Smallest eigenvalue over the grid of each of the three matrices
    /// whose semi-definiteness is required.
    pub inequality_margins: [f64; 3],
    /// Smallest retained positive eigenvalue of the kernel, if any.
    pub lambda_min_positive: Option<f64>,
}

/// The sufficient monotonicity conditions for kernels with finitely many
/// positive eigenvalues and initial means in their span:
///
/// 1. `−(QΓ + ΓᵀQ − ΠD − DᵀΠ)/2 − γ²Πσσᵀσσᵀ Π − DDᵀ/4 ⪰ 0`,
/// 2. `BR⁻¹Bᵀ λ_min − 2I ≻ 0`,
/// 3. `−(Q_fΓ_f + Γ_fᵀQ_f) ⪰ 0`.
///
/// Without a positive eigenvalue condition 2 is evaluated at `λ_min = 0`.
pub fn check_monotonicity(p: &Prepared, decomposition: &SpectralDecomposition) -> MonotonicityReport {
    let lp = &p.closed_loop;
    let c = &p.spec.coefficients;
    let n = p.dim();
    let gamma = c.risk_sensitivity;
    let lambda_min = decomposition.eigenvalues.iter().copied().filter(|&l| l > 0.0).reduce(f64::min);
    let lam = lambda_min.unwrap_or(0.0);
    let eye = DMatrix::<f64>::identity(n, n);
    let mut m1 = f64::INFINITY;
    let mut m2 = f64::INFINITY;
    let mut mu = f64::INFINITY;
    let mut q_star = Vec::with_capacity(lp.grid.nodes());
    for k in 0..lp.grid.nodes() {
        let fr = lp.frames.node(k);
        let pi = &lp.pi[2 * k];
        let qg = &fr.q * &c.tracking;
        let pd = pi * &fr.d;
        let ss = &fr.sst;
        let core = (&qg + qg.transpose() - &pd - pd.transpose()) * 0.5
            + pi * ss * ss * pi * (gamma * gamma)
            + &fr.d * fr.d.transpose() * 0.25;
        let core = linalg::symmetrize(&core);
        m1 = m1.min(linalg::min_sym_eigenvalue(&(-&core)));
        q_star.push(linalg::max_sym_eigenvalue(&core));
        let second = &fr.brb * lam - &eye * 2.0;
        let margin = linalg::min_sym_eigenvalue(&second);
        m2 = m2.min(margin);
        // Largest eigenvalue of 2I − BR⁻¹Bᵀλ_min.
        mu = mu.min(libm::fabs(-margin));
    }
    let qf = &c.terminal_weight * &c.terminal_tracking;
    let qf_sym = (&qf + qf.transpose()) * 0.5;
    let m3 = linalg::min_sym_eigenvalue(&(-(&qf_sym * 2.0)));
    let qf_star = linalg::max_sym_eigenvalue(&qf_sym);
    let nu = q_star.iter().map(|&q| libm::fabs(q.max(qf_star))).fold(f64::INFINITY, f64::min);
    let holds = m1 >= -PSD_TOL && m2 > PSD_TOL && m3 >= -PSD_TOL;
    let case = if holds && mu > 0.0 { MonotonicityCase::A } else { MonotonicityCase::Neither };
    MonotonicityReport {
        mu,
        nu,
        case,
        inequality_margins: [m1, m2, m3],
        lambda_min_positive: lambda_min,
    }
}

/// Largest absolute difference of two solutions over `z`, `S` and `r`.
pub fn solution_distance(a: &MeanFieldSolution, b: &MeanFieldSolution) -> f64 {
    let r = a
        .r
        .iter()
        .flatten()
        .zip(b.r.iter().flatten())
        .map(|(x, y)| libm::fabs(x - y))
        .fold(0.0, f64::max);
    a.z.sup_distance(&b.z).max(a.s.sup_distance(&b.s)).max(r)
}
