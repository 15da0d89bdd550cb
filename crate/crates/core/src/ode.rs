//! Fixed-step RK4 on the shared time grid: the Riccati equations, the
//! spectral gain equations, and fundamental solution matrices.
//!
//! Vector fields are evaluated on a half-step index `j` (time `j h / 2`) so
//! that coefficients and previously computed paths can be tabulated once.
//! Paths known only on grid nodes are evaluated at midpoints by four-point
//! cubic interpolation, which keeps the overall scheme fourth order.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::DMatrix;

use crate::linalg;
use crate::model::{Frame, ProblemSpec, TimeGrid};
use crate::{Error, Result};

/// Entry magnitude treated as finite-time escape.
pub const BLOWUP_THRESHOLD: f64 = 1e12;
/// Condition number of `Ψ(t,0)` above which a warning is recorded.
pub const CONDITION_WARNING: f64 = 1e10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Values on the `n_t + 1` grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixPath {
    pub values: Vec<DMatrix<f64>>,
    pub direction: Direction,
}

impl MatrixPath {
    pub fn at_node(&self, k: usize) -> &DMatrix<f64> {
        &self.values[k]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Value at half index `j`; odd indices are interpolated.
    pub fn at_half(&self, j: usize) -> DMatrix<f64> {
        if j.is_multiple_of(2) {
            return self.values[j / 2].clone();
        }
        let (start, w) = midpoint_stencil(j / 2, self.values.len() - 1);
        let mut out = &self.values[start] * w[0];
        for (i, wi) in w.iter().enumerate().skip(1) {
            if *wi != 0.0 {
                out += &self.values[start + i] * *wi;
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(|m| m.amax()).fold(0.0, f64::max)
    }
}

/// Lagrange weights for the midpoint of `[k, k+1]` on a grid with `steps`
/// intervals: first node index and up to four weights.
pub(crate) fn midpoint_stencil(k: usize, steps: usize) -> (usize, [f64; 4]) {
    match steps {
        0 => (0, [1.0, 0.0, 0.0, 0.0]),
        1 => (0, [0.5, 0.5, 0.0, 0.0]),
        2 => {
            if k == 0 {
                (0, [0.375, 0.75, -0.125, 0.0])
            } else {
                (0, [-0.125, 0.75, 0.375, 0.0])
            }
        }
        _ => {
            if k == 0 {
                (0, [5.0 / 16.0, 15.0 / 16.0, -5.0 / 16.0, 1.0 / 16.0])
            } else if k + 1 == steps {
                (k - 2, [1.0 / 16.0, -5.0 / 16.0, 15.0 / 16.0, 5.0 / 16.0])
            } else {
                (k - 1, [-1.0 / 16.0, 9.0 / 16.0, 9.0 / 16.0, -1.0 / 16.0])
            }
        }
    }
}

/// Classical RK4 for `ẏ = f(j, y)` with `f` evaluated at half index `j`.
///
/// A backward integration starts from `boundary` at `T` and steps with `−h`;
/// the returned path is indexed by grid node either way. With `symmetric`
/// set every accepted step is replaced by its symmetric part.
pub fn rk4<F>(
    mut f: F,
    boundary: DMatrix<f64>,
    grid: TimeGrid,
    direction: Direction,
    symmetric: bool,
    what: &str,
) -> Result<MatrixPath>
where
    F: FnMut(usize, &DMatrix<f64>) -> DMatrix<f64>,
{
    let n = grid.steps;
    let h = grid.step();
    let mut values = alloc::vec![DMatrix::zeros(0, 0); n + 1];
    check_finite(&boundary, what, grid.t(if direction == Direction::Forward { 0 } else { n }))?;
    let (signed_h, start) = match direction {
        Direction::Forward => (h, 0),
        Direction::Backward => (-h, n),
    };
    let mut y = boundary;
    let mut k = start;
    values[k] = y.clone();
    for _ in 0..n {
        let (j0, j1, next) = match direction {
            Direction::Forward => (2 * k, 2 * k + 2, k + 1),
            Direction::Backward => (2 * k, 2 * k - 2, k - 1),
        };
        let jm = (j0 + j1) / 2;
        let k1 = f(j0, &y);
        let k2 = f(jm, &(&y + &k1 * (0.5 * signed_h)));
        let k3 = f(jm, &(&y + &k2 * (0.5 * signed_h)));
        let k4 = f(j1, &(&y + &k3 * signed_h));
        y += (k1 + (k2 + k3) * 2.0 + k4) * (signed_h / 6.0);
        if symmetric {
            y = linalg::symmetrize(&y);
        }
        check_finite(&y, what, grid.t(next))?;
        k = next;
        values[k] = y.clone();
    }
    Ok(MatrixPath { values, direction })
}

fn check_finite(y: &DMatrix<f64>, what: &str, time: f64) -> Result<()> {
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { time });
    }
    if y.amax() > BLOWUP_THRESHOLD {
        return Err(Error::Blowup { what: what.into(), time });
    }
    Ok(())
}

/// Coefficients tabulated on half indices. Time-invariant models keep a
/// single frame.
#[derive(Debug, Clone)]
pub struct FrameTable {
    frames: Vec<Frame>,
}

impl FrameTable {
    pub fn new(spec: &ProblemSpec, grid: TimeGrid) -> Result<Self> {
        let c = &spec.coefficients;
        let constant = [
            &c.drift,
            &c.control_gain,
            &c.coupling,
            &c.noise,
            &c.state_weight,
            &c.control_weight,
        ]
        .iter()
        .all(|m| m.is_constant());
        let frames = if constant {
            alloc::vec![spec.frame(0.0)?]
        } else {
            (0..=2 * grid.steps).map(|j| spec.frame(grid.t_half(j))).collect::<Result<_>>()?
        };
        Ok(FrameTable { frames })
    }

    pub fn half(&self, j: usize) -> &Frame {
        if self.frames.len() == 1 {
            &self.frames[0]
        } else {
            &self.frames[j]
        }
    }

    pub fn node(&self, k: usize) -> &Frame {
        self.half(2 * k)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution {
    pub pi: MatrixPath,
}

/// `Π̇ = −ΠA − AᵀΠ + Π(BR⁻¹Bᵀ − 2γσσᵀ)Π − Q`, `Π(T) = Q_f`.
pub fn solve_riccati_pi(spec: &ProblemSpec, grid: TimeGrid) -> Result<RiccatiSolution> {
    solve_riccati_pi_delta(spec, 0.0, grid)
}

/// The same equation with `2γ` replaced by `2γ/(1+δ′)`.
pub fn solve_riccati_pi_delta(
    spec: &ProblemSpec,
    delta_prime: f64,
    grid: TimeGrid,
) -> Result<RiccatiSolution> {
    if !(delta_prime >= 0.0) || !delta_prime.is_finite() {
        return Err(Error::InvalidModel(format!("delta' must be non-negative, got {delta_prime}")));
    }
    let frames = FrameTable::new(spec, grid)?;
    let risk = 2.0 * spec.coefficients.risk_sensitivity / (1.0 + delta_prime);
    let pi = rk4(
        |j, p| {
            let f = frames.half(j);
            let quad = &f.brb - &f.sst * risk;
            let pa = p * &f.a;
            -&pa - pa.transpose() + p * quad * p - &f.q
        },
        spec.coefficients.terminal_weight.clone(),
        grid,
        Direction::Backward,
        true,
        "Pi",
    )?;
    Ok(RiccatiSolution { pi })
}

/// Closed-loop terms that recur in every downstream equation, on half indices:
/// `F = A − BR⁻¹BᵀΠ`, `H = Fᵀ + 2γΠσσᵀ`, and `QΓ − ΠD`.
#[derive(Debug, Clone)]
pub struct ClosedLoop {
    pub pi: Vec<DMatrix<f64>>,
    pub f: Vec<DMatrix<f64>>,
    pub h: Vec<DMatrix<f64>>,
    pub source: Vec<DMatrix<f64>>,
    pub frames: FrameTable,
    pub grid: TimeGrid,
}

impl ClosedLoop {
    pub fn new(spec: &ProblemSpec, pi: &RiccatiSolution, grid: TimeGrid) -> Result<Self> {
        if pi.pi.len() != grid.nodes() {
            return Err(Error::Dimension("Riccati path does not match the time grid".into()));
        }
        let frames = FrameTable::new(spec, grid)?;
        let gamma = spec.coefficients.risk_sensitivity;
        let tracking = &spec.coefficients.tracking;
        let count = 2 * grid.steps + 1;
        let mut out = ClosedLoop {
            pi: Vec::with_capacity(count),
            f: Vec::with_capacity(count),
            h: Vec::with_capacity(count),
            source: Vec::with_capacity(count),
            frames,
            grid,
        };
        for j in 0..count {
            let p = linalg::symmetrize(&pi.pi.at_half(j));
            let fr = out.frames.half(j);
            let f = &fr.a - &fr.brb * &p;
            let h = f.transpose() + &p * &fr.sst * (2.0 * gamma);
            let source = &fr.q * tracking - &p * &fr.d;
            out.pi.push(p);
            out.f.push(f);
            out.h.push(h);
            out.source.push(source);
        }
        Ok(out)
    }
}

/// `Ṗ⊥ = −P⊥F − FᵀP⊥ − 2γΠσσᵀP⊥ + (QΓ − ΠD)`, `P⊥(T) = −Q_fΓ_f`.
pub fn solve_p_perp(spec: &ProblemSpec, lp: &ClosedLoop) -> Result<MatrixPath> {
    solve_p_ell(spec, lp, 0.0)
}

/// `Ṗ = −P(F + λD) − (Fᵀ + 2γΠσσᵀ)P + λ P BR⁻¹Bᵀ P + (QΓ − ΠD)`,
/// `P(T) = −Q_fΓ_f`. At `λ = 0` this is the `P⊥` equation.
pub fn solve_p_ell(spec: &ProblemSpec, lp: &ClosedLoop, lambda: f64) -> Result<MatrixPath> {
    let terminal = -(&spec.coefficients.terminal_weight * &spec.coefficients.terminal_tracking);
    let what = if lambda == 0.0 { String::from("P_perp") } else { format!("P[{lambda}]") };
    rk4(
        |j, p| {
            let fr = lp.frames.half(j);
            let mut rhs = -(p * &lp.f[j]) - &lp.h[j] * p + &lp.source[j];
            if lambda != 0.0 {
                rhs -= p * &fr.d * lambda;
                rhs += p * &fr.brb * p * lambda;
            }
            rhs
        },
        terminal,
        lp.grid,
        Direction::Backward,
        false,
        &what,
    )
}

/// `Ψ(t_k, 0)` and its inverse `Ψ(0, t_k)` on every node; two-time values
/// follow from `Ψ(t,s) = Ψ(t,0)Ψ(0,s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Propagator {
    pub from_zero: Vec<DMatrix<f64>>,
    pub to_zero: Vec<DMatrix<f64>>,
    pub max_condition: f64,
}

impl Propagator {
    fn new(path: MatrixPath) -> Result<Self> {
        let mut to_zero = Vec::with_capacity(path.len());
        let mut max_condition = 1.0f64;
        for m in &path.values {
            let inv = linalg::inverse(m)?;
            max_condition = max_condition.max(linalg::condition_number(m, &inv));
            to_zero.push(inv);
        }
        Ok(Propagator { from_zero: path.values, to_zero, max_condition })
    }

    /// `Ψ(t_k, t_l)`.
    pub fn between(&self, k: usize, l: usize) -> DMatrix<f64> {
        &self.from_zero[k] * &self.to_zero[l]
    }

    /// `max_{k,l} ‖Ψ(t_k, t_l)‖₂`.
    pub fn max_norm(&self) -> f64 {
        let n = self.from_zero.len();
        let mut best = 0.0f64;
        for k in 0..n {
            for l in 0..n {
                best = best.max(linalg::spectral_norm(&self.between(k, l)));
            }
        }
        best
    }

    pub fn dim(&self) -> usize {
        self.from_zero[0].nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FundamentalMatrices {
    /// Solves `ẏ = (A − BR⁻¹BᵀΠ) y`.
    pub psi_z: Propagator,
    /// Solves `ẏ = −(Aᵀ − ΠBR⁻¹Bᵀ + 2γΠσσᵀ) y`.
    pub psi_s: Propagator,
    pub warnings: Vec<String>,
}

pub fn fundamental_matrices(lp: &ClosedLoop) -> Result<FundamentalMatrices> {
    let n = lp.f[0].nrows();
    let eye = DMatrix::identity(n, n);
    let z = rk4(|j, y| &lp.f[j] * y, eye.clone(), lp.grid, Direction::Forward, false, "Psi_z")?;
    let s = rk4(|j, y| -(&lp.h[j] * y), eye, lp.grid, Direction::Forward, false, "Psi_S")?;
    let psi_z = Propagator::new(z)?;
    let psi_s = Propagator::new(s)?;
    let mut warnings = Vec::new();
    for (name, p) in [("Psi_z", &psi_z), ("Psi_S", &psi_s)] {
        if p.max_condition > CONDITION_WARNING {
            warnings.push(format!("{name}(t,0) has condition number {:e}", p.max_condition));
        }
    }
    Ok(FundamentalMatrices { psi_z, psi_s, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::{benchmark_spec, scalar_spec};
    use crate::model::{Coefficients, Grids, InitialLaw, MeanProfile, ScalarCoefficients, TimeMatrix};
    use nalgebra::DVector;
    use proptest::prelude::*;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn exp_error(steps: usize) -> f64 {
        let grid = TimeGrid::new(1.0, steps).unwrap();
        let path = rk4(|_, y| y.clone(), scalar(1.0), grid, Direction::Forward, false, "y").unwrap();
        (path.values[steps][(0, 0)] - core::f64::consts::E).abs()
    }

    #[test]
    fn exponential_test_and_order() {
        assert!(exp_error(100) < 1e-8);
        let ratio = exp_error(10) / exp_error(20);
        assert!((14.0..=18.0).contains(&ratio), "ratio {ratio}");
        let ratio = exp_error(20) / exp_error(40);
        assert!((14.0..=18.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn zero_field_backward_is_constant() {
        let grid = TimeGrid::new(2.0, 7).unwrap();
        let c = DMatrix::from_row_slice(2, 1, &[1.5, -2.0]);
        let path = rk4(|_, y| y * 0.0, c.clone(), grid, Direction::Backward, false, "y").unwrap();
        assert!(path.values.iter().all(|v| *v == c));
    }

    /// Scalar model with `A = Q = 0` and quadratic coefficient `0.09`.
    fn pure_quadratic() -> ScalarCoefficients {
        let mut s = ScalarCoefficients::benchmark();
        s.drift = 0.0;
        s.state_weight = 0.0;
        s
    }

    fn riccati_oracle(t: f64) -> f64 {
        0.8 / (1.0 + 0.8 * 0.09 * (1.0 - t))
    }

    #[test]
    fn riccati_matches_analytic_solution() {
        let spec = scalar_spec(pure_quadratic(), 1000, 2);
        let sol = solve_riccati_pi(&spec, spec.grids.time).unwrap();
        for (k, v) in sol.pi.values.iter().enumerate() {
            assert!((v[(0, 0)] - riccati_oracle(spec.grids.time.t(k))).abs() < 1e-8);
        }
        assert!((sol.pi.values[0][(0, 0)] - 0.746268656716418).abs() < 1e-8);
    }

    #[test]
    fn riccati_is_fourth_order() {
        let err = |n: usize| {
            let spec = scalar_spec(pure_quadratic(), n, 2);
            let sol = solve_riccati_pi(&spec, spec.grids.time).unwrap();
            (sol.pi.values[0][(0, 0)] - riccati_oracle(0.0)).abs()
        };
        // The quadratic term is mild, so only very coarse steps keep the
        // error above round-off.
        let ratio = err(2) / err(4);
        assert!((14.0..=18.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn zero_weights_give_zero_solution() {
        let mut s = ScalarCoefficients::benchmark();
        s.state_weight = 0.0;
        s.terminal_weight = 0.0;
        let spec = scalar_spec(s, 100, 2);
        let sol = solve_riccati_pi(&spec, spec.grids.time).unwrap();
        assert!(sol.pi.values.iter().all(|v| v[(0, 0)] == 0.0));
    }

    #[test]
    fn benchmark_terminal_values() {
        let spec = benchmark_spec(1000, 4);
        let sol = solve_riccati_pi(&spec, spec.grids.time).unwrap();
        assert_eq!(sol.pi.values[1000][(0, 0)], 0.8);
        assert!(sol.pi.values.iter().all(|v| v[(0, 0)].is_finite() && v[(0, 0)] >= 0.0));
        let lp = ClosedLoop::new(&spec, &sol, spec.grids.time).unwrap();
        let perp = solve_p_perp(&spec, &lp).unwrap();
        // Q_fΓ_f = −0.64 up to the rounding of the product itself.
        assert!((perp.values[1000][(0, 0)] - 0.64).abs() <= 2.0 * f64::EPSILON);
        for lambda in [0.5, 0.25] {
            let p = solve_p_ell(&spec, &lp, lambda).unwrap();
            assert_eq!(p.values[1000], perp.values[1000]);
            assert!(p.max_abs().is_finite());
        }
    }

    #[test]
    fn riccati_central_difference_residual_is_second_order() {
        let residual = |n: usize| {
            let spec = benchmark_spec(n, 2);
            let grid = spec.grids.time;
            let sol = solve_riccati_pi(&spec, grid).unwrap();
            let f = spec.frame(0.0).unwrap();
            let h = grid.step();
            let mut worst = 0.0f64;
            for k in 1..n {
                let p = sol.pi.values[k][(0, 0)];
                let dp = (sol.pi.values[k + 1][(0, 0)] - sol.pi.values[k - 1][(0, 0)]) / (2.0 * h);
                let a = f.a[(0, 0)];
                let rhs = -2.0 * a * p + p * p * (f.brb[(0, 0)] - 0.6 * f.sst[(0, 0)]) - f.q[(0, 0)];
                worst = worst.max((dp - rhs).abs());
            }
            (worst, h)
        };
        let (r1, h1) = residual(100);
        let (r2, _) = residual(200);
        assert!(r1 <= 10.0 * h1 * h1);
        let ratio = r1 / r2;
        assert!((3.5..4.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn delta_variant() {
        let spec = benchmark_spec(500, 2);
        let g = spec.grids.time;
        let base = solve_riccati_pi(&spec, g).unwrap();
        let zero = solve_riccati_pi_delta(&spec, 0.0, g).unwrap();
        assert_eq!(base, zero);
        let half = solve_riccati_pi_delta(&spec, 0.5, g).unwrap();
        assert_eq!(half.pi.values[500][(0, 0)], 0.8);
        let big = solve_riccati_pi_delta(&spec, 1e6, g).unwrap();
        // Larger δ′ strengthens the damping quadratic term.
        let p0 = |s: &RiccatiSolution| s.pi.values[0][(0, 0)];
        assert!(p0(&half) <= p0(&base));
        assert!(p0(&big) <= p0(&half));
        assert!(solve_riccati_pi_delta(&spec, -1.0, g).is_err());
    }

    #[test]
    fn blowup_is_reported_with_time() {
        // Strongly negative quadratic coefficient: ẏ = −k y² backward escapes.
        let mut s = ScalarCoefficients::benchmark();
        s.noise = 5.0;
        s.drift = 0.0;
        s.state_weight = 0.0;
        s.terminal_weight = 5.0;
        s.horizon = 2.0;
        let spec = scalar_spec(s, 4000, 2);
        match solve_riccati_pi(&spec, spec.grids.time) {
            Err(Error::Blowup { time, .. }) => {
                // k = 0.24 − 15 < 0; escape when 1 − 5·|k|·(T−t) = 0.
                let escape = 2.0 - 1.0 / (5.0 * 14.76);
                assert!((time - escape).abs() < 1e-2, "time {time}");
            }
            other => panic!("expected blowup, got {other:?}"),
        }
    }

    #[test]
    fn p_ell_at_zero_is_p_perp_and_zero_source_vanishes() {
        let spec = benchmark_spec(200, 2);
        let sol = solve_riccati_pi(&spec, spec.grids.time).unwrap();
        let lp = ClosedLoop::new(&spec, &sol, spec.grids.time).unwrap();
        assert_eq!(solve_p_perp(&spec, &lp).unwrap(), solve_p_ell(&spec, &lp, 0.0).unwrap());

        // Γ = D = 0 and Γ_f = 0 null the source and the terminal value.
        let mut s = ScalarCoefficients::benchmark();
        s.tracking = 0.0;
        s.coupling = 0.0;
        s.terminal_tracking = 0.0;
        let spec = scalar_spec(s, 200, 2);
        let sol = solve_riccati_pi(&spec, spec.grids.time).unwrap();
        let lp = ClosedLoop::new(&spec, &sol, spec.grids.time).unwrap();
        assert!(solve_p_perp(&spec, &lp).unwrap().max_abs() == 0.0);
    }

    fn inert(tracking: f64, coupling: f64) -> ScalarCoefficients {
        ScalarCoefficients {
            drift: 0.0,
            control_gain: 0.0,
            coupling,
            noise: 0.0,
            state_weight: 1.0,
            control_weight: 1.0,
            terminal_weight: 0.0,
            tracking,
            terminal_tracking: 0.0,
            risk_sensitivity: 0.3,
            horizon: 1.5,
        }
    }

    #[test]
    fn p_perp_with_constant_source() {
        // With B = 0, σ = 0, A = 0 and Q_f = 0: Π̇ = −Q so Π = Q(T − t), and
        // the source QΓ − ΠD = Γ − D(T − t). Backward integration gives
        // P⊥(t) = −∫_t^T (Γ − D(T − s)) ds = −Γ(T − t) + D(T − t)²/2.
        let s = inert(2.0, 0.0);
        let spec = scalar_spec(s, 300, 2);
        let g = spec.grids.time;
        let sol = solve_riccati_pi(&spec, g).unwrap();
        let lp = ClosedLoop::new(&spec, &sol, g).unwrap();
        let perp = solve_p_perp(&spec, &lp).unwrap();
        for k in 0..=300 {
            let tau = 1.5 - g.t(k);
            assert!((perp.values[k][(0, 0)] + 2.0 * tau).abs() < 1e-12);
        }
        let s = inert(2.0, 0.4);
        let spec = scalar_spec(s, 300, 2);
        let sol = solve_riccati_pi(&spec, g).unwrap();
        let lp = ClosedLoop::new(&spec, &sol, g).unwrap();
        let perp = solve_p_perp(&spec, &lp).unwrap();
        for k in 0..=300 {
            let tau = 1.5 - g.t(k);
            let exact = -2.0 * tau + 0.4 * tau * tau / 2.0;
            assert!((perp.values[k][(0, 0)] - exact).abs() < 1e-12);
        }
    }

    #[test]
    fn p_ell_logistic_oracle() {
        // A = 0 and Q = k Q_f² with k = BR⁻¹Bᵀ − 2γσσᵀ = 0.8 make Π ≡ Q_f = 0.5
        // stationary, so every coefficient of the gain equation is constant:
        // Ṗ = 0.5 P² + 0.75 P + 0.25 = 0.5 (P + 0.5)(P + 1), P(1) = 0.5.
        // Separating variables: (P + 0.5)/(P + 1) = u(t) = (2/3) e^{(t−1)/4}.
        let s = ScalarCoefficients {
            drift: 0.0,
            control_gain: 1.0,
            coupling: 0.3,
            noise: 1.0,
            state_weight: 0.2,
            control_weight: 1.0,
            terminal_weight: 0.5,
            tracking: 2.0,
            terminal_tracking: -1.0,
            risk_sensitivity: 0.1,
            horizon: 1.0,
        };
        let spec = scalar_spec(s, 200, 2);
        let g = spec.grids.time;
        let sol = solve_riccati_pi(&spec, g).unwrap();
        assert!(sol.pi.values.iter().all(|v| (v[(0, 0)] - 0.5).abs() < 1e-14));
        let lp = ClosedLoop::new(&spec, &sol, g).unwrap();
        let p = solve_p_ell(&spec, &lp, 0.5).unwrap();
        for k in 0..=200 {
            let u = 2.0 / 3.0 * libm::exp((g.t(k) - 1.0) / 4.0);
            let exact = (u - 0.5) / (1.0 - u);
            assert!((p.values[k][(0, 0)] - exact).abs() < 1e-10);
        }
    }

    /// Matrix exponential by scaling and squaring of a 30-term Taylor sum.
    fn expm(m: &DMatrix<f64>) -> DMatrix<f64> {
        let n = m.nrows();
        let scaled = m / 1024.0;
        let mut term = DMatrix::identity(n, n);
        let mut sum = term.clone();
        for k in 1..30 {
            term = &term * &scaled / k as f64;
            sum += &term;
        }
        for _ in 0..10 {
            sum = &sum * &sum;
        }
        sum
    }

    #[test]
    fn fundamental_matrix_matches_exponential() {
        let a = DMatrix::from_row_slice(2, 2, &[0.3, -0.7, 0.4, -0.2]);
        let zero = DMatrix::zeros(2, 2);
        let c = Coefficients {
            drift: TimeMatrix::constant(a.clone()),
            control_gain: TimeMatrix::constant(zero.clone()),
            coupling: TimeMatrix::constant(zero.clone()),
            noise: TimeMatrix::constant(zero.clone()),
            state_weight: TimeMatrix::constant(DMatrix::identity(2, 2)),
            control_weight: TimeMatrix::constant(DMatrix::identity(2, 2)),
            terminal_weight: DMatrix::identity(2, 2),
            tracking: zero.clone(),
            terminal_tracking: zero,
            risk_sensitivity: 0.0,
            horizon: 1.0,
        };
        let law = InitialLaw::deterministic(MeanProfile::Constant(DVector::zeros(2)));
        let spec = crate::ProblemSpec::new(c, law, Grids::new(1.0, 200, 2).unwrap()).unwrap();
        let grid = spec.grids.time;
        let sol = solve_riccati_pi(&spec, grid).unwrap();
        let lp = ClosedLoop::new(&spec, &sol, grid).unwrap();
        let fm = fundamental_matrices(&lp).unwrap();
        for (k, l) in [(0, 0), (50, 10), (200, 0), (30, 170), (200, 200)] {
            let dt = grid.t(k) - grid.t(l);
            let exact = expm(&(&a * dt));
            assert!((fm.psi_z.between(k, l) - &exact).amax() < 1e-8);
            let exact_s = expm(&(-(a.transpose()) * dt));
            assert!((fm.psi_s.between(k, l) - exact_s).amax() < 1e-8);
        }
    }

    #[test]
    fn zero_dynamics_give_identity() {
        let s = inert(0.0, 0.0);
        let mut s = s;
        s.state_weight = 0.0;
        let spec = scalar_spec(s, 20, 2);
        let sol = solve_riccati_pi(&spec, spec.grids.time).unwrap();
        let lp = ClosedLoop::new(&spec, &sol, spec.grids.time).unwrap();
        let fm = fundamental_matrices(&lp).unwrap();
        for k in 0..=20 {
            for l in 0..=20 {
                assert_eq!(fm.psi_z.between(k, l)[(0, 0)], 1.0);
                assert_eq!(fm.psi_s.between(k, l)[(0, 0)], 1.0);
            }
        }
    }

    #[test]
    fn midpoint_interpolation_is_exact_for_cubics() {
        let grid = TimeGrid::new(1.0, 6).unwrap();
        let cubic = |t: f64| 1.0 - 2.0 * t + 0.5 * t * t * t;
        let path = MatrixPath {
            values: (0..=6).map(|k| scalar(cubic(grid.t(k)))).collect(),
            direction: Direction::Forward,
        };
        for j in 0..=12 {
            assert!((path.at_half(j)[(0, 0)] - cubic(grid.t_half(j))).abs() < 1e-14);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn composition_and_identity(k in 0usize..=400, l in 0usize..=400, m in 0usize..=400) {
            let spec = benchmark_spec(400, 2);
            let sol = solve_riccati_pi(&spec, spec.grids.time).unwrap();
            let lp = ClosedLoop::new(&spec, &sol, spec.grids.time).unwrap();
            let fm = fundamental_matrices(&lp).unwrap();
            for p in [&fm.psi_z, &fm.psi_s] {
                prop_assert!((p.between(k, k)[(0, 0)] - 1.0).abs() < 1e-12);
                let lhs = p.between(k, m);
                let rhs = p.between(k, l) * p.between(l, m);
                prop_assert!((lhs - rhs).amax() < 1e-8);
            }
        }

        #[test]
        fn riccati_stays_symmetric_and_bounded_below(q in 0.0f64..2.0, qf in 0.0f64..2.0, a in -1.0f64..1.0) {
            let mut s = ScalarCoefficients::benchmark();
            s.state_weight = q;
            s.terminal_weight = qf;
            s.drift = a;
            let spec = scalar_spec(s, 200, 2);
            let sol = solve_riccati_pi(&spec, spec.grids.time).unwrap();
            prop_assert_eq!(sol.pi.values[200][(0, 0)], qf);
            for v in &sol.pi.values {
                prop_assert!(v[(0, 0)] >= -1e-8);
            }
        }
    }
}
