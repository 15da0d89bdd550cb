//! Best-response feedback, the quadratic value function, and closed-form
//! risk-sensitive costs for the limit and auxiliary control problems.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::gmfg::{self, Prepared};
use crate::linalg;
use crate::model::{NodeLaw, ProblemSpec};
use crate::ode::{self, ClosedLoop, MatrixPath, RiccatiSolution};
use crate::quadrature::gauss_legendre;
use crate::{Error, Result};

/// Largest state dimension for which the tensor-product Gauss rule is used.
pub const MAX_QUADRATURE_DIM: usize = 3;
const GAUSS_POINTS: usize = 64;

/// `u = −K(t) x − k(t)` with `K = R⁻¹BᵀΠ`, `k = R⁻¹BᵀS_α`, held constant on
/// each grid interval at its left-node value.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackLaw {
    pub gain: Vec<DMatrix<f64>>,
    pub offset: Vec<DVector<f64>>,
    pub step: f64,
}

impl FeedbackLaw {
    pub fn new(lp: &ClosedLoop, pi: &[DMatrix<f64>], s: &MatrixPath) -> Self {
        let nodes = lp.grid.nodes();
        let mut gain = Vec::with_capacity(nodes);
        let mut offset = Vec::with_capacity(nodes);
        for k in 0..nodes {
            let rb = &lp.frames.node(k).r_inv_bt;
            gain.push(rb * &pi[k]);
            offset.push((rb * s.at_node(k)).column(0).into_owned());
        }
        FeedbackLaw { gain, offset, step: lp.grid.step() }
    }

    /// Feedback of the limit problem at one `α`.
    pub fn best_response(p: &Prepared, s: &MatrixPath) -> Self {
        FeedbackLaw::new(&p.closed_loop, &p.riccati.pi.values, s)
    }

    pub fn node_of(&self, t: f64) -> usize {
        let k = libm::floor(t / self.step + 1e-9);
        (k.max(0.0) as usize).min(self.gain.len() - 1)
    }

    pub fn at_node(&self, k: usize, x: &DVector<f64>) -> DVector<f64> {
        -(&self.gain[k] * x) - &self.offset[k]
    }

    pub fn at(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        self.at_node(self.node_of(t), x)
    }

    pub fn control_dim(&self) -> usize {
        self.gain[0].nrows()
    }
}

/// `−R⁻¹BᵀΠ(t)x − R⁻¹BᵀS_α(t)` with the left-node lookup.
pub fn feedback(p: &Prepared, s: &MatrixPath, t: f64, x: &DVector<f64>) -> DVector<f64> {
    let law = FeedbackLaw::best_response(p, s);
    law.at(t, x)
}

/// `V(t,x) = xᵀΠ(t)x + 2xᵀS_α(t) + r_α(t)` at the left node of `t`.
pub fn value(pi: &MatrixPath, s: &MatrixPath, r: &[f64], step: f64, t: f64, x: &DVector<f64>) -> f64 {
    let k = (libm::floor(t / step + 1e-9).max(0.0) as usize).min(r.len() - 1);
    let xm = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
    (xm.transpose() * pi.at_node(k) * &xm)[(0, 0)]
        + 2.0 * (xm.transpose() * s.at_node(k))[(0, 0)]
        + r[k]
}

/// `log E exp(ξᵀAξ + bᵀξ + c)` for the law of `ξ`.
///
/// For `ξ ~ N(m, Σ)` completing the square gives
/// `−½ log det(I − 2ΣA) + mᵀAm + bᵀm + c + ½ wᵀ(I − 2ΣA)⁻¹Σ w`,
/// `w = 2Am + b`, finite iff `I − 2Σ^{1/2}AΣ^{1/2} ≻ 0`.
pub fn log_expected_exp_quadratic(a: &DMatrix<f64>, b: &DVector<f64>, c: f64, law: &NodeLaw) -> Result<f64> {
    let a = linalg::symmetrize(a);
    let exponent = |x: &DVector<f64>| (x.transpose() * &a * x)[(0, 0)] + b.dot(x) + c;
    match law {
        NodeLaw::Point(m) => Ok(exponent(m)),
        NodeLaw::Gaussian { mean, covariance } => {
            let n = mean.len();
            let root = linalg::psd_sqrt(covariance)?;
            let inner = DMatrix::identity(n, n) - (&root * &a * &root) * 2.0;
            let lo = linalg::min_sym_eigenvalue(&inner);
            if !(lo > 0.0) {
                return Err(Error::DivergentCost(format!(
                    "I - 2 Sigma^(1/2) A Sigma^(1/2) has eigenvalue {lo:e}; the Gaussian exponential moment is infinite"
                )));
            }
            let log_det: f64 = linalg::sym_eigenvalues(&inner).iter().map(|l| libm::log(*l)).sum();
            let w = &a * mean * 2.0 + b;
            // (I − 2ΣA)⁻¹Σ = Σ^{1/2}(I − 2Σ^{1/2}AΣ^{1/2})⁻¹Σ^{1/2}.
            let inv = linalg::inverse(&inner)?;
            let rw = &root * &w;
            let tail = 0.5 * (rw.transpose() * inv * &rw)[(0, 0)];
            Ok(-0.5 * log_det + exponent(mean) + tail)
        }
        NodeLaw::Uniform { mean, radius } => {
            let n = mean.len();
            if *radius == 0.0 {
                return Ok(exponent(mean));
            }
            if n > MAX_QUADRATURE_DIM {
                return Err(Error::OutOfRange(format!(
                    "uniform initial law in dimension {n} exceeds the quadrature limit {MAX_QUADRATURE_DIM}"
                )));
            }
            let (nodes, weights) = gauss_legendre(GAUSS_POINTS);
            let total = GAUSS_POINTS.pow(n as u32);
            let mut values = Vec::with_capacity(total);
            let mut log_weights = Vec::with_capacity(total);
            let mut x = mean.clone();
            for flat in 0..total {
                let mut rest = flat;
                let mut lw = 0.0;
                for d in 0..n {
                    let q = rest % GAUSS_POINTS;
                    rest /= GAUSS_POINTS;
                    x[d] = mean[d] + radius * nodes[q];
                    // Density 1/(2a) per dimension against weight a·w_q.
                    lw += libm::log(0.5 * weights[q]);
                }
                values.push(exponent(&x));
                log_weights.push(lw);
            }
            Ok(log_sum_exp(&values, &log_weights))
        }
    }
}

fn log_sum_exp(values: &[f64], log_weights: &[f64]) -> f64 {
    let shift = values.iter().zip(log_weights).map(|(v, w)| v + w).fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = values.iter().zip(log_weights).map(|(v, w)| libm::exp(v + w - shift)).sum();
    shift + libm::log(sum)
}

/// `log E exp(γ{ξᵀΠ(0)ξ + 2ξᵀS_α(0) + r_α(0)})`.
pub fn closed_form_log_cost(
    gamma: f64,
    pi0: &DMatrix<f64>,
    s0: &DMatrix<f64>,
    r0: f64,
    law: &NodeLaw,
) -> Result<f64> {
    let a = pi0 * gamma;
    let b = s0.column(0) * (2.0 * gamma);
    log_expected_exp_quadratic(&a, &b, gamma * r0, law)
}

/// The optimal limit cost `E exp(γ{ξᵀΠ(0)ξ + 2ξᵀS_α(0) + r_α(0)})`.
pub fn closed_form_cost(gamma: f64, pi0: &DMatrix<f64>, s0: &DMatrix<f64>, r0: f64, law: &NodeLaw) -> Result<f64> {
    let log = closed_form_log_cost(gamma, pi0, s0, r0, law)?;
    let v = libm::exp(log);
    if !v.is_finite() {
        return Err(Error::DivergentCost(format!("cost exponent {log} overflows")));
    }
    Ok(v)
}

/// Solution of the auxiliary problem for one target `α`: the limit problem
/// with risk sensitivity `γ/(1+δ′)` against the frozen `z_α`.
#[derive(Debug, Clone, PartialEq)]
pub struct AcpSolution {
    pub delta_prime: f64,
    pub pi: RiccatiSolution,
    pub s: MatrixPath,
    pub r: Vec<f64>,
    pub feedback: FeedbackLaw,
    /// `log E exp(γ/(1+δ′){ξᵀΠ^{δ′}(0)ξ + 2ξᵀS^{δ′}(0) + r^{δ′}(0)})`, when a law is given.
    pub log_cost: Option<f64>,
}

/// Spec with `γ` replaced by `γ/(1+δ′)`; `δ′ = 0` returns an identical copy.
pub fn acp_spec(spec: &ProblemSpec, delta_prime: f64) -> Result<ProblemSpec> {
    if !(delta_prime >= 0.0) || !delta_prime.is_finite() {
        return Err(Error::InvalidModel(format!("delta' must be non-negative, got {delta_prime}")));
    }
    let mut c = spec.coefficients.clone();
    c.risk_sensitivity /= 1.0 + delta_prime;
    ProblemSpec::new(c, spec.initial.clone(), spec.grids)
}

pub fn acp_solve(p: &Prepared, delta_prime: f64, z: &MatrixPath, law: Option<&NodeLaw>) -> Result<AcpSolution> {
    let spec = acp_spec(&p.spec, delta_prime)?;
    let grid = spec.grids.time;
    let pi = if delta_prime == 0.0 {
        p.riccati.clone()
    } else {
        ode::solve_riccati_pi_delta(&p.spec, delta_prime, grid)?
    };
    let lp = if delta_prime == 0.0 { p.closed_loop.clone() } else { ClosedLoop::new(&spec, &pi, grid)? };
    let s = gmfg::solve_s_with(&spec, &lp, z)?;
    let r = gmfg::solve_r_with(&spec, &lp, z, &s)?;
    let feedback = FeedbackLaw::new(&lp, &pi.pi.values, &s);
    let log_cost = match law {
        Some(l) => Some(closed_form_log_cost(
            spec.coefficients.risk_sensitivity,
            pi.pi.at_node(0),
            s.at_node(0),
            r[0],
            l,
        )?),
        None => None,
    };
    Ok(AcpSolution { delta_prime, pi, s, r, feedback, log_cost })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmfg::{extend, solve_spectral, FixedPointOptions};
    use crate::graphon::{Graphon, DEFAULT_RANK_TOL};
    use crate::model::tests::scalar_spec;
    use crate::model::ScalarCoefficients;
    use crate::Sequential;
    use proptest::prelude::*;
    use rand_core::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn benchmark() -> (Prepared, crate::gmfg::MeanFieldSolution) {
        let spec = scalar_spec(ScalarCoefficients::benchmark(), 1000, 100);
        let p = Prepared::new(&spec, &Graphon::Sinusoidal).unwrap();
        let d = p.decompose(DEFAULT_RANK_TOL).unwrap();
        let sol = solve_spectral(&p, &d, &Sequential).unwrap();
        (p, sol)
    }

    fn v1(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    #[test]
    fn feedback_examples() {
        let (p, sol) = benchmark();
        let zero = MatrixPath { values: sol.s.path(0).values.iter().map(|m| m * 0.0).collect(), ..sol.s.path(0) };
        assert_eq!(feedback(&p, &zero, 0.3, &v1(0.0))[0], 0.0);

        let s = sol.s.path(10);
        let zt = sol.z.at(10, 1000)[0];
        assert!((s.at_node(1000)[(0, 0)] - 0.64 * zt).abs() < 1e-12);
        let x = 1.7;
        let u = feedback(&p, &s, 1.0, &v1(x))[0];
        let expect = -(0.6 / 1.5) * (0.8 * x + 0.64 * zt);
        assert!((u - expect).abs() < 1e-12);
    }

    #[test]
    fn left_node_lookup() {
        let (p, sol) = benchmark();
        let law = FeedbackLaw::best_response(&p, &sol.s.path(3));
        assert_eq!(law.node_of(0.0), 0);
        assert_eq!(law.node_of(0.0019999), 1);
        assert_eq!(law.node_of(0.002), 2);
        assert_eq!(law.node_of(1.0), 1000);
        assert_eq!(law.node_of(5.0), 1000);
    }

    #[test]
    fn value_examples() {
        let (p, sol) = benchmark();
        let s = sol.s.path(42);
        let r = &sol.r[42];
        let h = p.grids().time.step();
        let pi = &p.riccati.pi;
        assert_eq!(value(pi, &s, r, h, 0.4, &v1(0.0)), r[400]);
        let zt = sol.z.at(42, 1000)[0];
        let target = -0.8 * zt;
        assert!(value(pi, &s, r, h, 1.0, &v1(target)).abs() < 1e-8);
        for x in [-1.0, 0.3, 2.5] {
            let terminal = 0.8 * (x + 0.8 * zt) * (x + 0.8 * zt);
            assert!((value(pi, &s, r, h, 1.0, &v1(x)) - terminal).abs() < 1e-8);
        }
    }

    #[test]
    fn closed_form_examples() {
        let zero = DMatrix::zeros(1, 1);
        let v = closed_form_cost(0.3, &zero, &zero, 1.7, &NodeLaw::Gaussian { mean: v1(2.0), covariance: DMatrix::from_element(1, 1, 0.1) }).unwrap();
        assert!((v - libm::exp(0.3 * 1.7)).abs() < 1e-14);
        let pi0 = DMatrix::from_element(1, 1, 0.7);
        let s0 = DMatrix::from_element(1, 1, -0.4);
        let v = closed_form_cost(0.3, &pi0, &s0, 1.1, &NodeLaw::Point(v1(2.0))).unwrap();
        assert!((v - libm::exp(0.3 * (4.0 * 0.7 + 4.0 * -0.4 + 1.1))).abs() < 1e-13);
    }

    #[test]
    fn gaussian_cost_matches_monte_carlo() {
        let (p, sol) = benchmark();
        let e = extend(&p, &sol, 0.5).unwrap();
        let gamma = 0.3;
        let pi0 = p.riccati.pi.at_node(0).clone();
        let s0 = e.s.at_node(0).clone();
        let r0 = e.r[0];
        let law = NodeLaw::Gaussian { mean: v1(2.0), covariance: DMatrix::from_element(1, 1, 0.1) };
        let exact = closed_form_cost(gamma, &pi0, &s0, r0, &law).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let m = 1_000_000;
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..m {
            let n: f64 = StandardNormal.sample(&mut rng);
            let x = 2.0 + libm::sqrt(0.1) * n;
            let v = libm::exp(gamma * (pi0[(0, 0)] * x * x + 2.0 * s0[(0, 0)] * x + r0));
            sum += v;
            sq += v * v;
        }
        let mean = sum / m as f64;
        let se = libm::sqrt((sq / m as f64 - mean * mean) / (m as f64 - 1.0));
        assert!((mean - exact).abs() < 3.0 * se, "{mean} vs {exact} (se {se})");
    }

    #[test]
    fn uniform_cost_matches_direct_integral() {
        // One dimension, E exp(a x² + b x) for x ~ U[m−ρ, m+ρ] by a fine midpoint sum.
        let a = DMatrix::from_element(1, 1, 0.4);
        let b = v1(-0.3);
        let law = NodeLaw::Uniform { mean: v1(1.0), radius: 0.5 };
        let got = log_expected_exp_quadratic(&a, &b, 0.2, &law).unwrap();
        let n = 200_000;
        let mut acc = 0.0;
        for i in 0..n {
            let x = 0.5 + (i as f64 + 0.5) / n as f64;
            acc += libm::exp(0.4 * x * x - 0.3 * x + 0.2);
        }
        let direct = libm::log(acc / n as f64);
        assert!((got - direct).abs() < 1e-10);

        // Two dimensions factorise for diagonal A.
        let a2 = DMatrix::from_row_slice(2, 2, &[0.4, 0.0, 0.0, -0.2]);
        let b2 = DVector::from_row_slice(&[-0.3, 0.1]);
        let other = log_expected_exp_quadratic(
            &DMatrix::from_element(1, 1, -0.2),
            &v1(0.1),
            0.0,
            &NodeLaw::Uniform { mean: v1(1.0), radius: 0.5 },
        )
        .unwrap();
        let joint = log_expected_exp_quadratic(&a2, &b2, 0.2, &NodeLaw::Uniform { mean: DVector::from_element(2, 1.0), radius: 0.5 })
            .unwrap();
        assert!((joint - (got + other)).abs() < 1e-12);
    }

    #[test]
    fn gaussian_cost_diverges_past_moment_condition() {
        let pi0 = DMatrix::from_element(1, 1, 2.0);
        let law = NodeLaw::Gaussian { mean: v1(0.0), covariance: DMatrix::from_element(1, 1, 1.0) };
        assert!(matches!(closed_form_cost(0.3, &pi0, &DMatrix::zeros(1, 1), 0.0, &law), Err(Error::DivergentCost(_))));
    }

    #[test]
    fn multivariate_gaussian_matches_scalar_factorisation() {
        let a = DMatrix::from_row_slice(2, 2, &[0.3, 0.0, 0.0, 0.1]);
        let b = DVector::from_row_slice(&[0.2, -0.5]);
        let cov = DMatrix::from_row_slice(2, 2, &[0.4, 0.0, 0.0, 0.9]);
        let mean = DVector::from_row_slice(&[1.0, -2.0]);
        let joint = log_expected_exp_quadratic(&a, &b, 0.0, &NodeLaw::Gaussian { mean, covariance: cov }).unwrap();
        let one = |a: f64, b: f64, m: f64, s: f64| {
            log_expected_exp_quadratic(
                &DMatrix::from_element(1, 1, a),
                &v1(b),
                0.0,
                &NodeLaw::Gaussian { mean: v1(m), covariance: DMatrix::from_element(1, 1, s) },
            )
            .unwrap()
        };
        let split = one(0.3, 0.2, 1.0, 0.4) + one(0.1, -0.5, -2.0, 0.9);
        assert!((joint - split).abs() < 1e-12);
        // Scalar formula: −½log(1−2aσ²) + am² + bm + (2am+b)²σ²/(2(1−2aσ²)).
        let (am, bm, m, s) = (0.3, 0.2, 1.0, 0.4);
        let k = 1.0 - 2.0 * am * s;
        let direct = -0.5 * libm::log(k) + am * m * m + bm * m + (2.0 * am * m + bm).powi(2) * s / (2.0 * k);
        assert!((one(am, bm, m, s) - direct).abs() < 1e-13);
    }

    #[test]
    fn acp_reduces_to_limit_problem() {
        let (p, sol) = benchmark();
        let z = sol.z.path(20);
        let law = NodeLaw::Point(v1(2.0));
        let acp = acp_solve(&p, 0.0, &z, Some(&law)).unwrap();
        assert_eq!(acp.pi, p.riccati);
        let s = sol.s.path(20);
        for k in 0..=1000 {
            assert!((acp.s.at_node(k) - s.at_node(k)).amax() < 1e-10);
            assert!((acp.r[k] - sol.r[20][k]).abs() < 1e-10);
        }
        let direct = closed_form_log_cost(0.3, p.riccati.pi.at_node(0), s.at_node(0), sol.r[20][0], &law).unwrap();
        assert!((acp.log_cost.unwrap() - direct).abs() < 1e-10);
    }

    #[test]
    fn acp_is_continuous_in_delta() {
        let (p, sol) = benchmark();
        let z = sol.z.path(50);
        let half = acp_solve(&p, 0.5, &z, None).unwrap();
        assert_eq!(half.pi.pi.at_node(1000)[(0, 0)], 0.8);
        let mut last = f64::INFINITY;
        for k in 1..=6 {
            let d = 0.5 / (1u32 << (k - 1)) as f64;
            let acp = acp_solve(&p, d, &z, None).unwrap();
            let gap = acp
                .pi
                .pi
                .values
                .iter()
                .zip(&p.riccati.pi.values)
                .map(|(a, b)| (a - b).amax())
                .fold(0.0, f64::max);
            assert!(gap < last);
            last = gap;
        }
        assert!(last < 1e-2);
    }

    #[test]
    fn fixed_point_defaults_are_documented_values() {
        let o = FixedPointOptions::default();
        assert_eq!((o.tol, o.max_iter, o.relaxation, o.force), (1e-9, 500, 1.0, false));
    }

    proptest! {
        #[test]
        fn feedback_is_affine(x1 in -5.0f64..5.0, x2 in -5.0f64..5.0, t in 0.0f64..1.0) {
            let spec = scalar_spec(ScalarCoefficients::benchmark(), 50, 4);
            let p = Prepared::new(&spec, &Graphon::Sinusoidal).unwrap();
            let d = p.decompose(DEFAULT_RANK_TOL).unwrap();
            let sol = solve_spectral(&p, &d, &Sequential).unwrap();
            let s = sol.s.path(1);
            let f = |x: f64| feedback(&p, &s, t, &v1(x))[0];
            prop_assert!((f(x1 + x2) + f(0.0) - f(x1) - f(x2)).abs() < 1e-12);
        }

        #[test]
        fn value_scaling_identity(x in -3.0f64..3.0, t in 0.0f64..1.0) {
            // V(2x) − 4V(x) = −3r − 4xᵀS.
            let spec = scalar_spec(ScalarCoefficients::benchmark(), 50, 4);
            let p = Prepared::new(&spec, &Graphon::Sinusoidal).unwrap();
            let d = p.decompose(DEFAULT_RANK_TOL).unwrap();
            let sol = solve_spectral(&p, &d, &Sequential).unwrap();
            let s = sol.s.path(2);
            let r = &sol.r[2];
            let h = p.grids().time.step();
            let k = (libm::floor(t / h + 1e-9) as usize).min(50);
            let lhs = value(&p.riccati.pi, &s, r, h, t, &v1(2.0 * x)) - 4.0 * value(&p.riccati.pi, &s, r, h, t, &v1(x));
            let rhs = -3.0 * r[k] - 4.0 * x * s.at_node(k)[(0, 0)];
            prop_assert!((lhs - rhs).abs() < 1e-10);
        }
    }
}
