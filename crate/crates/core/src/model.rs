//! Model data: coefficients, initial law, grids, and the standing-assumption
//! checks that gate every solver.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::linalg::{self, PSD_TOL};
use crate::{Error, Result};

/// A matrix-valued coefficient of time: either constant or tabulated and
/// linearly interpolated (clamped outside the table).
#[derive(Debug, Clone, PartialEq)]
pub enum TimeMatrix {
    Constant(DMatrix<f64>),
    Table { times: Vec<f64>, values: Vec<DMatrix<f64>> },
}

impl TimeMatrix {
    pub fn constant(m: DMatrix<f64>) -> Self {
        TimeMatrix::Constant(m)
    }

    pub fn scalar(v: f64) -> Self {
        TimeMatrix::Constant(DMatrix::from_element(1, 1, v))
    }

    pub fn table(times: Vec<f64>, values: Vec<DMatrix<f64>>) -> Result<Self> {
        if times.is_empty() || times.len() != values.len() {
            return Err(Error::InvalidModel(format!(
                "time table needs matching non-empty times/values (got {} and {})",
                times.len(),
                values.len()
            )));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidModel("table times must be strictly increasing".into()));
        }
        let shape = values[0].shape();
        if values.iter().any(|v| v.shape() != shape) {
            return Err(Error::Dimension("table values differ in shape".into()));
        }
        Ok(TimeMatrix::Table { times, values })
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            TimeMatrix::Constant(m) => m.shape(),
            TimeMatrix::Table { values, .. } => values[0].shape(),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, TimeMatrix::Constant(_))
    }

    pub fn at(&self, t: f64) -> DMatrix<f64> {
        match self {
            TimeMatrix::Constant(m) => m.clone(),
            TimeMatrix::Table { times, values } => {
                let last = times.len() - 1;
                if t <= times[0] {
                    return values[0].clone();
                }
                if t >= times[last] {
                    return values[last].clone();
                }
                let hi = times.partition_point(|&s| s <= t);
                let lo = hi - 1;
                let w = (t - times[lo]) / (times[hi] - times[lo]);
                &values[lo] * (1.0 - w) + &values[hi] * w
            }
        }
    }

    fn all_finite(&self) -> bool {
        match self {
            TimeMatrix::Constant(m) => m.iter().all(|v| v.is_finite()),
            TimeMatrix::Table { times, values } => {
                times.iter().all(|t| t.is_finite())
                    && values.iter().all(|m| m.iter().all(|v| v.is_finite()))
            }
        }
    }

    fn max_asymmetry(&self) -> f64 {
        match self {
            TimeMatrix::Constant(m) => linalg::asymmetry(m) / m.amax().max(1.0),
            TimeMatrix::Table { values, .. } => values
                .iter()
                .map(|m| linalg::asymmetry(m) / m.amax().max(1.0))
                .fold(0.0, f64::max),
        }
    }
}

/// All model coefficients. Naming follows the role of each term in
/// `dx = (A x + B u + D x̄) dt + σ dW` and the cost
/// `exp(γ {∫ |x − Γ x̄|²_Q + |u|²_R dt + |x(T) − Γ_f x̄(T)|²_{Q_f}})`.
#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients {
    /// `A(t)`, n×n.
    pub drift: TimeMatrix,
    /// `B(t)`, n×m.
    pub control_gain: TimeMatrix,
    /// `D(t)`, n×n.
    pub coupling: TimeMatrix,
    /// `σ(t)`, n×d.
    pub noise: TimeMatrix,
    /// `Q(t)`, n×n symmetric.
    pub state_weight: TimeMatrix,
    /// `R(t)`, m×m symmetric.
    pub control_weight: TimeMatrix,
    /// `Q_f`, n×n symmetric.
    pub terminal_weight: DMatrix<f64>,
    /// `Γ`, n×n.
    pub tracking: DMatrix<f64>,
    /// `Γ_f`, n×n.
    pub terminal_tracking: DMatrix<f64>,
    /// `γ ≥ 0`.
    pub risk_sensitivity: f64,
    /// `T > 0`.
    pub horizon: f64,
}

/// Scalar (n = m = d = 1) coefficients, handy for the one-dimensional models
/// that dominate the experiments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarCoefficients {
    pub drift: f64,
    pub control_gain: f64,
    pub coupling: f64,
    pub noise: f64,
    pub state_weight: f64,
    pub control_weight: f64,
    pub terminal_weight: f64,
    pub tracking: f64,
    pub terminal_tracking: f64,
    pub risk_sensitivity: f64,
    pub horizon: f64,
}

impl ScalarCoefficients {
    /// The sinusoidal-graphon benchmark model: T = 1, γ = 0.3, A = 0.5,
    /// B = 0.6, D = 2, σ = 0.5, Q = 0.3, Γ = 2, R = 1.5, Q_f = 0.8, Γ_f = −0.8.
    pub fn benchmark() -> Self {
        ScalarCoefficients {
            drift: 0.5,
            control_gain: 0.6,
            coupling: 2.0,
            noise: 0.5,
            state_weight: 0.3,
            control_weight: 1.5,
            terminal_weight: 0.8,
            tracking: 2.0,
            terminal_tracking: -0.8,
            risk_sensitivity: 0.3,
            horizon: 1.0,
        }
    }
}

impl From<ScalarCoefficients> for Coefficients {
    fn from(s: ScalarCoefficients) -> Self {
        let one = |v: f64| DMatrix::from_element(1, 1, v);
        Coefficients {
            drift: TimeMatrix::scalar(s.drift),
            control_gain: TimeMatrix::scalar(s.control_gain),
            coupling: TimeMatrix::scalar(s.coupling),
            noise: TimeMatrix::scalar(s.noise),
            state_weight: TimeMatrix::scalar(s.state_weight),
            control_weight: TimeMatrix::scalar(s.control_weight),
            terminal_weight: one(s.terminal_weight),
            tracking: one(s.tracking),
            terminal_tracking: one(s.terminal_tracking),
            risk_sensitivity: s.risk_sensitivity,
            horizon: s.horizon,
        }
    }
}

impl Coefficients {
    pub fn state_dim(&self) -> usize {
        self.drift.shape().0
    }

    pub fn control_dim(&self) -> usize {
        self.control_gain.shape().1
    }

    pub fn noise_dim(&self) -> usize {
        self.noise.shape().1
    }

    /// Evaluates every coefficient at time `t`, together with the products
    /// the solvers use repeatedly.
    pub fn frame(&self, t: f64) -> Result<Frame> {
        let a = self.drift.at(t);
        let b = self.control_gain.at(t);
        let d = self.coupling.at(t);
        let sigma = self.noise.at(t);
        let q = self.state_weight.at(t);
        let r = self.control_weight.at(t);
        let r_inv = linalg::inverse(&r)?;
        let r_inv_bt = &r_inv * b.transpose();
        let brb = linalg::symmetrize(&(&b * &r_inv_bt));
        let sst = &sigma * sigma.transpose();
        Ok(Frame { a, b, d, sigma, q, r, r_inv_bt, brb, sst })
    }
}

/// Coefficients evaluated at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    /// `R⁻¹Bᵀ`, m×n.
    pub r_inv_bt: DMatrix<f64>,
    /// `B R⁻¹ Bᵀ`, n×n.
    pub brb: DMatrix<f64>,
    /// `σ σᵀ`, n×n.
    pub sst: DMatrix<f64>,
}

/// Uniform partition of `[0, T]` into `n_t` steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub steps: usize,
    pub horizon: f64,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidModel(format!("horizon must be positive, got {horizon}")));
        }
        if steps == 0 {
            return Err(Error::InvalidModel("time grid needs at least one step".into()));
        }
        Ok(TimeGrid { steps, horizon })
    }

    pub fn step(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn nodes(&self) -> usize {
        self.steps + 1
    }

    pub fn t(&self, k: usize) -> f64 {
        self.horizon * k as f64 / self.steps as f64
    }

    /// Time of half-step index `j`, i.e. `j h / 2`.
    pub fn t_half(&self, j: usize) -> f64 {
        self.horizon * j as f64 / (2 * self.steps) as f64
    }

    /// Grid node at or immediately left of `t`.
    pub fn left_node(&self, t: f64) -> usize {
        let x = t / self.step();
        let k = libm::floor(x + 1e-9) as isize;
        k.clamp(0, self.steps as isize) as usize
    }

    pub fn refined(&self, factor: usize) -> TimeGrid {
        TimeGrid { steps: self.steps * factor, horizon: self.horizon }
    }
}

/// Midpoints `(i − 1/2)/N` of `N` equal subintervals of `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AlphaGrid {
    pub n: usize,
}

impl AlphaGrid {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidModel("alpha grid needs at least one node".into()));
        }
        Ok(AlphaGrid { n })
    }

    /// Midpoint of the `i`-th cell, 0-based.
    pub fn node(&self, i: usize) -> f64 {
        (i as f64 + 0.5) / self.n as f64
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.node(i)).collect()
    }

    /// 0-based cell containing `alpha` for the partition `I_1 = [0, 1/N]`,
    /// `I_l = ((l−1)/N, l/N]`.
    pub fn cell_of(&self, alpha: f64) -> usize {
        let x = libm::ceil(alpha * self.n as f64) as isize - 1;
        x.clamp(0, self.n as isize - 1) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grids {
    pub time: TimeGrid,
    pub alpha: AlphaGrid,
}

impl Grids {
    pub fn new(horizon: f64, n_t: usize, n_alpha: usize) -> Result<Self> {
        Ok(Grids { time: TimeGrid::new(horizon, n_t)?, alpha: AlphaGrid::new(n_alpha)? })
    }
}

/// Continuous map `α ↦ m^x(α) ∈ ℝⁿ`.
#[derive(Debug, Clone, PartialEq)]
pub enum MeanProfile {
    Constant(DVector<f64>),
    /// A named profile applied to every component.
    Preset { preset: MeanPreset, dim: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub enum MeanPreset {
    /// `m(α) = α`
    Identity,
    /// `m(α) = 1 − α`
    Reflected,
    /// `m(α) = sin(πα)`
    SinPi,
    /// `m(α) = cos(πα)`
    CosPi,
}

impl MeanPreset {
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "identity" | "alpha" => Some(MeanPreset::Identity),
            "reflected" | "one_minus_alpha" => Some(MeanPreset::Reflected),
            "sin_pi" => Some(MeanPreset::SinPi),
            "cos_pi" => Some(MeanPreset::CosPi),
            _ => None,
        }
    }

    pub fn eval(self, alpha: f64) -> f64 {
        match self {
            MeanPreset::Identity => alpha,
            MeanPreset::Reflected => 1.0 - alpha,
            MeanPreset::SinPi => libm::sin(core::f64::consts::PI * alpha),
            MeanPreset::CosPi => libm::cos(core::f64::consts::PI * alpha),
        }
    }
}

impl MeanProfile {
    pub fn scalar(v: f64) -> Self {
        MeanProfile::Constant(DVector::from_element(1, v))
    }

    pub fn dim(&self) -> usize {
        match self {
            MeanProfile::Constant(v) => v.len(),
            MeanProfile::Preset { dim, .. } => *dim,
        }
    }

    pub fn at(&self, alpha: f64) -> DVector<f64> {
        match self {
            MeanProfile::Constant(v) => v.clone(),
            MeanProfile::Preset { preset, dim } => DVector::from_element(*dim, preset.eval(alpha)),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, MeanProfile::Constant(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitialKind {
    Deterministic,
    /// Independent uniform components on `[m − radius, m + radius]`.
    CompactUniform { radius: f64 },
    Gaussian { covariance: DMatrix<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitialLaw {
    pub kind: InitialKind,
    pub mean: MeanProfile,
}

/// The law of a single initial state `ξ_α`.
#[derive(Debug, Clone, PartialEq)]
pub enum NodeLaw {
    Point(DVector<f64>),
    Uniform { mean: DVector<f64>, radius: f64 },
    Gaussian { mean: DVector<f64>, covariance: DMatrix<f64> },
}

impl NodeLaw {
    pub fn mean(&self) -> &DVector<f64> {
        match self {
            NodeLaw::Point(m) => m,
            NodeLaw::Uniform { mean, .. } | NodeLaw::Gaussian { mean, .. } => mean,
        }
    }
}

impl InitialLaw {
    pub fn deterministic(mean: MeanProfile) -> Self {
        InitialLaw { kind: InitialKind::Deterministic, mean }
    }

    pub fn gaussian(mean: MeanProfile, covariance: DMatrix<f64>) -> Self {
        InitialLaw { kind: InitialKind::Gaussian { covariance }, mean }
    }

    pub fn at(&self, alpha: f64) -> NodeLaw {
        let mean = self.mean.at(alpha);
        match &self.kind {
            InitialKind::Deterministic => NodeLaw::Point(mean),
            InitialKind::CompactUniform { radius } => NodeLaw::Uniform { mean, radius: *radius },
            InitialKind::Gaussian { covariance } => {
                NodeLaw::Gaussian { mean, covariance: covariance.clone() }
            }
        }
    }

    /// Whether the law violates the compact-support requirement on initial
    /// states.
    pub fn is_unbounded(&self) -> bool {
        matches!(self.kind, InitialKind::Gaussian { .. })
    }
}

/// Coefficients, initial law and discretisation of one problem instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub coefficients: Coefficients,
    pub initial: InitialLaw,
    pub grids: Grids,
}

impl ProblemSpec {
    /// Checks shapes, finiteness and symmetry. Sign conditions are left to
    /// [`validate_assumptions`].
    pub fn new(coefficients: Coefficients, initial: InitialLaw, grids: Grids) -> Result<Self> {
        let c = &coefficients;
        let n = c.state_dim();
        let m = c.control_dim();
        if n == 0 || m == 0 || c.noise_dim() == 0 {
            return Err(Error::Dimension("empty state, control or noise dimension".into()));
        }
        let expect = |name: &str, got: (usize, usize), want: (usize, usize)| {
            if got == want {
                Ok(())
            } else {
                Err(Error::Dimension(format!("{name} is {got:?}, expected {want:?}")))
            }
        };
        expect("A", c.drift.shape(), (n, n))?;
        expect("B", (c.control_gain.shape().0, m), (n, m))?;
        expect("D", c.coupling.shape(), (n, n))?;
        expect("sigma", (c.noise.shape().0, c.noise_dim()), (n, c.noise_dim()))?;
        expect("Q", c.state_weight.shape(), (n, n))?;
        expect("R", c.control_weight.shape(), (m, m))?;
        expect("Qf", c.terminal_weight.shape(), (n, n))?;
        expect("Gamma", c.tracking.shape(), (n, n))?;
        expect("Gamma_f", c.terminal_tracking.shape(), (n, n))?;
        for (name, tm) in [
            ("A", &c.drift),
            ("B", &c.control_gain),
            ("D", &c.coupling),
            ("sigma", &c.noise),
            ("Q", &c.state_weight),
            ("R", &c.control_weight),
        ] {
            if !tm.all_finite() {
                return Err(Error::InvalidModel(format!("{name} has non-finite entries")));
            }
        }
        for (name, mat) in [
            ("Qf", &c.terminal_weight),
            ("Gamma", &c.tracking),
            ("Gamma_f", &c.terminal_tracking),
        ] {
            if mat.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidModel(format!("{name} has non-finite entries")));
            }
        }
        const SYM_TOL: f64 = 1e-12;
        if c.state_weight.max_asymmetry() > SYM_TOL {
            return Err(Error::InvalidModel("Q is not symmetric".into()));
        }
        if c.control_weight.max_asymmetry() > SYM_TOL {
            return Err(Error::InvalidModel("R is not symmetric".into()));
        }
        if linalg::asymmetry(&c.terminal_weight) / c.terminal_weight.amax().max(1.0) > SYM_TOL {
            return Err(Error::InvalidModel("Qf is not symmetric".into()));
        }
        if !(c.horizon > 0.0) || !c.horizon.is_finite() {
            return Err(Error::InvalidModel(format!("T must be positive, got {}", c.horizon)));
        }
        if !(c.risk_sensitivity >= 0.0) || !c.risk_sensitivity.is_finite() {
            return Err(Error::InvalidModel(format!(
                "gamma must be non-negative, got {}",
                c.risk_sensitivity
            )));
        }
        if (grids.time.horizon - c.horizon).abs() > 1e-12 * c.horizon {
            return Err(Error::InvalidModel("time grid horizon differs from T".into()));
        }
        if initial.mean.dim() != n {
            return Err(Error::Dimension(format!(
                "initial mean has dimension {}, expected {n}",
                initial.mean.dim()
            )));
        }
        match &initial.kind {
            InitialKind::Deterministic => {}
            InitialKind::CompactUniform { radius } => {
                if !(*radius >= 0.0) || !radius.is_finite() {
                    return Err(Error::InvalidModel(format!("uniform radius {radius} is invalid")));
                }
            }
            InitialKind::Gaussian { covariance } => {
                expect("initial covariance", covariance.shape(), (n, n))?;
                if linalg::asymmetry(covariance) > SYM_TOL
                    || linalg::min_sym_eigenvalue(covariance) < -PSD_TOL
                {
                    return Err(Error::InvalidModel(
                        "initial covariance must be symmetric positive semi-definite".into(),
                    ));
                }
            }
        }
        let spec = ProblemSpec { coefficients, initial, grids };
        for i in 0..grids.alpha.n {
            if spec.initial.mean.at(grids.alpha.node(i)).iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidModel("initial mean is not finite on the grid".into()));
            }
        }
        Ok(spec)
    }

    pub fn dim(&self) -> usize {
        self.coefficients.state_dim()
    }

    pub fn frame(&self, t: f64) -> Result<Frame> {
        self.coefficients.frame(t)
    }

    /// Same model with a different coupling term `D`.
    pub fn with_coupling(&self, coupling: TimeMatrix) -> Result<Self> {
        let mut c = self.coefficients.clone();
        c.coupling = coupling;
        ProblemSpec::new(c, self.initial.clone(), self.grids)
    }

    pub fn with_grids(&self, grids: Grids) -> Result<Self> {
        ProblemSpec::new(self.coefficients.clone(), self.initial.clone(), grids)
    }
}

/// Outcome of the positivity and risk-margin checks on the time grid.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct AssumptionReport {
    /// `Q ⪰ 0`, `R ≻ 0`, `Q_f ⪰ 0` on every node.
    pub h3_ok: bool,
    pub q_min_eigenvalue: f64,
    pub r_min_eigenvalue: f64,
    pub qf_min_eigenvalue: f64,
    /// Minimum over the grid of the smallest eigenvalue of `B R⁻¹ Bᵀ − 2γ σσᵀ`.
    pub h4_min_eigenvalue: f64,
    pub h4_ok: bool,
    pub warnings: Vec<String>,
}

impl AssumptionReport {
    pub fn ok(&self) -> bool {
        self.h3_ok && self.h4_ok
    }
}

/// Evaluates the weight positivity conditions and the risk margin
/// `B R⁻¹ Bᵀ − 2γ σσᵀ ⪰ 0` on every node of the time grid.
pub fn validate_assumptions(spec: &ProblemSpec) -> AssumptionReport {
    let c = &spec.coefficients;
    let grid = spec.grids.time;
    let mut warnings = Vec::new();
    let mut q_min = f64::INFINITY;
    let mut r_min = f64::INFINITY;
    let mut h4_min = f64::INFINITY;
    for k in 0..grid.nodes() {
        let t = grid.t(k);
        q_min = q_min.min(linalg::min_sym_eigenvalue(&c.state_weight.at(t)));
        let r = c.control_weight.at(t);
        r_min = r_min.min(linalg::min_sym_eigenvalue(&r));
        match c.frame(t) {
            Ok(f) => {
                let margin = &f.brb - &f.sst * (2.0 * c.risk_sensitivity);
                h4_min = h4_min.min(linalg::min_sym_eigenvalue(&margin));
            }
            Err(_) => h4_min = f64::NEG_INFINITY,
        }
    }
    let qf_min = linalg::min_sym_eigenvalue(&c.terminal_weight);
    let h3_ok = q_min >= -PSD_TOL && r_min > PSD_TOL && qf_min >= -PSD_TOL;
    if !h3_ok {
        warnings.push(format!(
            "weight positivity fails: min eig Q = {q_min:e}, R = {r_min:e}, Qf = {qf_min:e}"
        ));
    }
    let h4_ok = h4_min >= -PSD_TOL;
    if !h4_ok {
        warnings.push(format!(
            "risk margin B R^-1 B' - 2 gamma sigma sigma' has negative eigenvalue {h4_min:e}"
        ));
    }
    if spec.initial.is_unbounded() {
        warnings.push(
            "Gaussian initial law has unbounded support; compact support is assumed by the \
             approximation theory, results are used as-is"
                .into(),
        );
    }
    AssumptionReport {
        h3_ok,
        q_min_eigenvalue: q_min,
        r_min_eigenvalue: r_min,
        qf_min_eigenvalue: qf_min,
        h4_min_eigenvalue: h4_min,
        h4_ok,
        warnings,
    }
}
