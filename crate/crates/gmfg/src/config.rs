//! JSON run configuration.
//!
//! Matrices may be given as a scalar (a 1×1 matrix), as nested row arrays, or,
//! for the time-dependent coefficients `A, B, D, sigma, Q, R`, as a table
//! `{"times": [...], "values": [...]}` interpolated linearly in `t`.

use std::fmt;
use std::path::{Path, PathBuf};

use gmfg_core::graphon::StepWeights;
use gmfg_core::model::{
    validate_assumptions, Coefficients, Grids, InitialKind, InitialLaw, MeanPreset, MeanProfile, ProblemSpec,
    TimeMatrix,
};
use gmfg_core::Graphon;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::csvio;

/// Asymmetry of an ingested step graphon above which a warning is recorded.
pub const STEP_ASYMMETRY_WARNING: f64 = 1e-12;

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

impl From<gmfg_core::Error> for ConfigError {
    fn from(e: gmfg_core::Error) -> Self {
        ConfigError(e.to_string())
    }
}

fn err<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixValue {
    Scalar(f64),
    Rows(Vec<Vec<f64>>),
    Table { times: Vec<f64>, values: Vec<MatrixValue> },
}

impl MatrixValue {
    fn constant(&self, name: &str) -> Result<DMatrix<f64>, ConfigError> {
        match self {
            MatrixValue::Scalar(v) => Ok(DMatrix::from_element(1, 1, *v)),
            MatrixValue::Rows(rows) => {
                let r = rows.len();
                let c = rows.first().map_or(0, Vec::len);
                if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
                    return err(format!("{name}: rows must be non-empty and of equal length"));
                }
                Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
            }
            MatrixValue::Table { .. } => err(format!("{name} must be constant in time")),
        }
    }

    fn time_matrix(&self, name: &str) -> Result<TimeMatrix, ConfigError> {
        match self {
            MatrixValue::Table { times, values } => {
                let values = values.iter().map(|v| v.constant(name)).collect::<Result<Vec<_>, _>>()?;
                TimeMatrix::table(times.clone(), values).map_err(|e| ConfigError(format!("{name}: {e}")))
            }
            other => Ok(TimeMatrix::constant(other.constant(name)?)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientsConfig {
    #[serde(rename = "A")]
    pub drift: MatrixValue,
    #[serde(rename = "B")]
    pub control_gain: MatrixValue,
    #[serde(rename = "D")]
    pub coupling: MatrixValue,
    pub sigma: MatrixValue,
    #[serde(rename = "Q")]
    pub state_weight: MatrixValue,
    #[serde(rename = "R")]
    pub control_weight: MatrixValue,
    #[serde(rename = "Qf")]
    pub terminal_weight: MatrixValue,
    #[serde(rename = "Gamma")]
    pub tracking: MatrixValue,
    #[serde(rename = "Gamma_f")]
    pub terminal_tracking: MatrixValue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MeanValue {
    Scalar(f64),
    Vector(Vec<f64>),
    Expr { expr: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LawKind {
    Deterministic,
    CompactUniform,
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialLawConfig {
    pub kind: LawKind,
    pub mean: MeanValue,
    /// Support radius for `compact_uniform`, covariance for `gaussian`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dispersion: Option<MatrixValue>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridsConfig {
    pub n_t: usize,
    pub n_alpha: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GraphonConfig {
    Constant { c: f64 },
    Sinusoidal,
    UniformAttachment,
    Half,
    /// `N × N` CSV without header, relative to the config file.
    Step { path: PathBuf },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    #[serde(rename = "N", default, skip_serializing_if = "Option::is_none")]
    pub agents: Option<usize>,
    #[serde(rename = "M", default, skip_serializing_if = "Option::is_none")]
    pub paths: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    /// 1-based probe agents.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probes: Option<Vec<usize>>,
    #[serde(rename = "N_list", default, skip_serializing_if = "Option::is_none")]
    pub n_list: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deviate: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodChoice {
    #[serde(alias = "fixed-point")]
    FixedPoint,
    Spectral,
    Both,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<MethodChoice>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iter: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relaxation: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub force: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank_tol: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub coefficients: CoefficientsConfig,
    pub gamma: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub initial_law: InitialLawConfig,
    pub grids: GridsConfig,
    pub graphon: GraphonConfig,
    #[serde(default)]
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub solver: SolverConfig,
}

/// A validated configuration.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: Config,
    pub spec: ProblemSpec,
    pub graphon: Graphon,
    pub warnings: Vec<String>,
    /// SHA-256 over the canonical config JSON and any step-graphon file.
    pub hash: String,
    /// File path or `preset:<name>`.
    pub source: String,
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError(format!("config: {e}")))
    }

    /// Builds and validates the problem. Relative step-graphon paths resolve
    /// against `base`.
    pub fn resolve(&self, base: &Path, source: &str) -> Result<Loaded, ConfigError> {
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return err(format!("T must be positive, got {}", self.horizon));
        }
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return err(format!("gamma must be positive, got {}", self.gamma));
        }
        let c = &self.coefficients;
        let coefficients = Coefficients {
            drift: c.drift.time_matrix("A")?,
            control_gain: c.control_gain.time_matrix("B")?,
            coupling: c.coupling.time_matrix("D")?,
            noise: c.sigma.time_matrix("sigma")?,
            state_weight: c.state_weight.time_matrix("Q")?,
            control_weight: c.control_weight.time_matrix("R")?,
            terminal_weight: c.terminal_weight.constant("Qf")?,
            tracking: c.tracking.constant("Gamma")?,
            terminal_tracking: c.terminal_tracking.constant("Gamma_f")?,
            risk_sensitivity: self.gamma,
            horizon: self.horizon,
        };
        let n = coefficients.state_dim();
        let initial = self.initial_law(n)?;
        let grids = Grids::new(self.horizon, self.grids.n_t, self.grids.n_alpha)?;
        let spec = ProblemSpec::new(coefficients, initial, grids)?;

        let report = validate_assumptions(&spec);
        if report.qf_min_eigenvalue < -gmfg_core::linalg::PSD_TOL {
            return err(format!("Qf must be positive semi-definite (smallest eigenvalue {})", report.qf_min_eigenvalue));
        }
        if report.q_min_eigenvalue < -gmfg_core::linalg::PSD_TOL {
            return err(format!("Q must be positive semi-definite (smallest eigenvalue {})", report.q_min_eigenvalue));
        }
        if report.r_min_eigenvalue <= gmfg_core::linalg::PSD_TOL {
            return err(format!("R must be positive definite (smallest eigenvalue {})", report.r_min_eigenvalue));
        }

        let mut warnings = Vec::new();
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(self).expect("config serializes"));
        let graphon = match &self.graphon {
            GraphonConfig::Constant { c } => Graphon::constant(*c)?,
            GraphonConfig::Sinusoidal => Graphon::Sinusoidal,
            GraphonConfig::UniformAttachment => Graphon::UniformAttachment,
            GraphonConfig::Half => Graphon::Half,
            GraphonConfig::Step { path } => {
                let full = if path.is_absolute() { path.clone() } else { base.join(path) };
                let bytes = std::fs::read(&full)
                    .map_err(|e| ConfigError(format!("step graphon {}: {e}", full.display())))?;
                hasher.update(&bytes);
                let w = csvio::read_matrix(&bytes).map_err(|e| ConfigError(format!("{}: {e}", full.display())))?;
                let (weights, asym) = StepWeights::symmetrized(w)?;
                if asym > STEP_ASYMMETRY_WARNING {
                    warnings.push(format!("step graphon symmetrized; max asymmetry {asym:e}"));
                }
                Graphon::Step(weights)
            }
        };
        warnings.extend(report.warnings.iter().cloned());
        let hash = format!("{:x}", hasher.finalize());
        Ok(Loaded { config: self.clone(), spec, graphon, warnings, hash, source: source.to_string() })
    }

    fn initial_law(&self, n: usize) -> Result<InitialLaw, ConfigError> {
        let law = &self.initial_law;
        let mean = match &law.mean {
            MeanValue::Scalar(v) => MeanProfile::Constant(DVector::from_element(n, *v)),
            MeanValue::Vector(v) => {
                if v.len() != n {
                    return err(format!("initial_law.mean has {} entries, state dimension is {n}", v.len()));
                }
                MeanProfile::Constant(DVector::from_column_slice(v))
            }
            MeanValue::Expr { expr } => match MeanPreset::from_name(expr) {
                Some(preset) => MeanProfile::Preset { preset, dim: n },
                None => return err(format!("initial_law.mean: unknown expression {expr:?}")),
            },
        };
        let kind = match (law.kind, &law.dispersion) {
            (LawKind::Deterministic, None) => InitialKind::Deterministic,
            (LawKind::Deterministic, Some(_)) => return err("initial_law.dispersion is not used by a deterministic law"),
            (_, None) => return err("initial_law.dispersion is required for random initial laws"),
            (LawKind::CompactUniform, Some(MatrixValue::Scalar(r))) if *r >= 0.0 => {
                InitialKind::CompactUniform { radius: *r }
            }
            (LawKind::CompactUniform, Some(_)) => {
                return err("initial_law.dispersion must be a non-negative radius for compact_uniform")
            }
            (LawKind::Gaussian, Some(d)) => {
                let cov = match d {
                    MatrixValue::Scalar(v) => DMatrix::from_diagonal_element(n, n, *v),
                    other => other.constant("initial_law.dispersion")?,
                };
                InitialKind::Gaussian { covariance: cov }
            }
        };
        Ok(InitialLaw { kind, mean })
    }
}

/// Reads and validates a configuration file.
pub fn load(path: &Path) -> Result<Loaded, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
    let config = Config::from_json(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    config.resolve(base, &path.display().to_string())
}

pub fn load_spec(path: &Path) -> Result<ProblemSpec, ConfigError> {
    load(path).map(|l| l.spec)
}
