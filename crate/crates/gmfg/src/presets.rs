//! Built-in configurations.

use crate::config::{
    CoefficientsConfig, Config, GraphonConfig, GridsConfig, InitialLawConfig, LawKind, MatrixValue, MeanValue,
    SimulationConfig, SolverConfig,
};

/// The one-dimensional sinusoidal-graphon benchmark with a Gaussian
/// `N(2, 0.1)` initial law.
pub fn benchmark() -> Config {
    let s = MatrixValue::Scalar;
    Config {
        coefficients: CoefficientsConfig {
            drift: s(0.5),
            control_gain: s(0.6),
            coupling: s(2.0),
            sigma: s(0.5),
            state_weight: s(0.3),
            control_weight: s(1.5),
            terminal_weight: s(0.8),
            tracking: s(2.0),
            terminal_tracking: s(-0.8),
        },
        gamma: 0.3,
        horizon: 1.0,
        initial_law: InitialLawConfig {
            kind: LawKind::Gaussian,
            mean: MeanValue::Scalar(2.0),
            dispersion: Some(s(0.1)),
        },
        grids: GridsConfig { n_t: 1000, n_alpha: 200 },
        graphon: GraphonConfig::Sinusoidal,
        simulation: SimulationConfig {
            agents: Some(200),
            paths: Some(20_000),
            seed: Some(42),
            n_list: Some(vec![25, 50, 100, 200]),
            ..SimulationConfig::default()
        },
        solver: SolverConfig::default(),
    }
}

/// The benchmark with coupling `D = 0.2`, for which the Picard map contracts.
pub fn small_coupling() -> Config {
    let mut c = benchmark();
    c.coefficients.coupling = MatrixValue::Scalar(0.2);
    c
}

pub const NAMES: [&str; 2] = ["benchmark", "small_coupling"];

pub fn by_name(name: &str) -> Option<Config> {
    match name {
        "benchmark" => Some(benchmark()),
        "small_coupling" | "small-coupling" => Some(small_coupling()),
        _ => None,
    }
}
