//! Numerical core for linear-quadratic-Gaussian risk-sensitive graphon
//! mean-field games.
//!
//! The crate is `no_std` (it needs `alloc`) and contains every solver of the
//! pipeline: the model and its standing assumptions ([`model`]), graphon
//! kernels and their spectra ([`graphon`]), fixed-step Riccati and linear ODE
//! integration ([`ode`]), the graphon mean-field equation system ([`gmfg`]),
//! best-response feedback laws and closed-form costs ([`control`]), and the
//! finite-population Monte Carlo experiment ([`simulate`]).
//!
//! File formats, configuration parsing, and the command line live in the
//! companion `gmfg` crate.

#![cfg_attr(not(feature = "std"), no_std)]
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod control;
mod error;
pub mod exec;
pub mod gmfg;
pub mod graphon;
pub mod linalg;
pub mod model;
pub mod ode;
mod quadrature;
pub mod rng;
pub mod simulate;

pub use error::{Error, Result};
pub use exec::{Executor, Sequential};
pub use graphon::{Graphon, SpectralDecomposition, StepWeights};
pub use model::{
    AlphaGrid, AssumptionReport, Coefficients, Grids, InitialKind, InitialLaw, MeanProfile,
    ProblemSpec, TimeGrid, TimeMatrix,
};
