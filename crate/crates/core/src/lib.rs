//! Parametrix fundamental solutions of `∂_t u = div(a ∇u)` for coefficients
//! measurable in time, Gaussian envelope checks, Malliavin derivatives along
//! diffusion-driven coefficients and anticipating mild solutions.
//!
//! The kernel pipeline is generic over [`scalar::Real`]; the aliases below fix
//! the common instantiations.

pub mod coeff_fields;
pub mod error;
pub mod linalg;
pub mod quadrature;
pub mod scalar;
pub mod parametrix;
pub mod kernel_iteration;
pub mod fundamental_solution;
pub mod reference_fdm;
pub mod malliavin;
pub mod mild_solution;
pub mod cli_runner;

pub use error::{Error, Result};
pub use scalar::{Dual, Real};

pub type Field = coeff_fields::CoefficientField<f64>;
pub type Field32 = coeff_fields::CoefficientField<f32>;
/// Coefficient carrying one Malliavin direction alongside its value.
pub type DualField = coeff_fields::CoefficientField<Dual>;
pub type Kernel = fundamental_solution::FundamentalSolution<f64>;
pub type Kernel32 = fundamental_solution::FundamentalSolution<f32>;
pub type DualKernel = fundamental_solution::FundamentalSolution<Dual>;
pub type Gaussian = parametrix::GaussianFactor<f64>;
pub type Phi = kernel_iteration::PhiTable<f64>;
