//! Self-similar profiles of `u_t = Δu + |u|^α u`.

pub mod branch;
pub mod cli;
pub mod constants;
pub mod error;
pub mod inverted;
pub mod ode;
pub mod pde;
pub mod profile;
pub mod quad;
pub mod stiff;
pub mod trajectory;

pub use constants::{derive_constants, DerivedConstants, ProblemParams, Regime};
pub use error::{Error, Result};
