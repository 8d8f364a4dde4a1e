//! Malliavin calculus on discretized Poisson spaces: star contractions, chaos
//! operators, Malliavin-Stein and interpolation bounds for multivariate normal
//! approximation, and Monte Carlo checks built on compensated cell counts.

pub mod algebra;
pub mod bounds;
pub mod chaos;
pub mod cli;
pub mod error;
pub mod oulevy;
pub mod simulate;
pub mod space;
pub mod util;

pub use error::{Error, Result};
pub use space::{DiscreteSpace, Kernel, Tolerance};
