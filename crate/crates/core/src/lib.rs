//! Numerical laboratory for degenerate stochastic Hamiltonian systems:
//! exact Gaussian laws of frozen linear flows, Bismut derivative weights,
//! Dini moduli and Volterra resolvents, heat-semigroup regularity probes,
//! Euler-Maruyama experiments and a Monte-Carlo Zvonkin transform.

pub mod error;
pub mod heat_probe;
pub mod linear_flow;
pub mod mc;
pub mod modulus;
pub mod par;
pub mod quad;
pub mod rng;
pub mod sde_lab;
pub mod stats;
pub mod volterra;
pub mod zvonkin;

pub use error::{Error, Result};
