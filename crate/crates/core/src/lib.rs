//! Numerical toolkit for inverting the pricing operator `M(t) = E[v(X(T)) | F^X(t)]`
//! over Brownian martingales.
//!
//! The crate is organised bottom-up:
//!
//! * [`monotone_fn`]: tabulated strictly increasing C¹ maps with exact inverses.
//! * [`quadrature`], [`roots`], [`normal`]: small numerical primitives.
//! * [`kernels`]: diffusion descriptions, transition densities and the `Σ`/`Θ` transforms.
//! * [`surface`] and [`backward_pde`]: space-time grids and the backward Cauchy problem.
//! * [`consistency`]: the `b`-ODE and the coupling maps `Γ` between pairs.
//! * [`inversion`]: `h` with its spatial inverse `u`, and `X` as a diffusion.
//! * [`sde_sim`]: seeded shared-noise simulation and the derivative field.
//! * [`verify`]: statistical checks over simulated bundles.
//! * [`families`]: built-in diffusion families.

pub mod backward_pde;
pub mod consistency;
pub mod error;
pub mod families;
pub mod inversion;
pub mod kernels;
pub mod monotone_fn;
pub mod normal;
pub mod quadrature;
pub mod rng;
pub mod roots;
pub mod sde_sim;
pub mod surface;
pub mod verify;

pub use error::{Error, Result};
pub use monotone_fn::{Interval, MonotoneMap};
