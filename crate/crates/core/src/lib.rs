//! Particle simulator for mean-field training of a one-MLP, one-linear-attention
//! transformer on in-context feature learning tasks.
//!
//! The model is `h_mu(x) = E_{(a,w)~mu}[a * sigma(w.x)]` followed by a linear
//! attention readout `W`. All population expectations over inputs are replaced by
//! a fixed, seeded Monte-Carlo sample ([`quadrature::EvalSet`]), which turns every
//! objective into a smooth deterministic function of the particle coordinates.
//!
//! Module map:
//!
//! - [`ensemble`]: particles, empirical measures, rotation pushforwards, mixtures and
//!   the symmetric resampling distribution.
//! - [`quadrature`]: evaluation sets, feature matrices and covariances.
//! - [`objective`]: transformer loss, closed-form attention, reduced loss and test error.
//! - [`dynamics`]: particle gradient descent with birth-death and Gaussian-process
//!   perturbations, and the training loop.
//! - [`landscape`]: directional derivatives along rotation homotopies.
//! - [`spectral`]: the Hessian kernel operator and its spectrum.
//!
//! The crate is `no_std` (with `alloc`); the `std` feature only enables SIMD and
//! runtime CPU dispatch in the linear algebra backends.

#![no_std]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod activation;
pub mod dynamics;
pub mod ensemble;
mod error;
pub mod landscape;
pub mod linalg;
pub(crate) mod math;
pub mod objective;
pub mod quadrature;
pub mod spectral;
pub mod teacher;

pub use activation::Activation;
pub use ensemble::{Ensemble, Particle, PiConfig, Rotation};
pub use error::{Error, Result};
pub use quadrature::EvalSet;

/// Seeded generator used everywhere randomness is consumed.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Builds the crate's generator from a 64-bit seed.
pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
