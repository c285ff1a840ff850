//! Finite-dimensional Gaussian inference along four routes.
//!
//! For a prior `f ~ N(m, K)` with `K ⪰ 0` (possibly singular) and data
//! `y = H f + ε`, `ε ~ N(0, R)`, `R ≻ 0`, the crate computes the posterior
//! through
//!
//! * exact Schur-complement conditioning ([`gaussian::condition`]),
//! * the MAP quadratic program on `Range(K)` ([`map_qp`]),
//! * regularized regression in the discrete RKHS `Range(K)` ([`rkhs`]),
//! * the Kalman gain mean update, including ensemble priors ([`ensemble`]),
//!
//! and checks that they agree ([`experiments`]).

pub mod ensemble;
pub mod error;
pub mod experiments;
pub mod gaussian;
pub mod kernels;
pub mod map_qp;
pub mod psd;
pub mod rkhs;
pub mod rng;

pub use error::{Error, Result};
pub use gaussian::{GaussianLaw, ObservationModel};
pub use psd::{PsdFactor, RankTol, SymmetricMatrix};
