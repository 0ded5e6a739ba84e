//! Max-entropy reinforcement learning with flow-based policies.
//!
//! The crate is `no_std` (with `alloc`) and purely computational. It provides:
//!
//! - [`linalg`]: small dense linear algebra (Cholesky, Jacobi eigensolver, spectral radius).
//! - [`nn`]: a tanh multilayer perceptron with reverse-mode parameter gradients,
//!   forward-mode input derivatives, and Adam.
//! - [`flow_policy`]: action distributions defined by integrating a velocity field
//!   from a standard normal, with exact log-densities via the divergence integral.
//! - [`flow_matching`]: CondOT flow matching and its importance-weighted variant.
//! - [`lqr`]: the max-entropy linear quadratic regulator environment and Gaussian analytics.
//! - [`oracle`]: closed-form Riccati/Lyapunov solutions and exact soft policy iteration.
//! - [`sac`]: the off-policy actor-critic loop that trains a flow policy with ISFM.
#![no_std]

extern crate alloc;

mod error;
pub mod flow_matching;
pub mod flow_policy;
pub mod linalg;
pub mod lqr;
pub mod nn;
pub mod oracle;
pub mod rng;
pub mod sac;

pub use error::{Error, Result};
pub use linalg::{Matrix, Vector};
