//! Gradient estimators for learning deep generative models whose control flow
//! branches on discrete latent variables.
//!
//! The crate is `no_std` (it needs `alloc`) and contains:
//!
//! - [`diff`]: a small reverse-mode automatic differentiation engine over dense
//!   `f64` arrays.
//! - [`dist`]: categorical, normal, Gumbel and Concrete machinery.
//! - [`estimators`]: IWAE objective, REINFORCE, VIMCO, RELAX/REBAR and the
//!   reweighted wake-sleep family (wake-θ, sleep-φ, wake-φ, defensive wake-φ).
//! - [`optim`]: Adam.
//! - [`gmm`] and [`pcfg`]: the Gaussian-mixture and probabilistic context-free
//!   grammar benchmarks, including their training loops and metrics.
//! - [`toy`] and [`verify`]: a fully enumerable discrete model and the exact
//!   oracle suites built on it.
//!
//! IO, file formats on disk, and the command line live in the companion
//! `rws-cli` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod diff;
pub mod dist;
mod error;
pub mod estimators;
pub mod gmm;
pub mod math;
pub mod nn;
pub mod optim;
pub mod pcfg;
pub mod rng;
pub mod stats;
pub mod tensor;
pub mod toy;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;
