//! Kolmogorov–Smirnov GAN at desk scale.
//!
//! A small, self-contained stack for adversarial generative modeling on 2D
//! toy densities: a second-order reverse-mode autodiff tape, MLP
//! generator/critic with Adam, the generalized-KS training losses plus
//! GAN / WGAN-GP baselines, seeded samplers for the eight toy targets, and
//! evaluation metrics (squared MMD, two-sample KS, mode coverage).

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod hist;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod targets;
pub mod tensor;
pub mod trainer;

pub use autodiff::{concat, grad, indicator_ste, Graph, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
