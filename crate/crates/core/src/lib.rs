//! Differentiable architecture search for the MLP heads of siamese
//! self-supervised learners, self-contained on CPU.
//!
//! The crate searches, via first-order bi-level gradient optimization, the
//! layer-wise composition of the projector ("encoder head") and predictor
//! MLPs inside a siamese contrastive setup, then pretrains and linearly
//! evaluates the discovered architecture at desk scale. Everything runs on
//! a small built-in reverse-mode autodiff engine; the heavy kernels have a
//! rayon-parallel path behind the (default) `parallel` feature and a
//! bitwise-identical sequential fallback without it.

pub mod autograd;
pub mod bilevel;
pub mod data;
pub mod error;
pub mod pipeline;
pub mod search_space;
pub mod seeding;
pub mod siamese;
pub mod supernet;

pub use error::{Error, Result};
