//! Train Bayesian neural network classifiers with several approximate
//! inference methods, attack both their predictions and their predictive
//! uncertainty with expectation-over-transformation gradients, evaluate the
//! uncertainty-aware prediction pipelines (robust accuracy, adversarial
//! example detection, semantic shift detection), and audit attack
//! evaluations for the classic pitfalls.
//!
//! The `examples/` directory has one runnable example per capability; the
//! `bayesbench` binary exposes the same functionality as subcommands.

pub mod data;
pub mod error;
pub mod inference;
pub mod nn;
pub mod numeric;

pub use error::{Error, Result};
