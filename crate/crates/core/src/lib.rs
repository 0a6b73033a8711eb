//! Structural demand estimation for differentiated-products panels.
//!
//! The crate covers the whole pipeline: market-share construction and
//! inversion ([`panel`], [`blp`]), linear and instrumental-variable estimation
//! with absorbed fixed effects ([`estimate`]), random-coefficients GMM
//! ([`blp`]), latent-space isolation instruments learned from review text
//! ([`embed`]), instrument and falsification diagnostics ([`diagnostics`]) and
//! a synthetic data-generating process with known truth ([`synth`]).

pub mod blp;
pub mod diagnostics;
pub mod embed;
pub mod error;
pub mod estimate;
pub mod linalg;
pub mod panel;
pub mod synth;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
