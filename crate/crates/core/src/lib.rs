//! Bayesian physics-informed neural network for engineered-nanoparticle
//! transport and retention in a saturated 1-D sand column.

pub mod collocation;
pub mod domain;
pub mod error;
pub mod nn;
pub mod oracle;
pub mod physics;
pub mod vi;

pub use domain::{ColumnConfig, ScaledPoint};
pub use error::{Error, Result};

/// Fixed 17-significant-digit scientific formatting used by every CSV writer.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}
