//! Contrastive linear regression.
//!
//! A Gaussian latent-variable model that splits foreground (case) variation
//! into a part shared with the background (control) group and a
//! foreground-specific part, and regresses a foreground-only response on the
//! foreground-specific latent factors.

// negated comparisons also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod io;
pub mod model;
pub mod optimizer;
pub mod select;
pub mod simulate;

pub use error::{Error, Result};
pub use model::{Dataset, ModelParams};
pub use optimizer::{fit, FitConfig, FitResult};
