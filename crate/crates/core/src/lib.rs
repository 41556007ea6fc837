//! Extrema-weighted features for functional data.
//!
//! Trajectories are summarized by how much time they spend near the extremes
//! of the population's marginal distribution. The features feed an additive
//! logistic model whose weight-function thresholds are tuned by an adaptive
//! grid search, and significance is calibrated by a randomization test.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod density;
pub mod error;
pub mod funcdata;
pub mod gam;
pub mod inference;
pub mod io;
pub mod optimize;
pub mod report;
pub mod simulate;
pub mod xwf;

pub use error::{Error, ErrorKind, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/features.md")]
    mod features {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/baselines.md")]
    mod baselines {}
    #[doc = include_str!("../../../book/src/inference.md")]
    mod inference {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
