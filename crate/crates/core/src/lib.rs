//! Training-free editing of generated time series.
//!
//! A small x₀-predicting diffusion model is trained once. At sampling time,
//! users constrain the output with confidence-weighted point anchors,
//! piecewise-linear trends and segment statistics (sums or averages). Points
//! and trends are enforced by blending the reverse iterate with
//! forward-noised observations through a float mask in `[0, 1]`; statistics
//! are enforced by a gradient penalty on the predicted clean sample.
//!
//! Modules, bottom up:
//!
//! - [`autodiff`]: dense tensors with reverse-mode differentiation.
//! - [`diffusion`]: noise schedule, forward noising, posterior step, training.
//! - [`denoiser`]: the MLP that predicts x₀.
//! - [`constraints`]: constraint types and their compilation to masks.
//! - [`guidance`]: the guided reverse process.
//! - [`data`], [`metrics`], [`checkpoint`], [`edit`]: datasets, evaluation,
//!   persistence and the request pipeline shared by the CLI and the service.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod constraints;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod edit;
mod error;
pub mod guidance;
pub mod metrics;
mod series;

pub use error::{Error, Result};
pub use series::Series;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/diffusion.md")]
    mod diffusion {}
    #[doc = include_str!("../../../book/src/constraints.md")]
    mod constraints {}
    #[doc = include_str!("../../../book/src/guidance.md")]
    mod guidance {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/tools.md")]
    mod tools {}
}
