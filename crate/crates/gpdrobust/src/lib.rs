//! Robust tail estimation and operational value-at-risk for generalized
//! Pareto (GPD) exceedance models.
//!
//! The crate covers the full pipeline for one peaks-over-threshold cell:
//!
//! * the exceedance model itself ([`gpd`]): distribution functions, scores,
//!   Fisher information and model expectations for `G_{u,ξ,β}` with shape
//!   `ξ > 0` and scale `β > 0`;
//! * classical maximum-likelihood fitting ([`mle`]) and the highly robust
//!   median/kMAD matching starter ([`medkmad`]);
//! * optimally robust influence functions ([`influence`]): bias-minimal
//!   (MBRE), MSE-optimal for a known contamination radius (OMSE) and the
//!   radius-minimax rule (RMXE) used when the radius is only known to lie in
//!   an interval, together with one-step estimators built from them;
//! * a reusable multiplier grid ([`grid`]) so that per-fit influence solves
//!   can be replaced by interpolation;
//! * operational risk quantities ([`oprisk`]): single-loss value-at-risk,
//!   loss-frequency estimation and a Monte-Carlo compound-loss check;
//! * data-analytic diagnostics ([`diagnostics`]): influence tables, robust
//!   (MCD-based) outlyingness flags and QQ plots with pointwise and
//!   simultaneous bands;
//! * a contamination harness ([`contamination`]) for bias/MSE studies under
//!   gross-error mixtures.
//!
//! All estimation routines operate on the exceedances of a user-supplied
//! threshold `u`; see [`sample::LossSample`].

pub mod contamination;
pub mod diagnostics;
pub mod error;
pub mod gpd;
pub mod grid;
pub mod influence;
pub mod mcd;
pub mod medkmad;
pub mod mle;
pub mod oprisk;
pub mod quad;
pub mod sample;
pub mod seeding;

mod linalg;
mod solver;

pub use error::{Error, Result};
pub use gpd::GpdParams;
pub use linalg::{Mat2, Vec2};
pub use sample::LossSample;
