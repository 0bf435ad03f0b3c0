//! MTEC: a deep latent-variable joint species distribution model.
//!
//! The crate covers the whole workflow: covariate preprocessing
//! ([`data`]), the model and its variational objective ([`mtec`]),
//! training and cross-validation ([`train`]), metrics ([`eval`]),
//! single-species GLM baselines ([`baseline`]), Kernel SHAP attributions
//! ([`explain`]), response groups ([`groups`]) and residual association
//! networks ([`assoc`]). [`cli`] wires these into the `mtec` binary.

pub mod assoc;
pub mod baseline;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod explain;
pub mod groups;
pub mod mtec;
pub mod nn;
pub mod numeric;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
