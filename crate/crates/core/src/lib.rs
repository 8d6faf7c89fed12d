//! Plug-in aleatoric and epistemic uncertainty estimation for trained MLPs.
//!
//! A frozen base network is split at an internal layer; a small module reads
//! the feature there, emits a perturbed feature plus a log-variance, and the
//! perturbed feature is pushed through the rest of the network. The output
//! shift is the epistemic score, the predicted variance the aleatoric one.

pub mod autodiff;
pub mod cupid;
pub mod data;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod uncertainty;

pub use error::{Error, Result};
