//! Cell-composition priors from single-cell references.
//!
//! Signatures are learned from labelled single-cell counts, spots are
//! deconvolved against a random gene panel, and the posterior 5% quantiles
//! become the per-spot gating signal used by retrieval.

pub mod deconv;
pub mod gating;
pub mod nb;
pub mod panel;
pub mod signature;

/// Added to every softplus-mapped positive parameter.
pub const POSITIVE_FLOOR: f64 = 1e-6;

pub use deconv::{deconvolve, DeconvConfig, DeconvPosterior, ElboNoise, ElboObjective};
pub use gating::{build_gating, GatingSignal};
pub use nb::nb_loglik;
pub use panel::select_panel;
pub use signature::{fit_signatures, NbSignatureModel, ScDataset, SignatureObjective};
