//! Dual-paradigm spatial gene-expression inference.
//!
//! A memory branch retrieves expression profiles from a contrastively aligned
//! embedding database, filtered by cell-composition priors learned from
//! single-cell references. A parametric branch regresses expression from
//! foundation features under an annealed retrieval-consistency penalty. A
//! small adapter fuses both per spot.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod align;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod fuse;
pub mod io;
pub mod kernel;
pub mod pipeline;
pub mod regress;
pub mod retrieval;
pub mod scprior;
pub mod synth;

pub use error::{DuetError, Result};
