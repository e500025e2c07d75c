//! Ensemble gain search for nonlinear inverse problems, with a UMOT forward model.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod fem;
pub mod forward;
pub mod gn;
pub mod measure;
pub mod mesh;
pub mod output;
pub mod scenario;
pub mod stochastic;

pub use error::{Error, Result};
