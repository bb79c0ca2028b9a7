//! Flexible Dirichlet evidential classification.
//!
//! The crate is organised bottom-up:
//!
//! - [`fd`]: the flexible Dirichlet distribution (moments, density, sampling,
//!   conjugate updates, marginals, opinion views).
//! - [`oracles`]: independent quadrature and Monte-Carlo references.
//! - [`objective`]: closed-form expected squared error plus the allocation
//!   regularizer, with its analytic gradient.
//! - [`uncertainty`]: label-wise variance decomposition and the Dirichlet
//!   baseline measures.
//! - [`network`]: dense feature extractor with three heads and spectral
//!   normalization.
//! - [`trainer`]: Adam with step decay, early stopping and per-step
//!   spectral normalization.
//! - [`data`], [`metrics`], [`experiments`]: datasets, ranking metrics and the
//!   evaluation tasks.

pub mod data;
pub mod error;
pub mod experiments;
pub mod fd;
pub mod metrics;
pub mod network;
pub mod objective;
pub mod oracles;
pub mod special;
pub mod trainer;
pub mod uncertainty;

pub use error::{Error, Result};
pub use fd::{DirichletParams, FdParams, SimplexPoint, SlOpinion};
