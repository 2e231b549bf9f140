//! Asymptotic theory of eigenvectors for spiked random matrices.
//!
//! The data model is `X = H + W` with a deterministic rank-K mean
//! `H = V D V^T` and a symmetric noise matrix `W` of independent, bounded,
//! centered entries. In the diverging-spike regime the leading eigenvalues
//! and eigenvectors of `X` admit deterministic surrogates and asymptotically
//! normal fluctuations; this crate computes those surrogates (the `t_k`
//! roots, deflation coefficients, and derivative normalizers), the
//! normalized CLT statistics, condition diagnostics, three spectral
//! hypothesis tests, and a seeded Monte Carlo replication engine that checks
//! the statistics against their limiting distribution.

pub mod adtest;
pub mod ate;
pub mod diagnostics;
pub mod error;
pub mod inference;
pub mod io;
pub mod model;
pub mod moments;
pub mod montecarlo;
pub mod oracle;
pub mod spectral;

pub use error::{AteError, Result};
