//! Invariant tori with Diophantine frequency for parametrized Hamiltonian
//! vector fields, computed without action-angle variables.
//!
//! The crate is organized bottom-up:
//!
//! * [`fourier`]: truncated Fourier maps on the torus, strip norms and the
//!   small-divisor cohomological solver.
//! * [`diophantine`]: verification and estimation of Diophantine constants.
//! * [`hamiltonian`] and [`expr`]: parametrized Hamiltonian families.
//! * [`embedding`] and [`nondegeneracy`]: torus embeddings and the
//!   non-degeneracy objects `N`, `Lambda`.
//! * [`kam_newton`]: the analytic-case quasi-Newton solver and its ledger.
//! * [`smoothing`]: localization and analytic approximation of finitely
//!   differentiable families.
//! * [`driver`]: the shrinking-strip cascade for finitely differentiable families.
//! * [`orbit`], [`config`], [`report`]: the integration oracle and I/O.

pub mod config;
pub mod diophantine;
pub mod driver;
pub mod embedding;
pub mod error;
pub mod expr;
pub mod fourier;
pub mod hamiltonian;
pub mod kam_newton;
pub mod linalg;
pub mod nondegeneracy;
pub mod orbit;
pub mod par;
pub mod report;
pub mod smoothing;

pub use error::{KamError, Result};
