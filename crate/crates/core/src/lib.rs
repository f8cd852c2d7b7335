//! Merging fine-tuned residual updates of a shared base network by solving a
//! small quadratic program over per-row (or per-direction) mixing
//! coefficients on a calibration set.
//!
//! The crate is organised around a few layers:
//!
//! - [`netcore`]: feed-forward networks, residual updates and their
//!   linearisation around one layer.
//! - [`qp`]: calibration sets, QP construction and solvers.
//! - [`basis`]: direction bases and residual-energy diagnostics.
//! - [`baselines`]: soup, task arithmetic, DARE, TIES and Fisher merging.
//! - [`multilayer`]: sequential and hybrid merging across layers.
//! - [`datastore`]: bundle files and synthetic instance generators.
//! - [`cli`]: the `qpmerge` command-line front end.
//!
//! Runnable walkthroughs live in `examples/`.

pub mod baselines;
pub mod basis;
pub mod cli;
pub mod datastore;
pub mod error;
pub mod linalg;
pub mod multilayer;
pub mod netcore;
pub mod qp;

pub use error::{MergeError, Result};
pub use netcore::{Activation, LinearNetwork, ResidualUpdate};
pub use qp::{CalibrationSet, MergeCoefficients, QuadraticObjective, Solution};
