//! Exact finite-n laboratory for large-deviation thermodynamics.
//!
//! States are diagonal in the energy basis and held as probability blocks
//! in the log domain, so spectra with `d^n` states stay cheap to handle.

pub mod error;
pub mod exec;
pub mod logmath;
pub mod state;
pub mod spectrum;
pub mod ldp;
pub mod shells;
pub mod majorize;
pub mod storage;
pub mod protocol;
pub mod verify;
pub mod isothermal;
pub mod infospec;
pub mod scenario;

pub use error::{Error, Result};
pub use exec::Execution;
pub use state::{Block, DiagonalState};
