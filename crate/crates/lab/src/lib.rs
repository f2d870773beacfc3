//! Experiment harness for `icfl-core`: scenario files, provenance-stamped
//! CSV and JSON outputs, and the figure and scaling experiments driven by the
//! `icfl` binary.

pub mod error;
pub mod experiments;
pub mod io;
pub mod scenario;
pub mod stats;

pub use error::{LabError, Result};
pub use scenario::Scenario;
