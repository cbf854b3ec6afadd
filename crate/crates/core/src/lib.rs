//! Decentralized, line-independent plug-and-play voltage and frequency control
//! for AC islanded microgrids.
//!
//! The crate builds dq-frame models of distributed generation units (DGUs),
//! synthesizes local state-feedback controllers from small LMI problems, certifies
//! collective stability of the resulting microgrid and simulates event scripts
//! such as DGU plug-in, load steps, line trips and clock desynchronization.

pub mod analysis;
pub mod error;
pub mod io;
pub mod lmi_solver;
pub mod model;
pub mod random;
pub mod sim;
pub mod sweep;
pub mod synthesis;

pub use error::{Error, Result};
pub use model::{DguId, DguParams, GridSpec, LineParams};
