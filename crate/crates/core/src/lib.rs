//! Class-incremental training of a residual network with per-task low-rank
//! adapters whose inter-layer relation spectra are kept aligned across tasks.

pub mod backbone;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod objectives;
pub mod relation;
pub mod stream;
pub mod trainer;

pub use error::{Error, Result};
