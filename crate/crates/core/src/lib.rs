//! Non-linear interventions on hidden states through invertible feature maps.

pub mod container;
pub mod error;
pub mod eval;
pub mod featmap;
pub mod intervene;
pub mod linalg;
pub mod sites;
pub mod subject;
pub mod train;

pub use error::{Error, Result};
pub use linalg::{Matrix, Vector};
