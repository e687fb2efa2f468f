//! Desk-scale cross-lingual meta-learning engine.
pub mod analysis;
pub mod cli;
pub mod corpus;
pub mod dreca;
pub mod episodes;
pub mod error;
pub mod metalearn;
pub mod model;
pub mod numerics;
pub use error::{Error, ErrorKind, Result};
