//! Query-conditioned clip selection for efficient video moment retrieval.
//!
//! A cheap per-clip semantic index lets a recursive spotter choose which
//! clips deserve the expensive encoder; a cross-modal span head then
//! localises the moment from the selected features.

pub mod checkpoint;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod graph;
pub mod harness;
pub mod losses;
pub mod model;
pub mod nn;
pub mod params;
pub mod spotter;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
