//! HRTR: a single-stage transformer encoder that labels every time step of a
//! feature stream with an action class, trained with focal loss over
//! overlapping sliding windows and evaluated with segment-transcript edit
//! metrics.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod synthgen;
pub mod windowing;

pub use error::{HrtrError, Result};
