//! Token-choice mixture-of-experts with zero-compute null experts.

pub mod analytics;
pub mod cli;
pub mod checkpoint;
pub mod copy_study;
pub mod dispatch;
pub mod error;
pub mod expert;
pub mod losses;
pub mod moe_layer;
pub mod numerics;
pub mod router;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
