//! Click-guided interactive segmentation with test-time continual adaptation.
//!
//! A base segmentation model (BSM) turns an image plus click disks into a
//! coarse mask; a small adaptation module (ADM) refines it and is the part
//! that learns from each user's clicks during deployment.

pub mod adapter;
pub mod error;
pub mod evalbench;
pub mod guidance;
pub mod losses;
pub mod netcore;
pub mod optim;
pub mod protocol;
pub mod raster;
pub mod trainer;

pub use error::{Error, Result};
