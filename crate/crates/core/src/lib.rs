//! Shared Transformer U-Net for unpaired multi-modal segmentation.
//!
//! The crate covers the model (backbone, external attention modules, channel
//! calibration), the losses, evaluation metrics, a synthetic bimodal data
//! generator and the training driver.

pub mod backbone;
pub mod eam;
pub mod gradsuite;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod synthdata;
pub mod train;

pub use error::{Error, Result};
