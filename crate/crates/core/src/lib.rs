//! Region-based active learning for semantic segmentation.
//!
//! Each cycle trains a mean-teacher semi-supervised learner (confidence
//! weighted pseudo labels, ClassMix, and a replay stream mixed tail-first),
//! scores the unlabeled pixels with the teacher, and reveals ground truth for
//! the highest-scoring regions of every image.

pub mod acquire;
pub mod augment;
pub mod datapool;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod replay;
pub mod ssl;

pub use error::{Error, Result};
