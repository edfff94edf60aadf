//! Single-stage multi-person pose estimation built around keypoint-aware
//! pose embeddings.
//!
//! A small convolutional feature pyramid predicts, at every cell of every
//! level, a coarse pose (offsets to each joint), a refinement of that pose
//! and a confidence score. Both the refinement and the score read features
//! sampled at the coarse joint locations through a K-point deformable
//! convolution. Candidates are decoded and de-duplicated with OKS-based
//! non-maximum suppression.

pub mod assignment;
pub mod config;
pub mod domain;
pub mod error;
pub mod evaluation;
pub mod gradsuite;
pub mod io;
pub mod model;
pub mod nms;
pub mod oks;
pub mod supervision;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
