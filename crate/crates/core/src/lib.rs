//! Green-learning single-image dehazing.
//!
//! The pipeline runs entirely feed-forward, with no neural networks and no
//! backpropagation:
//!
//! 1. [`dcp`]: preliminary dehazing with a modified dark channel prior whose
//!    haze-removal strength is regressed per image by a random forest.
//! 2. [`saab`]: unsupervised multi-hop Saab feature extraction (PixelHop).
//! 3. [`rft`] and [`lnt`]: supervised feature ranking and least-squares
//!    feature generation.
//! 4. [`ushape`]: a coarse-to-fine stack of gradient-boosted tree pairs that
//!    predicts residual corrections level by level.
//!
//! [`dataset`] synthesizes hazy/clear pairs from the atmospheric scattering
//! model and scores trained models; [`model_file`] gives every trained
//! pipeline a checksummed, human-inspectable container format.

pub mod dataset;
pub mod dcp;
pub mod error;
pub mod image;
pub mod lnt;
pub mod model_file;
pub mod rft;
pub mod saab;
pub mod trees;
pub mod ushape;

pub use error::{Error, Result};
