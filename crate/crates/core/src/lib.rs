//! Spatial-temporal concept discovery and concept importance scoring for
//! 3D video ConvNets.
//!
//! The pipeline segments videos into supervoxels at three resolutions,
//! featurizes the surviving segments with a small 3D ConvNet, clusters them
//! per class into concepts, learns a concept activation vector per concept and
//! scores each concept by the fraction of class videos whose logit increases
//! along that vector.

pub mod cav;
pub mod concepts;
pub mod convnet;
pub mod dataset;
pub mod error;
pub mod evalharness;
pub mod scoring;
pub mod supervoxel;
pub mod tensor;

pub use error::{Error, ParseError, Result};
