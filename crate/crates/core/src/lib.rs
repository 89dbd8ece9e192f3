//! Joint building instance segmentation and pixel-wise height estimation.
//!
//! The network shares one residual backbone between a Mask R-CNN style
//! instance branch and a pyramid-pooling height branch, and exchanges features
//! between the two through gated cross-task interaction ([`gcti`]).
//!
//! Everything runs on a small reverse-mode autodiff engine ([`autograd`]) over
//! dense CPU tensors ([`tensor`]), generic over `f32` (training) and `f64`
//! (gradient checks).

pub mod autograd;
pub mod data;
pub mod engine;
pub mod error;
pub mod feature_extractor;
pub mod gcti;
pub mod gradcheck;
pub mod height_branch;
pub mod instance;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod synthdata;
pub mod tensor;

pub use data::{BBox, BinaryMask, HeightMap, ImageTile, Instance, InstanceSet};
pub use error::{LightError, Result};
pub use metrics::MetricsReport;
pub use synthdata::{SceneSpec, SyntheticSample};
