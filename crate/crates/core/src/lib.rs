//! Camera-LiDAR 3D detection with interleaved cross decoding, at desk scale:
//! synthetic scenes, corruptions, the detector, training and evaluation.

#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::too_many_arguments
)]

pub mod assignment;
pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod corruption;
pub mod dataset;
pub mod error;
pub mod evalkit;
pub mod fusion;
pub mod geometry;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod optim;
pub mod proposal;
pub mod scene_synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
