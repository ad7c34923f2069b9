//! Depth-guided LiDAR-visual odometry.
//!
//! Two RGB-D frames (camera image plus completed LiDAR depth) go through a
//! four-level attention-fused feature pyramid. Each level builds a local cost
//! volume, estimates depth-gated optical flow coarse to fine, and refines a
//! relative pose residually; the level poses are fused by learned confidence.

pub mod checkpoint;
pub mod config;
pub mod costvol;
pub mod data;
pub mod error;
pub mod evalkit;
pub mod flow;
pub mod geometry;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod network;
pub mod nn;
pub mod posenet;
pub mod pyramid;
pub mod run;
pub mod selftest;
pub mod tensor;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{DatasetSource, RunConfig};
pub use data::{CameraIntrinsics, DepthBackend, FramePair};
pub use error::{Error, Result};
pub use evalkit::{SegmentError, SequenceResult};
pub use flow::{DepthMap, FlowField};
pub use geometry::{Pose, Trajectory};
pub use loss::LossParams;
pub use network::{Inference, Model, ModelConfig};
pub use nn::ParamStore;
pub use pyramid::FeatureMap;
pub use tensor::Tensor;
pub use train::OptimizerConfig;
