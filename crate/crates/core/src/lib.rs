pub mod autodiff;
pub mod baseline;
pub mod camera;
pub mod checkpoint;
pub mod error;
pub mod experiment;
pub mod image;
pub mod metrics;
pub mod network;
pub mod pointcloud;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod training;
pub mod voxelizer;

pub use autodiff::{Conv3dSpec, Gradients, Padding, Tape, Var};
pub use camera::{CameraView, FrustumPartition, VoxelCoord};
pub use error::{Error, Result};
pub use image::Image;
pub use metrics::MetricReport;
pub use network::{Architecture, NetworkParams, PlaneStack};
pub use pointcloud::{FeaturePoint, PointCloudStore};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
pub use voxelizer::{AggregationParams, FeatureVolume, VolumeOptions};
pub use checkpoint::Checkpoint;
pub use training::{TrainConfig, Trainer, TrainingSet};
