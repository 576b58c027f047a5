//! Simulated UAV-to-UAV detection data, evaluation, and a toy fusion
//! pyramid with transfer-learning experiments.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common instantiations.

pub mod datasetio;
pub mod evalkit;
pub mod fusionnet;
pub mod geometry;
pub mod rng;
mod scalar;
pub mod scenario;
pub mod transferkit;

pub use scalar::Scalar;

pub type Vector3F64 = geometry::Vector3<f64>;
pub type Vector3F32 = geometry::Vector3<f32>;
pub type Matrix3F64 = geometry::Matrix3<f64>;
pub type Matrix3F32 = geometry::Matrix3<f32>;
pub type RigidTransformF64 = geometry::RigidTransform<f64>;
pub type RigidTransformF32 = geometry::RigidTransform<f32>;
pub type CameraModelF64 = geometry::CameraModel<f64>;
pub type CameraModelF32 = geometry::CameraModel<f32>;
pub type PixelBoxF64 = geometry::PixelBox<f64>;
pub type PixelBoxF32 = geometry::PixelBox<f32>;
pub type DetectionF64 = evalkit::Detection<f64>;
pub type DetectionF32 = evalkit::Detection<f32>;
pub type ApReportF64 = evalkit::ApReport<f64>;
pub type FeatureMapF64 = fusionnet::FeatureMap<f64>;
pub type FeatureMapF32 = fusionnet::FeatureMap<f32>;
pub type ToyModelF64 = fusionnet::ToyModel<f64>;
pub type ToyModelF32 = fusionnet::ToyModel<f32>;
