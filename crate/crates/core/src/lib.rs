//! Geometric and learning core for multi-view gaze target estimation.
//!
//! Scalar-generic over [`Real`] (`f32`/`f64`); the `*64` aliases below are
//! the double-precision instantiations used by the CLI and the tests.

pub mod camera;
pub mod data;
pub mod depth;
pub mod eval;
pub mod gaze;
pub mod imageio;
pub mod linalg;
pub mod nn;
pub mod scalar;
pub mod selection;
pub mod synth;

pub use scalar::Real;

pub type Vec3d = linalg::Vec3<f64>;
pub type Mat3d = linalg::Mat3<f64>;
pub type Pixel64 = camera::Pixel<f64>;
pub type Camera64 = camera::Camera<f64>;
pub type DepthMap64 = depth::DepthMap<f64>;
pub type PointGrid64 = depth::PointGrid<f64>;
pub type FovHeatmap64 = gaze::FovHeatmap<f64>;
pub type GazePrediction64 = selection::GazePrediction<f64>;
pub type ToyModel64 = nn::ToyModel<f64>;
pub type ToyModel32 = nn::ToyModel<f32>;
