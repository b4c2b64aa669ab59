//! Shape-proxy superstructure for RGB-D streams.
//!
//! A live or recorded RGB-D stream is analyzed into a sparse set of
//! *proxies*: detected planes, cylinders and spheres, each carrying a local
//! frame and a 2D grid of per-cell statistics (occupancy, a smoothed local
//! histogram of distance to the shape, and sub-cell color points). The
//! proxy set is tracked, merged and refined over time, and then drives a
//! family of stream operators: denoising and de-flickering, hole filling,
//! resampling, lossy depth compression, and textured meshing.

pub mod codec;
pub mod config;
pub mod dataset;
pub mod detect;
pub mod frame;
pub mod mesh;
pub mod pipeline;
pub mod process;
pub mod proxy;
pub mod shape;
pub mod stats;
pub mod synth;

pub use config::Config;
pub use frame::{CameraIntrinsics, CameraPose, OrientedPointCloud, RgbdFrame};
pub use proxy::{Proxy, SceneState};
pub use shape::{GridSpec, ShapeKind, ShapeModel};
