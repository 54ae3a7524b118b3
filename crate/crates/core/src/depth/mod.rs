//! Ground-truth depth: procedural scenes, ingestion of precomputed depth maps
//! and a trainable RGB -> depth estimator.

mod estimator;
mod ingest;
mod scene;

pub use estimator::{
    depth_mae, mean_baseline_mae, train_depth_estimator, DepthEstimator, DepthEstimatorConfig, DepthTrainReport,
};
pub use ingest::{ingest_precomputed_depth, minmax_normalize, resize_bilinear, MAX_ASPECT_MISMATCH};
pub use scene::{render_scene, shade, SceneConfig, SceneObject, SceneSpec, Shape};

use ndarray::Axis;

use crate::error::Result;
use crate::types::{ChannelMode, RgbdSample};

/// Renders a scene into a 4-channel RGBD sample.
pub fn render_rgbd(spec: &SceneSpec) -> Result<RgbdSample> {
    let (rgb, depth) = render_scene(spec);
    let raster = ndarray::concatenate(Axis(0), &[rgb.view(), depth.view()]).expect("same size");
    RgbdSample::new(ChannelMode::Rgbd, raster)
}
