//! Shared fixtures for the benchmarks.

use depthdecode_core::depth::{render_rgbd, SceneConfig, SceneSpec};
use depthdecode_core::types::RgbdSample;
use ndarray::{Array2, Array4};

/// Rendered RGBD scenes at `resolution`.
pub fn scenes(count: usize, resolution: usize) -> Vec<RgbdSample> {
    let cfg = SceneConfig {
        resolution,
        ..SceneConfig::default()
    };
    (0..count as u64)
        .map(|i| render_rgbd(&SceneSpec::random(i, &cfg)).expect("scene renders"))
        .collect()
}

/// Deterministic pseudo-random batch with entries in [0, 1).
pub fn batch(shape: (usize, usize, usize, usize)) -> Array4<f64> {
    Array4::from_shape_fn(shape, |(a, b, c, d)| {
        let k = (a * 7919 + b * 104729 + c * 1299709 + d * 15485863) as f64;
        (k * 0.618_033_988_75).fract()
    })
}

/// Deterministic weight matrix scaled for unit-variance activations.
pub fn weights(rows: usize, cols: usize) -> Array2<f64> {
    let scale = (2.0 / cols as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |(r, c)| {
        (((r * 31 + c * 17) as f64 * 0.754_877_666).fract() - 0.5) * scale
    })
}
