//! Block-wise cosine similarity of channel-normalized features.
//!
//! loss = (1 - mean_b c_b) / 2, where c_b is the cosine between the
//! channel-normalized feature tensors of block b, flattened (default) or
//! averaged over spatial positions.

use ndarray::{Array3, Array4, ArrayView3, ArrayViewMut3, Axis, Zip};
use serde::{Deserialize, Serialize};

use super::extractor::{FeatureExtractor, FeaturePyramid};
use crate::error::{Error, Result};
use crate::types::RgbdSample;

pub const NORM_EPS: f64 = 1e-10;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerceptualConfig {
    /// Average per-position cosines instead of one cosine over the
    /// flattened block.
    pub per_position: bool,
}

/// Scales each spatial position's channel vector to unit norm.
pub fn channel_normalize(f: ArrayView3<f64>) -> Array3<f64> {
    let mut out = f.to_owned();
    let (_, h, w) = f.dim();
    for y in 0..h {
        for x in 0..w {
            let mut col = out.slice_mut(ndarray::s![.., y, x]);
            let m = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            col.mapv_inplace(|v| v / (m + NORM_EPS));
        }
    }
    out
}

fn flat_cosine(u: ArrayView3<f64>, v: ArrayView3<f64>) -> f64 {
    let dot: f64 = Zip::from(&u).and(&v).fold(0.0, |a, x, y| a + x * y);
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 && nv == 0.0 {
        return 1.0;
    }
    dot / (nu * nv + NORM_EPS)
}

fn position_cosine(u: ArrayView3<f64>, v: ArrayView3<f64>) -> f64 {
    let (_, h, w) = u.dim();
    let dot: f64 = Zip::from(&u).and(&v).fold(0.0, |a, x, y| a + x * y);
    dot / (h * w) as f64
}

/// Cosine between two already channel-normalized blocks.
pub fn block_cosine(u: ArrayView3<f64>, v: ArrayView3<f64>, cfg: &PerceptualConfig) -> f64 {
    if cfg.per_position {
        position_cosine(u, v)
    } else {
        flat_cosine(u, v)
    }
}

/// Channel-normalized features, cached for repeated comparisons.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedPyramid {
    pub levels: Vec<Array3<f64>>,
}

impl NormalizedPyramid {
    pub fn from_pyramid(p: &FeaturePyramid) -> Self {
        Self {
            levels: p.levels.iter().map(|l| channel_normalize(l.view())).collect(),
        }
    }
}

pub fn normalized_loss(a: &NormalizedPyramid, b: &NormalizedPyramid, cfg: &PerceptualConfig) -> f64 {
    debug_assert_eq!(a.levels.len(), b.levels.len());
    let mean_c = a
        .levels
        .iter()
        .zip(&b.levels)
        .map(|(u, v)| block_cosine(u.view(), v.view(), cfg))
        .sum::<f64>()
        / a.levels.len() as f64;
    ((1.0 - mean_c) / 2.0).clamp(0.0, 1.0)
}

/// Loss between two raw feature pyramids.
pub fn pyramid_loss(a: &FeaturePyramid, b: &FeaturePyramid, cfg: &PerceptualConfig) -> Result<f64> {
    if a.levels.len() != b.levels.len() || a.levels.iter().zip(&b.levels).any(|(x, y)| x.dim() != y.dim()) {
        return Err(Error::Shape {
            expected: format!("{:?}", a.levels.iter().map(|l| l.dim()).collect::<Vec<_>>()),
            actual: format!("{:?}", b.levels.iter().map(|l| l.dim()).collect::<Vec<_>>()),
        });
    }
    Ok(normalized_loss(
        &NormalizedPyramid::from_pyramid(a),
        &NormalizedPyramid::from_pyramid(b),
        cfg,
    ))
}

pub fn perceptual_loss(
    recon: &RgbdSample,
    target: &RgbdSample,
    ext: &FeatureExtractor,
    cfg: &PerceptualConfig,
) -> Result<f64> {
    if recon.raster().dim() != target.raster().dim() {
        return Err(Error::Shape {
            expected: format!("{:?}", target.raster().dim()),
            actual: format!("{:?}", recon.raster().dim()),
        });
    }
    pyramid_loss(&ext.extract_features(recon)?, &ext.extract_features(target)?, cfg)
}

/// Normalized pyramids for every sample of a batch.
pub fn normalized_batch(ext: &FeatureExtractor, x: &Array4<f64>) -> Result<Vec<NormalizedPyramid>> {
    let feats = ext.features_batch(x)?;
    let n = x.dim().0;
    Ok((0..n)
        .map(|i| NormalizedPyramid {
            levels: feats
                .iter()
                .map(|f| channel_normalize(f.index_axis(Axis(0), i)))
                .collect(),
        })
        .collect())
}

/// Writes d(cos)/d(u) into `out` for the flattened cosine, where `u`, `v`
/// are normalized blocks.
fn flat_cosine_grad(u: ArrayView3<f64>, v: ArrayView3<f64>, mut out: ArrayViewMut3<f64>, scale: f64) {
    let dot: f64 = Zip::from(&u).and(&v).fold(0.0, |a, x, y| a + x * y);
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let d = nu * nv + NORM_EPS;
    let radial = if nu > 0.0 { dot * nv / (d * d * nu) } else { 0.0 };
    Zip::from(&mut out)
        .and(&u)
        .and(&v)
        .for_each(|o, &ui, &vi| *o += scale * (vi / d - radial * ui));
}

/// Chains a gradient w.r.t. normalized features back to raw features.
fn normalize_backward(raw: ArrayView3<f64>, g: ArrayView3<f64>) -> Array3<f64> {
    let (_, h, w) = raw.dim();
    let mut out = Array3::zeros(raw.dim());
    for y in 0..h {
        for x in 0..w {
            let a = raw.slice(ndarray::s![.., y, x]);
            let gy = g.slice(ndarray::s![.., y, x]);
            let m = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            if m == 0.0 {
                continue;
            }
            let me = m + NORM_EPS;
            let ag: f64 = a.iter().zip(gy.iter()).map(|(p, q)| p * q).sum();
            let mut o = out.slice_mut(ndarray::s![.., y, x]);
            Zip::from(&mut o)
                .and(&a)
                .and(&gy)
                .for_each(|o, &ai, &gi| *o = gi / me - ai * ag / (m * me * me));
        }
    }
    out
}

/// Per-sample losses of a reconstruction batch against cached targets and,
/// when `upstream` is given, the gradient of `sum_i upstream[i] * loss_i`
/// with respect to the batch.
pub fn perceptual_loss_batch(
    ext: &FeatureExtractor,
    x: &Array4<f64>,
    targets: &[&NormalizedPyramid],
    cfg: &PerceptualConfig,
    upstream: Option<&[f64]>,
) -> Result<(Vec<f64>, Option<Array4<f64>>)> {
    ext.check_channels(x.dim().1)?;
    let n = x.dim().0;
    if targets.len() != n {
        return Err(Error::Shape {
            expected: format!("{n} targets"),
            actual: targets.len().to_string(),
        });
    }
    let end = ext.block_layers(ext.blocks());
    let tape = ext.network().forward_tape_range(x, end);
    let blocks = ext.blocks();
    let mut losses = vec![0.0; n];
    let mut grads: Vec<Array4<f64>> = Vec::new();
    for (b, &tap) in ext.taps().iter().enumerate() {
        let raw = tape.layer_output(tap);
        let mut g_block = upstream.map(|_| Array4::<f64>::zeros(raw.dim()));
        for i in 0..n {
            let fi = raw.index_axis(Axis(0), i);
            let u = channel_normalize(fi);
            let v = &targets[i].levels[b];
            if v.dim() != u.dim() {
                return Err(Error::Shape {
                    expected: format!("{:?}", u.dim()),
                    actual: format!("{:?}", v.dim()),
                });
            }
            losses[i] += block_cosine(u.view(), v.view(), cfg);
            if let (Some(gb), Some(up)) = (g_block.as_mut(), upstream) {
                // loss_i = (1 - mean_b c_b)/2 -> d loss / d c_b = -1/(2B)
                let scale = -up[i] / (2.0 * blocks as f64);
                let mut gu = Array3::<f64>::zeros(u.dim());
                if cfg.per_position {
                    let p = (u.dim().1 * u.dim().2) as f64;
                    gu.zip_mut_with(v, |o, &vi| *o = scale * vi / p);
                } else {
                    flat_cosine_grad(u.view(), v.view(), gu.view_mut(), scale);
                }
                gb.index_axis_mut(Axis(0), i).assign(&normalize_backward(fi, gu.view()));
            }
        }
        if let Some(gb) = g_block {
            grads.push(gb);
        }
    }
    for l in &mut losses {
        *l = ((1.0 - *l / blocks as f64) / 2.0).clamp(0.0, 1.0);
    }
    let dx = if upstream.is_some() {
        let inj: Vec<(usize, &Array4<f64>)> = ext.taps().iter().copied().zip(grads.iter()).collect();
        Some(ext.network().backward(&tape, None, &inj, None))
    } else {
        None
    };
    Ok((losses, dx))
}
