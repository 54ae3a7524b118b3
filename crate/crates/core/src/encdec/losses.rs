use ndarray::{Array4, ArrayView3, ArrayViewMut3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perceptual::{perceptual_loss_batch, FeatureExtractor, NormalizedPyramid, PerceptualConfig};
use crate::types::RgbdSample;

pub const COS_EPS: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderLossConfig {
    pub alpha: f64,
}

impl Default for EncoderLossConfig {
    fn default() -> Self {
        Self { alpha: 0.9 }
    }
}

impl EncoderLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Components of the encoder loss for one response vector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderLossTerms {
    pub mse: f64,
    pub cosine: f64,
    pub total: f64,
}

fn cosine(p: &[f64], t: &[f64]) -> (f64, f64, f64, f64) {
    let dot: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
    let np = p.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nt = t.iter().map(|a| a * a).sum::<f64>().sqrt();
    (dot / (np * nt + COS_EPS), dot, np, nt)
}

/// `alpha * MSE(pred, target) - (1 - alpha) * cos(pred, target)`.
pub fn encoder_loss_terms(pred: &[f64], target: &[f64], cfg: &EncoderLossConfig) -> Result<EncoderLossTerms> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Shape {
            expected: format!("{} voxels", target.len()),
            actual: format!("{} voxels", pred.len()),
        });
    }
    let mse = pred.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / pred.len() as f64;
    let (cos, ..) = cosine(pred, target);
    Ok(EncoderLossTerms {
        mse,
        cosine: cos,
        total: cfg.alpha * mse - (1.0 - cfg.alpha) * cos,
    })
}

pub fn encoder_loss(pred: &[f64], target: &[f64], cfg: &EncoderLossConfig) -> Result<f64> {
    Ok(encoder_loss_terms(pred, target, cfg)?.total)
}

/// Loss and its gradient with respect to `pred`.
pub fn encoder_loss_grad(
    pred: &[f64],
    target: &[f64],
    cfg: &EncoderLossConfig,
) -> Result<(EncoderLossTerms, Vec<f64>)> {
    let terms = encoder_loss_terms(pred, target, cfg)?;
    let n = pred.len() as f64;
    let (_, dot, np, nt) = cosine(pred, target);
    let d = np * nt + COS_EPS;
    let radial = if np > 0.0 { dot * nt / (d * d * np) } else { 0.0 };
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let dmse = 2.0 * (p - t) / n;
            let dcos = t / d - radial * p;
            cfg.alpha * dmse - (1.0 - cfg.alpha) * dcos
        })
        .collect();
    Ok((terms, grad))
}

/// Number of horizontal plus vertical neighbor pairs in one channel.
fn pair_count(h: usize, w: usize) -> usize {
    h * w.saturating_sub(1) + h.saturating_sub(1) * w
}

/// Unweighted anisotropic TV of one raster: mean |difference| over all
/// channels and neighbor pairs.
pub fn total_variation(x: ArrayView3<f64>) -> f64 {
    let (c, h, w) = x.dim();
    let pairs = c * pair_count(h, w);
    if pairs == 0 {
        return 0.0;
    }
    let mut sum = 0.0;
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let v = x[[ch, y, xx]];
                if xx + 1 < w {
                    sum += (x[[ch, y, xx + 1]] - v).abs();
                }
                if y + 1 < h {
                    sum += (x[[ch, y + 1, xx]] - v).abs();
                }
            }
        }
    }
    sum / pairs as f64
}

fn total_variation_grad(x: ArrayView3<f64>, mut out: ArrayViewMut3<f64>, scale: f64) {
    let (c, h, w) = x.dim();
    let pairs = c * pair_count(h, w);
    if pairs == 0 {
        return;
    }
    let k = scale / pairs as f64;
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let v = x[[ch, y, xx]];
                if xx + 1 < w {
                    let s = k * (x[[ch, y, xx + 1]] - v).signum();
                    out[[ch, y, xx + 1]] += s;
                    out[[ch, y, xx]] -= s;
                }
                if y + 1 < h {
                    let s = k * (x[[ch, y + 1, xx]] - v).signum();
                    out[[ch, y + 1, xx]] += s;
                    out[[ch, y, xx]] -= s;
                }
            }
        }
    }
}

/// Gradient of `weight * total_variation(x)`.
pub fn total_variation_gradient(x: ArrayView3<f64>, weight: f64) -> ndarray::Array3<f64> {
    let mut out = ndarray::Array3::zeros(x.dim());
    total_variation_grad(x, out.view_mut(), weight);
    out
}

/// Weighted TV regularizer of a sample.
pub fn tv_regularizer(x: &RgbdSample, weight: f64) -> f64 {
    weight * total_variation(x.to_tensor().view())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImageLossConfig {
    pub tv_weight: f64,
    pub perceptual: PerceptualConfig,
}

impl Default for ImageLossConfig {
    fn default() -> Self {
        Self {
            tv_weight: 0.1,
            perceptual: PerceptualConfig::default(),
        }
    }
}

/// The three terms of the image loss for one reconstruction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageLossTerms {
    pub l1: f64,
    pub perceptual: f64,
    pub tv: f64,
}

impl ImageLossTerms {
    pub fn total(&self) -> f64 {
        self.l1 + self.perceptual + self.tv
    }

    pub fn in_unit_range(&self) -> bool {
        [self.l1, self.perceptual, self.tv]
            .iter()
            .all(|v| (-1e-12..=1.0 + 1e-12).contains(v))
    }

    pub fn mean(items: &[ImageLossTerms]) -> ImageLossTerms {
        let n = items.len().max(1) as f64;
        let mut m = ImageLossTerms::default();
        for t in items {
            m.l1 += t.l1 / n;
            m.perceptual += t.perceptual / n;
            m.tv += t.tv / n;
        }
        m
    }
}

/// Image loss between single samples.
pub fn image_loss(
    recon: &RgbdSample,
    target: &RgbdSample,
    ext: &FeatureExtractor,
    cfg: &ImageLossConfig,
) -> Result<ImageLossTerms> {
    if recon.raster().dim() != target.raster().dim() {
        return Err(Error::Shape {
            expected: format!("{:?}", target.raster().dim()),
            actual: format!("{:?}", recon.raster().dim()),
        });
    }
    let x = recon.to_tensor().insert_axis(Axis(0));
    let t = target.to_tensor().insert_axis(Axis(0));
    let tp = crate::perceptual::normalized_batch(ext, &t)?;
    let (terms, _) = image_loss_batch(ext, &x, &t, &[&tp[0]], cfg, None)?;
    Ok(terms[0])
}

/// Image-loss terms for a batch against targets with cached normalized
/// features. With `upstream`, also returns the gradient of
/// `sum_i upstream[i] * total_i` with respect to `recon`.
pub fn image_loss_batch(
    ext: &FeatureExtractor,
    recon: &Array4<f64>,
    target: &Array4<f64>,
    target_features: &[&NormalizedPyramid],
    cfg: &ImageLossConfig,
    upstream: Option<&[f64]>,
) -> Result<(Vec<ImageLossTerms>, Option<Array4<f64>>)> {
    if recon.dim() != target.dim() {
        return Err(Error::Shape {
            expected: format!("{:?}", target.dim()),
            actual: format!("{:?}", recon.dim()),
        });
    }
    let (perc, dperc) = perceptual_loss_batch(ext, recon, target_features, &cfg.perceptual, upstream)?;
    let n = recon.dim().0;
    let per_sample = recon.len() / n.max(1);
    let mut grad = upstream.map(|_| dperc.expect("gradient requested"));
    let mut terms = Vec::with_capacity(n);
    for i in 0..n {
        let r = recon.index_axis(Axis(0), i);
        let t = target.index_axis(Axis(0), i);
        let l1 = Zip::from(&r).and(&t).fold(0.0, |a, x, y| a + (x - y).abs()) / per_sample as f64;
        let tv = cfg.tv_weight * total_variation(r);
        terms.push(ImageLossTerms {
            l1,
            perceptual: perc[i],
            tv,
        });
        if let (Some(g), Some(up)) = (grad.as_mut(), upstream) {
            let mut gi = g.index_axis_mut(Axis(0), i);
            let k = up[i] / per_sample as f64;
            Zip::from(&mut gi)
                .and(&r)
                .and(&t)
                .for_each(|o, &x, &y| *o += k * (x - y).signum());
            total_variation_grad(r, gi, up[i] * cfg.tv_weight);
        }
    }
    Ok((terms, grad))
}
