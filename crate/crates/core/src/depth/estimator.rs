//! Small convolutional RGB -> depth network with additive skip connections.

use std::path::Path;

use ndarray::{s, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::{holdout_split, BatchSampler};
use crate::error::{Error, Result};
use crate::nn::{seeded_rng, Adam, AdamConfig, Checkpoint, Layer, Network, NetworkBuilder};
use crate::types::{stack_samples, ChannelMode, RgbdSample};

pub const CHECKPOINT_KIND: &str = "depth-estimator";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DepthEstimatorConfig {
    /// Channel width of the first stage; deeper stages use 2x and 4x.
    pub width: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for DepthEstimatorConfig {
    fn default() -> Self {
        Self {
            width: 8,
            epochs: 30,
            batch_size: 16,
            val_fraction: 0.1,
            seed: 7,
            adam: AdamConfig {
                lr: 3e-3,
                ..AdamConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct DepthEstimator {
    width: usize,
    net: Network,
}

/// Outcome of estimator training.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DepthTrainReport {
    pub epochs: usize,
    pub train_mae: Vec<f64>,
    pub val_mae: f64,
    /// Error of predicting the training-set mean depth everywhere.
    pub mean_baseline_mae: f64,
}

impl DepthEstimator {
    pub fn new(width: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let (w1, w2, w4) = (width, 2 * width, 4 * width);
        let b = NetworkBuilder::new(&mut rng)
            .conv(3, w1, true)
            .layer(Layer::Elu)
            .layer(Layer::SaveSkip(0))
            .layer(Layer::AvgPool2)
            .conv(w1, w2, true)
            .layer(Layer::Elu)
            .layer(Layer::SaveSkip(1))
            .layer(Layer::AvgPool2)
            .conv(w2, w2, true)
            .layer(Layer::Elu)
            .layer(Layer::SaveSkip(2))
            .layer(Layer::AvgPool2)
            .conv(w2, w4, true)
            .layer(Layer::Elu)
            .layer(Layer::SaveSkip(3))
            .layer(Layer::AvgPool2)
            .conv(w4, w4, true)
            .layer(Layer::Elu);
        let b = b
            .layer(Layer::Upsample2)
            .conv(w4, w4, true)
            .layer(Layer::Elu)
            .layer(Layer::AddSkip(3))
            .layer(Layer::Upsample2)
            .conv(w4, w2, true)
            .layer(Layer::Elu)
            .layer(Layer::AddSkip(2))
            .layer(Layer::Upsample2)
            .conv(w2, w2, true)
            .layer(Layer::Elu)
            .layer(Layer::AddSkip(1))
            .layer(Layer::Upsample2)
            .conv(w2, w1, true)
            .layer(Layer::Elu)
            .layer(Layer::AddSkip(0))
            .conv(w1, 1, true)
            .layer(Layer::Sigmoid);
        Self { width, net: b.build() }
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub(crate) fn check_input(x: &Array4<f64>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != 3 {
            return Err(Error::ChannelMismatch { expected: 3, actual: c });
        }
        if h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
            return Err(Error::Shape {
                expected: "spatial size divisible by 16".into(),
                actual: format!("{h}x{w}"),
            });
        }
        Ok(())
    }

    /// Depth for a batch of RGB tensors `(n, 3, h, w)` -> `(n, 1, h, w)`.
    pub fn predict_batch(&self, x: &Array4<f64>) -> Result<Array4<f64>> {
        Self::check_input(x)?;
        Ok(self.net.forward(x))
    }

    pub fn predict(&self, rgb: &RgbdSample) -> Result<RgbdSample> {
        let rgb = rgb.to_mode(ChannelMode::Rgb)?;
        let x = rgb.to_tensor().insert_axis(Axis(0));
        let y = self.predict_batch(&x)?;
        RgbdSample::from_tensor(ChannelMode::DepthOnly, y.index_axis(Axis(0), 0))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(CHECKPOINT_KIND);
        c.set("width", self.width);
        c.set("architecture_hash", self.net.architecture_hash());
        c.add_blob("params", self.net.params());
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind(CHECKPOINT_KIND)?;
        let mut est = Self::new(c.parse("width")?, 0);
        let hash: String = c.parse("architecture_hash")?;
        if hash != est.net.architecture_hash() {
            return Err(Error::Config("depth estimator architecture hash mismatch".into()));
        }
        let params = c
            .blob("params")
            .ok_or_else(|| Error::Config("depth estimator checkpoint lacks params".into()))?;
        est.net.set_params(params.to_vec())?;
        Ok(est)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.to_checkpoint().save(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(dir)?)
    }
}

fn split_rgb_depth(samples: &[&RgbdSample]) -> (Array4<f64>, Array4<f64>) {
    let x = stack_samples(samples.iter().copied());
    let rgb = x.slice(s![.., 0..3, .., ..]).to_owned();
    let d = x.slice(s![.., 3..4, .., ..]).to_owned();
    (rgb, d)
}

/// Mean absolute depth error of `est` on RGBD samples.
pub fn depth_mae(est: &DepthEstimator, samples: &[RgbdSample]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in samples.chunks(32) {
        let refs: Vec<&RgbdSample> = chunk.iter().collect();
        let (rgb, d) = split_rgb_depth(&refs);
        let pred = est.predict_batch(&rgb)?;
        total += (&pred - &d).mapv(f64::abs).sum();
        count += d.len();
    }
    Ok(total / count.max(1) as f64)
}

/// Trains an estimator on RGBD samples with a squared depth loss; errors are
/// reported as mean absolute error.
///
/// A `val_fraction` of the samples is held out for the reported error; with a
/// single sample the training sample doubles as validation.
pub fn train_depth_estimator(
    samples: &[RgbdSample],
    cfg: &DepthEstimatorConfig,
) -> Result<(DepthEstimator, DepthTrainReport)> {
    if samples.is_empty() {
        return Err(Error::Invalid(
            "depth estimator needs at least one training sample".into(),
        ));
    }
    if let Some(bad) = samples.iter().find(|s| s.mode() != ChannelMode::Rgbd) {
        return Err(Error::ChannelMismatch {
            expected: 4,
            actual: bad.channels(),
        });
    }
    let (train_idx, val_idx) = holdout_split(samples.len(), cfg.val_fraction, cfg.seed);
    let train: Vec<RgbdSample> = train_idx.iter().map(|&i| samples[i].clone()).collect();
    let val: Vec<RgbdSample> = if val_idx.is_empty() {
        train.clone()
    } else {
        val_idx.iter().map(|&i| samples[i].clone()).collect()
    };

    let mut est = DepthEstimator::new(cfg.width, cfg.seed);
    let sampler = BatchSampler::new(train.len(), cfg.batch_size.max(1), cfg.seed ^ 0x5eed);
    let total_steps = cfg.epochs * sampler.batches_per_epoch();
    let mut adam = Adam::new(cfg.adam.clone(), est.net.num_params(), total_steps);
    let mut grad = vec![0.0; est.net.num_params()];
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        let mut epoch_n = 0usize;
        for batch in sampler.epoch(epoch) {
            let refs: Vec<&RgbdSample> = batch.iter().map(|&i| &train[i]).collect();
            let (rgb, d) = split_rgb_depth(&refs);
            let tape = est.net.forward_tape(&rgb);
            let diff = tape.output() - &d;
            let n = diff.len() as f64;
            let loss = diff.mapv(|v| v * v).sum() / n;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("depth loss {loss} in epoch {epoch}"),
                });
            }
            let mae = diff.mapv(f64::abs).sum() / n;
            let dy = diff.mapv(|v| 2.0 * v / n);
            grad.fill(0.0);
            est.net.backward(&tape, Some(dy), &[], Some(&mut grad));
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    step,
                    detail: "non-finite depth estimator gradient".into(),
                });
            }
            adam.step(est.net.params_mut(), &grad);
            epoch_loss += mae * refs.len() as f64;
            epoch_n += refs.len();
            step += 1;
        }
        let mae = epoch_loss / epoch_n.max(1) as f64;
        log::debug!("depth estimator epoch {epoch}: train MAE {mae:.4}");
        history.push(mae);
    }
    let val_mae = depth_mae(&est, &val)?;
    let report = DepthTrainReport {
        epochs: cfg.epochs,
        train_mae: history,
        val_mae,
        mean_baseline_mae: mean_baseline_mae(&train, &val),
    };
    Ok((est, report))
}

/// Error of the constant predictor equal to the mean training depth.
pub fn mean_baseline_mae(train: &[RgbdSample], val: &[RgbdSample]) -> f64 {
    let depth_values = |s: &[RgbdSample]| -> Vec<f64> {
        s.iter()
            .flat_map(|x| {
                x.raster()
                    .index_axis(Axis(0), 3)
                    .iter()
                    .map(|&v| v as f64)
                    .collect::<Vec<_>>()
            })
            .collect()
    };
    let t = depth_values(train);
    let mean = t.iter().sum::<f64>() / t.len().max(1) as f64;
    let v = depth_values(val);
    v.iter().map(|d| (d - mean).abs()).sum::<f64>() / v.len().max(1) as f64
}
