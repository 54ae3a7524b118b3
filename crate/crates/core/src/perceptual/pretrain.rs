//! Recognition pretraining of feature extractors on a toy shape task.

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use super::extractor::{ExtractorConfig, FeatureExtractor};
use crate::dataset::{holdout_split, BatchSampler};
use crate::depth::{render_rgbd, SceneConfig, SceneSpec};
use crate::error::{Error, Result};
use crate::nn::{derive_seed, Adam, AdamConfig};
use crate::types::{stack_samples, ChannelMode, RgbdSample};

/// Labeled samples for the 4-class task: class = shape * 2 + depth band.
pub fn classification_dataset(
    n: usize,
    mode: ChannelMode,
    scene: &SceneConfig,
    seed: u64,
) -> Result<Vec<(RgbdSample, usize)>> {
    (0..n)
        .map(|i| {
            let class = i % 4;
            let spec = SceneSpec::classification(derive_seed(seed, &format!("cls{i}")), scene, class);
            Ok((render_rgbd(&spec)?.to_mode(mode)?, class))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub extractor: ExtractorConfig,
    pub samples: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            extractor: ExtractorConfig::default(),
            samples: 2000,
            epochs: 8,
            batch_size: 32,
            val_fraction: 0.2,
            seed: 11,
            adam: AdamConfig {
                lr: 2e-3,
                ..AdamConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainReport {
    pub train_loss: Vec<f64>,
    pub val_accuracy: f64,
    pub classes: usize,
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    p
}

/// Fraction of samples whose arg-max logit equals the label.
pub fn accuracy(ext: &FeatureExtractor, data: &[(RgbdSample, usize)]) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for chunk in data.chunks(64) {
        let x = stack_samples(chunk.iter().map(|(s, _)| s));
        let logits = ext.logits(&x)?;
        for (row, (_, label)) in logits.rows().into_iter().zip(chunk) {
            let arg = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap_or(0);
            correct += usize::from(arg == *label);
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Trains an extractor (with its classifier head) by softmax cross-entropy.
pub fn pretrain_classifier(
    data: &[(RgbdSample, usize)],
    cfg: &PretrainConfig,
) -> Result<(FeatureExtractor, PretrainReport)> {
    let first = data
        .first()
        .ok_or_else(|| Error::Invalid("pretraining needs labeled samples".into()))?;
    let channels = first.0.channels();
    let mut labels: Vec<usize> = data.iter().map(|(_, l)| *l).collect();
    labels.sort_unstable();
    labels.dedup();
    if labels.len() < 2 {
        return Err(Error::Invalid(format!(
            "pretraining needs at least 2 classes, found {}",
            labels.len()
        )));
    }
    let classes = labels.last().copied().unwrap_or(0) + 1;
    if classes != cfg.extractor.classes {
        return Err(Error::Config(format!(
            "labels span {classes} classes but the extractor head has {}",
            cfg.extractor.classes
        )));
    }
    if let Some((s, _)) = data.iter().find(|(s, _)| s.channels() != channels) {
        return Err(Error::ChannelMismatch {
            expected: channels,
            actual: s.channels(),
        });
    }

    let (train_idx, val_idx) = holdout_split(data.len(), cfg.val_fraction, cfg.seed);
    let train: Vec<(RgbdSample, usize)> = train_idx.iter().map(|&i| data[i].clone()).collect();
    let val: Vec<(RgbdSample, usize)> = val_idx.iter().map(|&i| data[i].clone()).collect();

    let mut ext = FeatureExtractor::new(channels, cfg.extractor.clone(), cfg.seed)?;
    let sampler = BatchSampler::new(train.len(), cfg.batch_size.max(1), derive_seed(cfg.seed, "batches"));
    let n_params = ext.network().num_params();
    let mut adam = Adam::new(cfg.adam.clone(), n_params, cfg.epochs * sampler.batches_per_epoch());
    let mut grad = vec![0.0; n_params];
    let mut history = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for batch in sampler.epoch(epoch) {
            let x = stack_samples(batch.iter().map(|&i| &train[i].0));
            let net = ext.network();
            let tape = net.forward_tape(&x);
            let (n, k, _, _) = tape.output().dim();
            let logits = tape
                .output()
                .clone()
                .into_shape_with_order((n, k))
                .expect("flat logits");
            let p = softmax_rows(&logits);
            let mut loss = 0.0;
            let mut dy = p.clone();
            for (r, &i) in batch.iter().enumerate() {
                let label = train[i].1;
                loss -= p[[r, label]].max(1e-300).ln();
                dy[[r, label]] -= 1.0;
            }
            loss /= n as f64;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("classification loss {loss}"),
                });
            }
            dy /= n as f64;
            let dy: Array4<f64> = dy.into_shape_with_order((n, k, 1, 1)).expect("logit grad");
            grad.fill(0.0);
            net.backward(&tape, Some(dy), &[], Some(&mut grad));
            adam.step(ext.network_mut().params_mut(), &grad);
            total += loss * n as f64;
            step += 1;
        }
        let mean = total / train.len() as f64;
        log::debug!("pretrain epoch {epoch}: cross-entropy {mean:.4}");
        history.push(mean);
    }
    let val_accuracy = accuracy(&ext, if val.is_empty() { &train } else { &val })?;
    Ok((
        ext,
        PretrainReport {
            train_loss: history,
            val_accuracy,
            classes,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene() -> SceneConfig {
        SceneConfig {
            resolution: 32,
            ..Default::default()
        }
    }

    #[test]
    fn single_class_is_rejected() {
        let data: Vec<_> = classification_dataset(8, ChannelMode::DepthOnly, &scene(), 1)
            .unwrap()
            .into_iter()
            .map(|(s, _)| (s, 0))
            .collect();
        assert!(pretrain_classifier(&data, &PretrainConfig::default()).is_err());
    }

    #[test]
    fn untrained_extractor_is_near_chance() {
        let data = classification_dataset(400, ChannelMode::DepthOnly, &scene(), 2).unwrap();
        let ext = FeatureExtractor::new(1, ExtractorConfig::default(), 5).unwrap();
        let acc = accuracy(&ext, &data).unwrap();
        // a random head tends to favor one class; anything near a single
        // class share is chance behavior
        assert!(acc <= 0.45, "untrained accuracy {acc}");
    }

    #[test]
    fn labels_are_balanced() {
        let data = classification_dataset(40, ChannelMode::Rgbd, &scene(), 3).unwrap();
        for c in 0..4 {
            assert_eq!(data.iter().filter(|(_, l)| *l == c).count(), 10);
        }
    }
}
