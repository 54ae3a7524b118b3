use ndarray::{concatenate, Array2, Array4, Axis};
use serde::{Deserialize, Serialize};

use super::{
    ensure_finite, ensure_finite_grad, mode_matches, write_checkpoint, ProgressLog, ProgressRecord, RunOutput,
    TermAccumulator, TrainConfig,
};
use crate::dataset::{holdout_split, BatchSampler};
use crate::encdec::{encoder_loss_grad, encoder_loss_terms, to_columns, to_rows, Encoder, EncoderLossConfig};
use crate::error::{Error, Result};
use crate::nn::{derive_seed, Adam};
use crate::perceptual::FeatureExtractor;
use crate::types::{stack_samples, PairedExample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderReport {
    pub train_items: usize,
    pub val_items: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    /// Validation encoder loss of the returned parameters.
    pub val_loss: f64,
    /// Mean cosine between predicted and measured validation responses.
    pub val_cosine: f64,
    pub final_train_loss: f64,
    pub records: Vec<ProgressRecord>,
}

const CHUNK: usize = 64;

fn chunked_features(enc: &Encoder, items: &[&PairedExample]) -> Result<Array4<f64>> {
    let parts = items
        .chunks(CHUNK)
        .map(|c| enc.features(&stack_samples(c.iter().map(|p| &p.stimulus))))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
    concatenate(Axis(0), &views).map_err(|e| Error::Invalid(e.to_string()))
}

fn targets(items: &[&PairedExample]) -> Array2<f64> {
    let v = items[0].response.len();
    Array2::from_shape_fn((items.len(), v), |(i, j)| items[i].response.values()[j])
}

struct ValStats {
    loss: f64,
    cosine: f64,
}

fn evaluate(pred: &Array2<f64>, target: &Array2<f64>, cfg: &EncoderLossConfig) -> Result<ValStats> {
    let n = pred.nrows() as f64;
    let mut loss = 0.0;
    let mut cosine = 0.0;
    for (p, t) in pred.outer_iter().zip(target.outer_iter()) {
        let terms = encoder_loss_terms(p.as_slice().expect("row"), t.as_slice().expect("row"), cfg)?;
        loss += terms.total / n;
        cosine += terms.cosine / n;
    }
    Ok(ValStats { loss, cosine })
}

/// Phase I: fits the encoder readout (and the backbone when not frozen) to
/// measured responses. Keeps the parameters with the best validation loss.
pub fn train_encoder_phase1(
    paired: &[PairedExample],
    ext: &FeatureExtractor,
    cfg: &TrainConfig,
    out: &RunOutput,
) -> Result<(Encoder, EncoderReport)> {
    cfg.validate()?;
    let first = paired
        .first()
        .ok_or_else(|| Error::Invalid("encoder training needs paired examples".into()))?;
    mode_matches(cfg.mode, ext.in_channels(), "feature extractor")?;
    mode_matches(cfg.mode, first.stimulus.channels(), "paired stimuli")?;
    let seed = derive_seed(cfg.seed, "encoder");
    let mut enc = Encoder::new(
        ext,
        cfg.mode,
        first.response.voxel_ids().to_vec(),
        cfg.encoder.clone(),
        seed,
    )?;
    let (train_idx, val_idx) = holdout_split(paired.len(), cfg.val_fraction, derive_seed(seed, "split"));
    let train: Vec<&PairedExample> = train_idx.iter().map(|&i| &paired[i]).collect();
    let val: Vec<&PairedExample> = if val_idx.is_empty() {
        train.clone()
    } else {
        val_idx.iter().map(|&i| &paired[i]).collect()
    };
    let frozen = cfg.encoder.freeze_backbone;
    let y_val = targets(&val);
    let feat_train = if frozen {
        Some(chunked_features(&enc, &train)?)
    } else {
        None
    };
    let feat_val = if frozen {
        Some(chunked_features(&enc, &val)?)
    } else {
        None
    };

    let sampler = BatchSampler::new(train.len(), cfg.paired_batch, derive_seed(seed, "batches"));
    let total_steps = cfg.encoder_epochs * sampler.batches_per_epoch();
    let mut head_opt = Adam::new(cfg.encoder_adam.clone(), enc.head().num_params(), total_steps);
    let mut bb_opt = Adam::new(cfg.encoder_adam.clone(), enc.backbone().num_params(), total_steps);
    let mut head_grad = vec![0.0; enc.head().num_params()];
    let mut bb_grad = vec![0.0; enc.backbone().num_params()];
    let mut log = ProgressLog::open("encoder", out)?;
    let ckpt = out.checkpoint_dir();

    let val_of = |enc: &Encoder| -> Result<ValStats> {
        let pred = match &feat_val {
            Some(f) => enc.head_forward(f),
            None => {
                let parts = val
                    .chunks(CHUNK)
                    .map(|c| {
                        let x = stack_samples(c.iter().map(|p| &p.stimulus));
                        Ok(enc.head_forward(&enc.features(&x)?))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
                concatenate(Axis(0), &views).map_err(|e| Error::Invalid(e.to_string()))?
            }
        };
        evaluate(&pred, &y_val, &cfg.encoder_loss)
    };

    let mut best = (val_of(&enc)?.loss, 0usize, enc.clone());
    // on divergence, persist the best parameters seen so far before failing
    macro_rules! guard {
        ($check:expr) => {
            if let Err(e) = $check {
                if let Some(dir) = &ckpt {
                    write_checkpoint(dir, |d| best.2.save(d))?;
                }
                return Err(e);
            }
        };
    }
    let mut since_best = 0;
    let mut step = 0;
    let mut epochs_run = 0;
    let mut last_train = f64::NAN;
    for epoch in 0..cfg.encoder_epochs {
        let mut acc = TermAccumulator::default();
        for batch in sampler.epoch(epoch) {
            let n = batch.len() as f64;
            let (bb_tape, feats) = match feat_train.as_ref() {
                Some(f) => (None, f.select(Axis(0), &batch)),
                None => {
                    let x = stack_samples(batch.iter().map(|&i| &train[i].stimulus));
                    let tape = enc.backbone().forward_tape(&x);
                    let f = tape.output().clone();
                    (Some(tape), f)
                }
            };
            let tape = enc.head().forward_tape(&feats);
            let pred = to_rows(tape.output().clone());
            let mut dy = Array2::<f64>::zeros(pred.dim());
            let (mut total, mut mse, mut cos) = (0.0, 0.0, 0.0);
            for (k, &i) in batch.iter().enumerate() {
                let (terms, g) = encoder_loss_grad(
                    pred.row(k).as_slice().expect("row"),
                    train[i].response.values(),
                    &cfg.encoder_loss,
                )?;
                total += terms.total / n;
                mse += terms.mse / n;
                cos += terms.cosine / n;
                dy.row_mut(k).iter_mut().zip(g).for_each(|(o, v)| *o = v / n);
            }
            guard!(ensure_finite(step, "encoder loss", total));
            head_grad.fill(0.0);
            let dfeat = enc
                .head()
                .backward(&tape, Some(to_columns(&dy)), &[], Some(&mut head_grad));
            guard!(ensure_finite_grad(step, &head_grad));
            if let Some(bt) = bb_tape {
                bb_grad.fill(0.0);
                enc.backbone().backward(&bt, Some(dfeat), &[], Some(&mut bb_grad));
                guard!(ensure_finite_grad(step, &bb_grad));
                bb_opt.step(enc.backbone_mut().params_mut(), &bb_grad);
            }
            head_opt.step(enc.head_mut().params_mut(), &head_grad);
            acc.add(&[("loss", total), ("mse", mse), ("cosine", cos)]);
            step += 1;
        }
        epochs_run = epoch + 1;
        let means = acc.means();
        last_train = means["loss"];
        let val_loss = val_of(&enc)?.loss;
        guard!(ensure_finite(step, "validation encoder loss", val_loss));
        log.push(epoch, step, last_train, means, val_loss, head_opt.current_lr())?;
        if val_loss < best.0 {
            best = (val_loss, epoch + 1, enc.clone());
            since_best = 0;
        } else {
            since_best += 1;
        }
        if let Some(dir) = &ckpt {
            if cfg.checkpoint_every > 0 && epochs_run % cfg.checkpoint_every == 0 {
                write_checkpoint(dir, |d| best.2.save(d))?;
            }
        }
        if cfg.patience > 0 && since_best >= cfg.patience {
            log::info!("encoder early stop after epoch {epoch}");
            break;
        }
    }
    let (_, best_epoch, enc) = best;
    let stats = val_of(&enc)?;
    let report = EncoderReport {
        train_items: train.len(),
        val_items: val.len(),
        epochs_run,
        best_epoch,
        val_loss: stats.loss,
        val_cosine: stats.cosine,
        final_train_loss: last_train,
        records: log.records,
    };
    Ok((enc, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perceptual::ExtractorConfig;
    use crate::types::{ChannelMode, FmriVector, RgbdSample};
    use ndarray::Array3;

    fn extractor() -> FeatureExtractor {
        FeatureExtractor::new(
            1,
            ExtractorConfig {
                widths: vec![4, 6, 8],
                convs_per_block: 1,
                ..Default::default()
            },
            3,
        )
        .unwrap()
    }

    fn item(k: usize, voxels: usize) -> PairedExample {
        let s = RgbdSample::new(
            ChannelMode::DepthOnly,
            Array3::from_shape_fn((1, 16, 16), |(_, y, x)| ((x * 3 + y * 5 + k * 7) % 11) as f32 / 10.0),
        )
        .unwrap();
        let r = (0..voxels).map(|v| ((v * 13 + k * 3) % 7) as f64 / 3.0 - 1.0).collect();
        PairedExample {
            item_id: format!("i{k}"),
            stimulus: s,
            response: FmriVector::from_values(r).unwrap(),
        }
    }

    fn config() -> TrainConfig {
        TrainConfig {
            mode: ChannelMode::DepthOnly,
            encoder_epochs: 400,
            paired_batch: 1,
            patience: 0,
            encoder: crate::encdec::EncoderConfig {
                backbone_blocks: 2,
                freeze_backbone: true,
                pool_grid: 2,
            },
            encoder_adam: crate::nn::AdamConfig {
                lr: 1e-2,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn single_item_reaches_loss_minimum() {
        let data = vec![item(0, 12)];
        let (_, report) = train_encoder_phase1(&data, &extractor(), &config(), &RunOutput::none()).unwrap();
        assert!(
            (report.final_train_loss + 0.1).abs() < 0.02,
            "{}",
            report.final_train_loss
        );
        assert_eq!(report.records.len(), 400);
    }

    #[test]
    fn unfrozen_backbone_trains_and_is_deterministic() {
        let data: Vec<_> = (0..4).map(|k| item(k, 6)).collect();
        let mut cfg = config();
        cfg.encoder.freeze_backbone = false;
        cfg.encoder_epochs = 5;
        let (a, ra) = train_encoder_phase1(&data, &extractor(), &cfg, &RunOutput::none()).unwrap();
        let (b, _) = train_encoder_phase1(&data, &extractor(), &cfg, &RunOutput::none()).unwrap();
        assert_eq!(a.param_hash(), b.param_hash());
        assert!(ra.records.iter().all(|r| r.total.is_finite()));
    }

    #[test]
    fn progress_is_written_as_json_lines() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = config();
        cfg.encoder_epochs = 3;
        cfg.checkpoint_every = 1;
        train_encoder_phase1(
            &[item(0, 4), item(1, 4)],
            &extractor(),
            &cfg,
            &RunOutput::at(dir.path()),
        )
        .unwrap();
        let text = std::fs::read_to_string(dir.path().join(super::super::PROGRESS_FILE)).unwrap();
        let recs: Vec<ProgressRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(recs.len(), 3);
        assert!(recs[0].terms.contains_key("cosine"));
        Encoder::load(&dir.path().join(super::super::CHECKPOINT_DIR)).unwrap();
    }

    #[test]
    fn mode_mismatch_is_rejected() {
        let mut cfg = config();
        cfg.mode = ChannelMode::Rgbd;
        assert!(train_encoder_phase1(&[item(0, 4)], &extractor(), &cfg, &RunOutput::none()).is_err());
    }
}
