use ndarray::{concatenate, Array2, Array4, Axis, Zip};
use serde::{Deserialize, Serialize};

use super::{
    ensure_finite, ensure_finite_grad, ensure_unit, mode_matches, write_checkpoint, ProgressLog, ProgressRecord,
    RunOutput, TermAccumulator, TrainConfig,
};
use crate::dataset::{holdout_split, BatchSampler};
use crate::depth::DepthEstimator;
use crate::encdec::{image_loss_batch, to_columns, Decoder, ImageLossConfig, ImageLossTerms, StimulusEncoder};
use crate::error::{Error, Result};
use crate::nn::{derive_seed, Adam};
use crate::perceptual::{normalized_batch, FeatureExtractor};
use crate::types::{stack_samples, ChannelMode, PairedExample, RgbdSample, UnpairedExample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthLossKind {
    Perceptual,
    L1,
}

impl std::str::FromStr for DepthLossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "perceptual" => Ok(Self::Perceptual),
            "l1" => Ok(Self::L1),
            other => Err(Error::Config(format!(
                "unknown depth loss kind {other:?} (perceptual or l1)"
            ))),
        }
    }
}

/// Frozen depth estimator applied to RGB reconstructions and targets.
#[derive(Clone, Copy)]
pub struct DepthConstraint<'a> {
    pub estimator: &'a DepthEstimator,
    pub kind: DepthLossKind,
    /// Depth feature extractor for the perceptual kind.
    pub depth_extractor: Option<&'a FeatureExtractor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderReport {
    pub train_items: usize,
    pub val_items: usize,
    pub unpaired_items: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    /// Validation image loss of the returned decoder.
    pub val_loss: f64,
    pub encoder_fingerprint: String,
    pub records: Vec<ProgressRecord>,
}

/// Per-sample depth terms between the estimator's depth for `recon` and for
/// `target` (both RGB batches), and the gradient of `sum_i upstream[i] *
/// term_i` with respect to `recon` when `upstream` is given.
///
/// The perceptual kind compares estimated depth with the l1 and perceptual
/// parts of the image loss; the TV part regularizes reconstructions and is
/// not applied here, so identical inputs give 0 for both kinds.
pub fn depth_constraint_term(
    c: &DepthConstraint<'_>,
    recon: &Array4<f64>,
    target: &Array4<f64>,
    image_cfg: &ImageLossConfig,
    upstream: Option<&[f64]>,
) -> Result<(Vec<f64>, Option<Array4<f64>>)> {
    let est = c.estimator;
    DepthEstimator::check_input(recon)?;
    let tape = est.network().forward_tape(recon);
    let d_hat = tape.output();
    let d = est.predict_batch(target)?;
    let n = recon.dim().0;
    let (terms, dd) = match c.kind {
        DepthLossKind::L1 => {
            let per = d.len() / n.max(1);
            let terms: Vec<f64> = (0..n)
                .map(|i| {
                    let a = d_hat.index_axis(Axis(0), i);
                    let b = d.index_axis(Axis(0), i);
                    Zip::from(&a).and(&b).fold(0.0, |s, x, y| s + (x - y).abs()) / per as f64
                })
                .collect();
            let grad = upstream.map(|up| {
                let mut g = d_hat - &d;
                for (i, mut gi) in g.outer_iter_mut().enumerate() {
                    let k = up[i] / per as f64;
                    gi.mapv_inplace(|v| k * v.signum());
                }
                g
            });
            (terms, grad)
        }
        DepthLossKind::Perceptual => {
            let ext = c
                .depth_extractor
                .ok_or_else(|| Error::Config("perceptual depth constraint needs a depth feature extractor".into()))?;
            let targets = normalized_batch(ext, &d)?;
            let refs: Vec<_> = targets.iter().collect();
            let cfg = ImageLossConfig {
                tv_weight: 0.0,
                ..image_cfg.clone()
            };
            let (t, g) = image_loss_batch(ext, d_hat, &d, &refs, &cfg, upstream)?;
            (t.iter().map(|x| x.l1 + x.perceptual).collect(), g)
        }
    };
    let dx = dd.map(|dd| est.network().backward(&tape, Some(dd), &[], None));
    Ok((terms, dx))
}

struct Branch {
    terms: ImageLossTerms,
    depth: f64,
}

/// Mean losses of one batch and, when `weight` is given, accumulation of
/// `weight * mean loss` gradients into `grad`.
#[allow(clippy::too_many_arguments)]
fn branch(
    dec: &Decoder,
    ext: &FeatureExtractor,
    r: &Array2<f64>,
    s: &Array4<f64>,
    cfg: &TrainConfig,
    constraint: Option<&DepthConstraint<'_>>,
    weight: Option<f64>,
    grad: Option<&mut [f64]>,
) -> Result<Branch> {
    let n = r.nrows();
    let tape = dec.network().forward_tape(&to_columns(r));
    let recon = tape.output();
    let targets = normalized_batch(ext, s)?;
    let refs: Vec<_> = targets.iter().collect();
    let up: Option<Vec<f64>> = weight.map(|w| vec![w / n as f64; n]);
    let (terms, mut dy) = image_loss_batch(ext, recon, s, &refs, &cfg.image_loss, up.as_deref())?;
    let mut depth = 0.0;
    if let Some(c) = constraint {
        let dup: Option<Vec<f64>> = up.as_ref().map(|u| u.iter().map(|v| v * cfg.depth_weight).collect());
        let (dt, dg) = depth_constraint_term(c, recon, s, &cfg.image_loss, dup.as_deref())?;
        depth = dt.iter().sum::<f64>() / n as f64;
        if let (Some(a), Some(b)) = (dy.as_mut(), dg) {
            *a += &b;
        }
    }
    if let (Some(dy), Some(g)) = (dy, grad) {
        dec.network().backward(&tape, Some(dy), &[], Some(g));
    }
    Ok(Branch {
        terms: ImageLossTerms::mean(&terms),
        depth,
    })
}

/// Mean cycle loss `image_loss(Dec(Enc(s)), s)` over a stimulus batch.
pub fn cycle_loss(
    enc: &dyn StimulusEncoder,
    dec: &Decoder,
    ext: &FeatureExtractor,
    stimuli: &Array4<f64>,
    image_cfg: &ImageLossConfig,
) -> Result<ImageLossTerms> {
    let cfg = TrainConfig {
        image_loss: image_cfg.clone(),
        ..Default::default()
    };
    let r = enc.encode_batch(stimuli)?;
    Ok(branch(dec, ext, &r, stimuli, &cfg, None, None, None)?.terms)
}

fn response_rows(items: &[&PairedExample], idx: &[usize]) -> Array2<f64> {
    let v = items[0].response.len();
    Array2::from_shape_fn((idx.len(), v), |(i, j)| items[idx[i]].response.values()[j])
}

fn check_terms(step: usize, prefix: &str, b: &Branch) -> Result<()> {
    ensure_unit(step, &format!("{prefix}_l1"), b.terms.l1)?;
    ensure_unit(step, &format!("{prefix}_perceptual"), b.terms.perceptual)?;
    ensure_unit(step, &format!("{prefix}_tv"), b.terms.tv)?;
    ensure_unit(step, &format!("{prefix}_depth"), b.depth / 2.0)
}

/// Phase II: trains a decoder on paired responses and, when `unpaired` is
/// non-empty, on `Dec(Enc(s))` cycles through the frozen encoder.
pub fn train_decoder_phase2(
    paired: &[PairedExample],
    unpaired: &[UnpairedExample],
    enc: &dyn StimulusEncoder,
    ext: &FeatureExtractor,
    cfg: &TrainConfig,
    out: &RunOutput,
) -> Result<(Decoder, DecoderReport)> {
    train_decoder(paired, unpaired, enc, ext, cfg, None, out)
}

/// RGB decoder whose paired and cycle losses each gain a depth term computed
/// through a frozen depth estimator.
#[allow(clippy::too_many_arguments)]
pub fn train_rgb_only_with_depth_constraint(
    paired: &[PairedExample],
    unpaired: &[UnpairedExample],
    enc: &dyn StimulusEncoder,
    ext_rgb: &FeatureExtractor,
    constraint: DepthConstraint<'_>,
    cfg: &TrainConfig,
    out: &RunOutput,
) -> Result<(Decoder, DecoderReport)> {
    if cfg.mode != ChannelMode::Rgb {
        return Err(Error::Config(format!(
            "depth-constrained decoding needs rgb mode, got {}",
            cfg.mode
        )));
    }
    if let (DepthLossKind::Perceptual, Some(e)) = (constraint.kind, constraint.depth_extractor) {
        mode_matches(ChannelMode::DepthOnly, e.in_channels(), "depth feature extractor")?;
    }
    train_decoder(paired, unpaired, enc, ext_rgb, cfg, Some(constraint), out)
}

fn encode_all(enc: &dyn StimulusEncoder, items: &[UnpairedExample]) -> Result<Array2<f64>> {
    let parts = items
        .chunks(64)
        .map(|c| enc.encode_batch(&stack_samples(c.iter().map(|u| &u.stimulus))))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
    concatenate(Axis(0), &views).map_err(|e| Error::Invalid(e.to_string()))
}

#[allow(clippy::too_many_arguments)]
fn train_decoder(
    paired: &[PairedExample],
    unpaired: &[UnpairedExample],
    enc: &dyn StimulusEncoder,
    ext: &FeatureExtractor,
    cfg: &TrainConfig,
    constraint: Option<DepthConstraint<'_>>,
    out: &RunOutput,
) -> Result<(Decoder, DecoderReport)> {
    cfg.validate()?;
    let first = paired
        .first()
        .ok_or_else(|| Error::Invalid("decoder training needs paired examples".into()))?;
    mode_matches(cfg.mode, ext.in_channels(), "feature extractor")?;
    mode_matches(cfg.mode, enc.in_channels(), "frozen encoder")?;
    mode_matches(cfg.mode, first.stimulus.channels(), "paired stimuli")?;
    let (h, w) = first.stimulus.resolution();
    if h != w {
        return Err(Error::Config(format!("decoder needs square stimuli, got {h}x{w}")));
    }
    let fingerprint = enc.fingerprint();
    let seed = derive_seed(cfg.seed, "decoder");
    let voxels = first.response.len();
    let mut dec = Decoder::new(cfg.mode, voxels, h, &cfg.decoder, seed)?;

    let (train_idx, val_idx) = holdout_split(paired.len(), cfg.val_fraction, derive_seed(seed, "split"));
    let train: Vec<&PairedExample> = train_idx.iter().map(|&i| &paired[i]).collect();
    let val: Vec<&PairedExample> = if val_idx.is_empty() {
        train.clone()
    } else {
        val_idx.iter().map(|&i| &paired[i]).collect()
    };
    let val_r = response_rows(&val, &(0..val.len()).collect::<Vec<_>>());
    let val_s = stack_samples(val.iter().map(|p| &p.stimulus));
    // the encoder is frozen, so cycle inputs can be encoded once
    let unpaired_r = if unpaired.is_empty() {
        None
    } else {
        Some(encode_all(enc, unpaired)?)
    };
    if let Some(r) = &unpaired_r {
        if r.ncols() != voxels {
            return Err(Error::Shape {
                expected: format!("{voxels} encoder outputs"),
                actual: r.ncols().to_string(),
            });
        }
    }

    let sampler = BatchSampler::new(train.len(), cfg.paired_batch, derive_seed(seed, "paired"));
    let unpaired_sampler = BatchSampler::new(unpaired.len(), cfg.unpaired_batch, derive_seed(seed, "unpaired"));
    let total_steps = cfg.decoder_epochs * sampler.batches_per_epoch();
    let mut opt = Adam::new(cfg.decoder_adam.clone(), dec.network().num_params(), total_steps);
    let mut grad = vec![0.0; dec.network().num_params()];
    let mut log = ProgressLog::open("decoder", out)?;
    let ckpt = out.checkpoint_dir();
    let c = constraint.as_ref();

    let val_of = |dec: &Decoder| -> Result<f64> {
        let mut total = 0.0;
        for start in (0..val.len()).step_by(64) {
            let end = (start + 64).min(val.len());
            let r = val_r.slice(ndarray::s![start..end, ..]).to_owned();
            let s = val_s.slice(ndarray::s![start..end, .., .., ..]).to_owned();
            let b = branch(dec, ext, &r, &s, cfg, None, None, None)?;
            total += b.terms.total() * (end - start) as f64;
        }
        Ok(total / val.len() as f64)
    };
    let verify_encoder = || -> Result<()> {
        let now = enc.fingerprint();
        if now != fingerprint {
            return Err(Error::EncoderMutated {
                before: fingerprint.clone(),
                after: now,
            });
        }
        Ok(())
    };

    let mut best = (val_of(&dec)?, 0usize, dec.clone());
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
    for epoch in 0..cfg.decoder_epochs {
        let mut acc = TermAccumulator::default();
        for batch in sampler.epoch(epoch) {
            grad.fill(0.0);
            let r = response_rows(&train, &batch);
            let s = stack_samples(batch.iter().map(|&i| &train[i].stimulus));
            let paired_b = branch(&dec, ext, &r, &s, cfg, c, Some(1.0), Some(&mut grad))?;
            guard!(check_terms(step, "dec", &paired_b));
            let mut total = paired_b.terms.total() + cfg.depth_weight * paired_b.depth;
            let mut terms = vec![
                ("dec_l1", paired_b.terms.l1),
                ("dec_perceptual", paired_b.terms.perceptual),
                ("dec_tv", paired_b.terms.tv),
            ];
            if c.is_some() {
                terms.push(("dec_depth", paired_b.depth));
            }
            if let Some(ur) = &unpaired_r {
                let idx = unpaired_sampler.draw(step);
                let r_u = ur.select(Axis(0), &idx);
                let s_u = stack_samples(idx.iter().map(|&i| &unpaired[i].stimulus));
                let cyc = branch(&dec, ext, &r_u, &s_u, cfg, c, Some(cfg.cycle_weight), Some(&mut grad))?;
                guard!(check_terms(step, "cycle", &cyc));
                total += cfg.cycle_weight * (cyc.terms.total() + cfg.depth_weight * cyc.depth);
                terms.extend([
                    ("cycle_l1", cyc.terms.l1),
                    ("cycle_perceptual", cyc.terms.perceptual),
                    ("cycle_tv", cyc.terms.tv),
                ]);
                if c.is_some() {
                    terms.push(("cycle_depth", cyc.depth));
                }
            }
            guard!(ensure_finite(step, "decoder loss", total));
            guard!(ensure_finite_grad(step, &grad));
            opt.step(dec.network_mut().params_mut(), &grad);
            terms.push(("loss", total));
            acc.add(&terms);
            step += 1;
        }
        epochs_run = epoch + 1;
        let means = acc.means();
        let val_loss = val_of(&dec)?;
        guard!(ensure_finite(step, "validation image loss", val_loss));
        guard!(verify_encoder());
        log.push(epoch, step, means["loss"], means, val_loss, opt.current_lr())?;
        if val_loss < best.0 {
            best = (val_loss, epoch + 1, dec.clone());
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
            log::info!("decoder early stop after epoch {epoch}");
            break;
        }
    }
    verify_encoder()?;
    let (val_loss, best_epoch, dec) = best;
    let report = DecoderReport {
        train_items: train.len(),
        val_items: val.len(),
        unpaired_items: unpaired.len(),
        epochs_run,
        best_epoch,
        val_loss,
        encoder_fingerprint: fingerprint,
        records: log.records,
    };
    Ok((dec, report))
}

/// Reconstructs the stimulus for every paired item's response.
pub fn reconstruct_all(dec: &Decoder, items: &[PairedExample]) -> Result<Vec<RgbdSample>> {
    items.iter().map(|p| dec.decode(&p.response)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encdec::DecoderConfig;
    use crate::nn::{seeded_rng, Layer, NetworkBuilder};
    use crate::perceptual::ExtractorConfig;
    use crate::types::FmriVector;
    use ndarray::Array3;
    use std::cell::Cell;

    const RES: usize = 16;

    fn extractor(ch: usize) -> FeatureExtractor {
        FeatureExtractor::new(
            ch,
            ExtractorConfig {
                widths: vec![4, 6],
                convs_per_block: 1,
                ..Default::default()
            },
            5,
        )
        .unwrap()
    }

    fn stimulus(mode: ChannelMode, k: usize) -> RgbdSample {
        let c = mode.channels();
        RgbdSample::new(
            mode,
            Array3::from_shape_fn((c, RES, RES), |(ch, y, x)| {
                0.1 + 0.8 * (((x / 4 + y / 4 + k + ch) % 3) as f32 / 2.0)
            }),
        )
        .unwrap()
    }

    /// Encoder that reads pooled 2x2 means of each channel.
    struct PoolEncoder {
        channels: usize,
        calls: Cell<usize>,
        mutate: bool,
    }

    impl StimulusEncoder for PoolEncoder {
        fn in_channels(&self) -> usize {
            self.channels
        }

        fn encode_batch(&self, x: &Array4<f64>) -> Result<Array2<f64>> {
            self.calls.set(self.calls.get() + 1);
            let p = crate::nn::kernels::adaptive_avg_pool_forward(x, 2);
            let n = p.dim().0;
            Ok(p.into_shape_with_order((n, self.channels * 4)).unwrap())
        }

        fn fingerprint(&self) -> String {
            if self.mutate {
                self.calls.get().to_string()
            } else {
                "pool".into()
            }
        }
    }

    fn pool(channels: usize) -> PoolEncoder {
        PoolEncoder {
            channels,
            calls: Cell::new(0),
            mutate: false,
        }
    }

    fn paired(enc: &PoolEncoder, mode: ChannelMode, n: usize) -> Vec<PairedExample> {
        (0..n)
            .map(|k| {
                let s = stimulus(mode, k);
                let r = enc.encode_batch(&s.to_tensor().insert_axis(Axis(0))).unwrap();
                PairedExample {
                    item_id: format!("p{k}"),
                    stimulus: s,
                    response: FmriVector::from_values(r.row(0).to_vec()).unwrap(),
                }
            })
            .collect()
    }

    fn config(mode: ChannelMode, epochs: usize) -> TrainConfig {
        TrainConfig {
            mode,
            decoder_epochs: epochs,
            paired_batch: 2,
            unpaired_batch: 2,
            patience: 0,
            decoder: DecoderConfig {
                lift_channels: 4,
                widths: vec![4, 4, 4, 4],
            },
            decoder_adam: crate::nn::AdamConfig {
                lr: 1e-2,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn supervised_only_loss_decreases_on_one_item() {
        let enc = pool(1);
        let data = paired(&enc, ChannelMode::DepthOnly, 1);
        let (_, report) = train_decoder_phase2(
            &data,
            &[],
            &enc,
            &extractor(1),
            &config(ChannelMode::DepthOnly, 40),
            &RunOutput::none(),
        )
        .unwrap();
        let first = report.records.first().unwrap().total;
        let last = report.records.last().unwrap().total;
        assert!(last < first, "{first} -> {last}");
        assert!(report.records.iter().all(|r| !r.terms.contains_key("cycle_l1")));
    }

    #[test]
    fn logged_total_decomposes_into_components() {
        let enc = pool(4);
        let data = paired(&enc, ChannelMode::Rgbd, 3);
        let unpaired: Vec<_> = (5..9)
            .map(|k| UnpairedExample {
                item_id: format!("u{k}"),
                stimulus: stimulus(ChannelMode::Rgbd, k),
            })
            .collect();
        let mut cfg = config(ChannelMode::Rgbd, 3);
        cfg.cycle_weight = 0.5;
        let (_, report) =
            train_decoder_phase2(&data, &unpaired, &enc, &extractor(4), &cfg, &RunOutput::none()).unwrap();
        for r in &report.records {
            let t = &r.terms;
            let dec = t["dec_l1"] + t["dec_perceptual"] + t["dec_tv"];
            let cyc = t["cycle_l1"] + t["cycle_perceptual"] + t["cycle_tv"];
            assert!((r.total - (dec + 0.5 * cyc)).abs() < 1e-5);
        }
        assert_eq!(report.unpaired_items, 4);
    }

    #[test]
    fn encoder_change_is_a_hard_failure() {
        let enc = PoolEncoder {
            mutate: true,
            ..pool(1)
        };
        let data = paired(&enc, ChannelMode::DepthOnly, 2);
        let res = train_decoder_phase2(
            &data,
            &[UnpairedExample {
                item_id: "u".into(),
                stimulus: stimulus(ChannelMode::DepthOnly, 3),
            }],
            &enc,
            &extractor(1),
            &config(ChannelMode::DepthOnly, 2),
            &RunOutput::none(),
        );
        assert!(matches!(res, Err(Error::EncoderMutated { .. })));
    }

    #[test]
    fn exact_inverse_decoder_has_zero_cycle_l1() {
        // encoder flattens the raster; decoder is the identity linear map back
        struct Flatten;
        impl StimulusEncoder for Flatten {
            fn in_channels(&self) -> usize {
                1
            }
            fn encode_batch(&self, x: &Array4<f64>) -> Result<Array2<f64>> {
                let n = x.dim().0;
                Ok(x.clone().into_shape_with_order((n, RES * RES)).unwrap())
            }
            fn fingerprint(&self) -> String {
                "flatten".into()
            }
        }
        let v = RES * RES;
        let mut net = NetworkBuilder::new(&mut seeded_rng(0))
            .linear(v, v, false)
            .layer(Layer::Reshape(1, RES, RES))
            .build();
        let eye: Vec<f64> = (0..v * v).map(|i| f64::from(u8::from(i / v == i % v))).collect();
        net.set_params(eye).unwrap();
        let dec = Decoder::from_network(ChannelMode::DepthOnly, v, RES, net).unwrap();
        let s = stack_samples([stimulus(ChannelMode::DepthOnly, 0), stimulus(ChannelMode::DepthOnly, 1)].iter());
        let t = cycle_loss(&Flatten, &dec, &extractor(1), &s, &ImageLossConfig::default()).unwrap();
        assert_eq!(t.l1, 0.0);
        assert!(t.perceptual.abs() < 1e-9);
    }

    fn estimator() -> DepthEstimator {
        DepthEstimator::new(2, 4)
    }

    #[test]
    fn identical_rgb_gives_zero_depth_term() {
        let est = estimator();
        let ext_d = extractor(1);
        let x = stack_samples([stimulus(ChannelMode::Rgb, 0), stimulus(ChannelMode::Rgb, 1)].iter());
        for kind in [DepthLossKind::L1, DepthLossKind::Perceptual] {
            let c = DepthConstraint {
                estimator: &est,
                kind,
                depth_extractor: Some(&ext_d),
            };
            let (t, _) = depth_constraint_term(&c, &x, &x, &ImageLossConfig::default(), None).unwrap();
            assert!(t.iter().all(|v| v.abs() < 1e-9), "{kind:?}: {t:?}");
        }
    }

    #[test]
    fn l1_depth_term_matches_hand_computation() {
        let est = estimator();
        let a = stack_samples([stimulus(ChannelMode::Rgb, 0)].iter());
        let b = stack_samples([stimulus(ChannelMode::Rgb, 2)].iter());
        let (da, db) = (est.predict_batch(&a).unwrap(), est.predict_batch(&b).unwrap());
        let mut expect = 0.0;
        for (x, y) in da.iter().zip(db.iter()) {
            expect += (x - y).abs();
        }
        expect /= da.len() as f64;
        let c = DepthConstraint {
            estimator: &est,
            kind: DepthLossKind::L1,
            depth_extractor: None,
        };
        let (t, _) = depth_constraint_term(&c, &a, &b, &ImageLossConfig::default(), None).unwrap();
        assert!((t[0] - expect).abs() < 1e-12);
        assert!(t[0] > 0.0);
    }

    #[test]
    fn constrained_variant_runs_and_logs_depth_terms() {
        let enc = pool(3);
        let data = paired(&enc, ChannelMode::Rgb, 2);
        let est = estimator();
        let ext_d = extractor(1);
        let c = DepthConstraint {
            estimator: &est,
            kind: DepthLossKind::Perceptual,
            depth_extractor: Some(&ext_d),
        };
        let (_, report) = train_rgb_only_with_depth_constraint(
            &data,
            &[],
            &enc,
            &extractor(3),
            c,
            &config(ChannelMode::Rgb, 2),
            &RunOutput::none(),
        )
        .unwrap();
        assert!(report.records.iter().all(|r| r.terms["dec_depth"] >= 0.0));
        let wrong = train_rgb_only_with_depth_constraint(
            &data,
            &[],
            &enc,
            &extractor(3),
            c,
            &config(ChannelMode::Rgbd, 2),
            &RunOutput::none(),
        );
        assert!(wrong.is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let enc = pool(1);
        let data = paired(&enc, ChannelMode::DepthOnly, 3);
        let run = || {
            train_decoder_phase2(
                &data,
                &[],
                &enc,
                &extractor(1),
                &config(ChannelMode::DepthOnly, 2),
                &RunOutput::none(),
            )
            .unwrap()
            .0
        };
        assert_eq!(run().network().param_hash(), run().network().param_hash());
    }
}
