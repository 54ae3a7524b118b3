//! End-to-end runs: response normalization, Phase I, Phase II and depth
//! rank evaluation on the held-out test set.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{normalize_fmri, Dataset, FmriStats};
use crate::depth::DepthEstimator;
use crate::encdec::{Decoder, Encoder};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_testset, indirect_depth_eval, EvalConfig, EvalReport, MetricMode};
use crate::perceptual::FeatureExtractor;
use crate::training::{
    train_decoder_phase2, train_encoder_phase1, train_rgb_only_with_depth_constraint, DecoderReport, DepthConstraint,
    DepthLossKind, EncoderReport, RunOutput, TrainConfig,
};
use crate::types::ChannelMode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Train with the unpaired cycle loss; false gives the supervised-only arm.
    pub use_unpaired: bool,
    pub normalize_fmri: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            use_unpaired: true,
            normalize_fmri: true,
        }
    }
}

/// Pretrained components a run needs.
#[derive(Clone, Copy)]
pub struct PipelineInputs<'a> {
    /// Extractor matching the training stimulus mode.
    pub extractor: &'a FeatureExtractor,
    /// Single-channel extractor used to rank depth.
    pub depth_metric: &'a FeatureExtractor,
    /// Needed for RGB runs, whose depth is estimated from reconstructions.
    pub estimator: Option<&'a DepthEstimator>,
    /// Adds the estimated-depth term to an RGB decoder's loss.
    pub depth_loss: Option<DepthLossKind>,
}

pub struct PipelineRun {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub encoder_report: EncoderReport,
    pub decoder_report: DecoderReport,
    pub eval: EvalReport,
    pub fmri_stats: Option<FmriStats>,
}

/// Z-scores responses with train statistics. Skipped for fewer than two
/// train items, where every voxel would collapse to zero.
pub fn normalized_responses(ds: &Dataset, enabled: bool) -> Result<(Dataset, Option<FmriStats>)> {
    let mut ds = ds.clone();
    if !enabled || ds.paired_train.len() < 2 {
        return Ok((ds, None));
    }
    let stats = normalize_fmri(&mut ds.paired_train, &mut [&mut ds.paired_test])?;
    Ok((ds, Some(stats)))
}

/// Trains encoder and decoder on `ds` (narrowed to `cfg.train.mode`) and
/// evaluates depth ranks of the test set against the unpaired pool.
/// `ds` must keep the depth channel for evaluation.
pub fn run_pipeline(
    ds: &Dataset,
    inputs: PipelineInputs<'_>,
    cfg: &PipelineConfig,
    out: Option<&Path>,
) -> Result<PipelineRun> {
    if !ds.mode.has_depth() {
        return Err(Error::Config("pipeline evaluation needs a dataset with depth".into()));
    }
    let mode = cfg.train.mode;
    let (full, fmri_stats) = normalized_responses(ds, cfg.normalize_fmri)?;
    let train_ds = full.with_mode(mode)?;
    let sub = |name: &str| RunOutput {
        dir: out.map(|d| d.join(name)),
    };
    let (encoder, encoder_report) =
        train_encoder_phase1(&train_ds.paired_train, inputs.extractor, &cfg.train, &sub("encoder"))?;
    let unpaired = if cfg.use_unpaired { &train_ds.unpaired[..] } else { &[] };
    let (decoder, decoder_report) = match (mode, inputs.depth_loss) {
        (ChannelMode::Rgb, Some(kind)) => {
            let estimator = inputs
                .estimator
                .ok_or_else(|| Error::Config("depth-constrained runs need a depth estimator".into()))?;
            let constraint = DepthConstraint {
                estimator,
                kind,
                depth_extractor: Some(inputs.depth_metric),
            };
            train_rgb_only_with_depth_constraint(
                &train_ds.paired_train,
                unpaired,
                &encoder,
                inputs.extractor,
                constraint,
                &cfg.train,
                &sub("decoder"),
            )?
        }
        (_, Some(_)) => return Err(Error::Config("a depth loss applies to rgb runs only".into())),
        _ => train_decoder_phase2(
            &train_ds.paired_train,
            unpaired,
            &encoder,
            inputs.extractor,
            &cfg.train,
            &sub("decoder"),
        )?,
    };
    let eval = if mode.has_depth() {
        evaluate_testset(
            &decoder,
            &full.paired_test,
            &full.unpaired,
            inputs.depth_metric,
            MetricMode::Depth,
            &cfg.eval,
        )?
    } else {
        let estimator = inputs
            .estimator
            .ok_or_else(|| Error::Config("rgb runs need a depth estimator for depth evaluation".into()))?;
        indirect_depth_eval(
            &decoder,
            estimator,
            &full.paired_test,
            &full.unpaired,
            inputs.depth_metric,
            &cfg.eval,
        )?
    };
    Ok(PipelineRun {
        encoder,
        decoder,
        encoder_report,
        decoder_report,
        eval,
        fmri_stats,
    })
}
