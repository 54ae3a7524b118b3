//! Two-phase training: supervised encoder fitting, then decoder training on
//! paired responses plus encoder-decoder cycles over unpaired stimuli.

mod decoder;
mod encoder;

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::encdec::{DecoderConfig, EncoderConfig, EncoderLossConfig, ImageLossConfig};
use crate::error::{Error, Result};
use crate::nn::AdamConfig;
use crate::types::ChannelMode;

pub use decoder::{
    cycle_loss, depth_constraint_term, reconstruct_all, train_decoder_phase2, train_rgb_only_with_depth_constraint,
    DecoderReport, DepthConstraint, DepthLossKind,
};
pub use encoder::{train_encoder_phase1, EncoderReport};

pub const PROGRESS_FILE: &str = "progress.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub mode: ChannelMode,
    pub paired_batch: usize,
    pub unpaired_batch: usize,
    pub encoder_epochs: usize,
    pub decoder_epochs: usize,
    pub encoder_adam: AdamConfig,
    pub decoder_adam: AdamConfig,
    pub encoder_loss: EncoderLossConfig,
    pub image_loss: ImageLossConfig,
    /// Weight of the unpaired cycle loss relative to the paired loss.
    pub cycle_weight: f64,
    /// Weight of the estimated-depth term in the RGB-constrained variant.
    pub depth_weight: f64,
    pub val_fraction: f64,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub checkpoint_every: usize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            mode: ChannelMode::Rgbd,
            paired_batch: 16,
            unpaired_batch: 16,
            encoder_epochs: 100,
            decoder_epochs: 60,
            encoder_adam: AdamConfig::default(),
            decoder_adam: AdamConfig::default(),
            encoder_loss: EncoderLossConfig::default(),
            image_loss: ImageLossConfig::default(),
            cycle_weight: 1.0,
            depth_weight: 1.0,
            val_fraction: 0.1,
            patience: 10,
            checkpoint_every: 10,
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.paired_batch == 0 || self.unpaired_batch == 0 {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        if self.encoder_epochs == 0 || self.decoder_epochs == 0 {
            return Err(Error::Config("epochs per phase must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "val_fraction must be in [0, 1), got {}",
                self.val_fraction
            )));
        }
        if !(self.cycle_weight >= 0.0 && self.depth_weight >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        self.encoder_loss.validate()
    }
}

/// One line of `progress.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProgressRecord {
    pub phase: String,
    pub epoch: usize,
    pub step: usize,
    /// Mean training loss of the epoch.
    pub total: f64,
    /// Mean of every logged component over the epoch.
    pub terms: BTreeMap<String, f64>,
    pub val_loss: f64,
    pub lr: f64,
    pub wall_s: f64,
}

/// Where a training run persists progress and periodic checkpoints.
#[derive(Clone, Debug, Default)]
pub struct RunOutput {
    pub dir: Option<PathBuf>,
}

impl RunOutput {
    pub fn none() -> Self {
        Self { dir: None }
    }

    pub fn at(dir: impl Into<PathBuf>) -> Self {
        Self { dir: Some(dir.into()) }
    }

    pub(crate) fn checkpoint_dir(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(CHECKPOINT_DIR))
    }
}

pub(crate) struct ProgressLog {
    phase: &'static str,
    start: Instant,
    sink: Option<BufWriter<File>>,
    pub records: Vec<ProgressRecord>,
}

impl ProgressLog {
    pub fn open(phase: &'static str, out: &RunOutput) -> Result<Self> {
        let sink = match &out.dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join(PROGRESS_FILE);
                let f = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                Some(BufWriter::new(f))
            }
            None => None,
        };
        Ok(Self {
            phase,
            start: Instant::now(),
            sink,
            records: Vec::new(),
        })
    }

    pub fn push(
        &mut self,
        epoch: usize,
        step: usize,
        total: f64,
        terms: BTreeMap<String, f64>,
        val_loss: f64,
        lr: f64,
    ) -> Result<()> {
        let rec = ProgressRecord {
            phase: self.phase.to_string(),
            epoch,
            step,
            total,
            terms,
            val_loss,
            lr,
            wall_s: self.start.elapsed().as_secs_f64(),
        };
        log::info!("{} epoch {epoch}: train {total:.5} val {val_loss:.5}", self.phase);
        if let Some(w) = self.sink.as_mut() {
            let line = serde_json::to_string(&rec).map_err(|e| Error::Invalid(e.to_string()))?;
            writeln!(w, "{line}")
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(PROGRESS_FILE, e))?;
        }
        self.records.push(rec);
        Ok(())
    }
}

/// Running per-epoch means of named loss terms.
#[derive(Default)]
pub(crate) struct TermAccumulator {
    sums: BTreeMap<String, f64>,
    count: usize,
}

impl TermAccumulator {
    pub fn add(&mut self, terms: &[(&str, f64)]) {
        for (k, v) in terms {
            *self.sums.entry((*k).to_string()).or_default() += v;
        }
        self.count += 1;
    }

    pub fn means(&self) -> BTreeMap<String, f64> {
        let n = self.count.max(1) as f64;
        self.sums.iter().map(|(k, v)| (k.clone(), v / n)).collect()
    }
}

pub(crate) fn ensure_finite(step: usize, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            step,
            detail: format!("{what} = {v}"),
        })
    }
}

pub(crate) fn ensure_finite_grad(step: usize, grad: &[f64]) -> Result<()> {
    if grad.iter().all(|g| g.is_finite()) {
        Ok(())
    } else {
        Err(Error::Diverged {
            step,
            detail: "non-finite gradient".into(),
        })
    }
}

pub(crate) fn ensure_unit(step: usize, name: &str, v: f64) -> Result<()> {
    if (-1e-9..=1.0 + 1e-9).contains(&v) {
        Ok(())
    } else {
        Err(Error::Invalid(format!(
            "loss term {name} = {v} left [0, 1] at step {step}"
        )))
    }
}

pub(crate) fn mode_matches(expected: ChannelMode, actual: usize, what: &str) -> Result<()> {
    if expected.channels() != actual {
        return Err(Error::Config(format!(
            "{what} has {actual} channels but the run uses {expected} stimuli"
        )));
    }
    Ok(())
}

pub(crate) fn write_checkpoint(dir: &Path, save: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    save(dir)
}
