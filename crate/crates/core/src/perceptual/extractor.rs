use std::path::Path;

use ndarray::{Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{seeded_rng, Checkpoint, Layer, Network, NetworkBuilder};
use crate::types::RgbdSample;

pub const CHECKPOINT_KIND: &str = "feature-extractor";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractorConfig {
    /// Output channels per block; the block count is the list length.
    pub widths: Vec<usize>,
    pub convs_per_block: usize,
    pub bias: bool,
    pub classes: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 64, 128, 128],
            convs_per_block: 2,
            bias: true,
            classes: 4,
        }
    }
}

/// Convolutional recognition network. Block `b` is `avgpool2` followed by
/// `convs_per_block` x (`conv3x3 -> elu`), so its output has `input / 2^b`
/// spatial size (floor); features are tapped after the last ELU.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    in_channels: usize,
    cfg: ExtractorConfig,
    net: Network,
    taps: Vec<usize>,
}

/// Per-block feature maps of one input.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Array3<f64>>,
}

impl FeaturePyramid {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

impl FeatureExtractor {
    pub fn new(in_channels: usize, cfg: ExtractorConfig, seed: u64) -> Result<Self> {
        if !matches!(in_channels, 1 | 3 | 4) {
            return Err(Error::Config(format!(
                "extractor input channels must be 1, 3 or 4, got {in_channels}"
            )));
        }
        if cfg.widths.is_empty() || cfg.widths.contains(&0) || cfg.convs_per_block == 0 || cfg.classes < 2 {
            return Err(Error::Config(
                "extractor needs positive block widths and at least 2 classes".into(),
            ));
        }
        let mut rng = seeded_rng(seed);
        let mut b = NetworkBuilder::new(&mut rng);
        let mut taps = Vec::with_capacity(cfg.widths.len());
        let mut cin = in_channels;
        for &w in &cfg.widths {
            b = b.layer(Layer::AvgPool2);
            for _ in 0..cfg.convs_per_block {
                b = b.conv(cin, w, cfg.bias).layer(Layer::Elu);
                cin = w;
            }
            taps.push(b.len() - 1);
        }
        let net = b
            .layer(Layer::AdaptiveAvgPool(1))
            .layer(Layer::Flatten)
            .linear(cin, cfg.classes, true)
            .build();
        Ok(Self {
            in_channels,
            cfg,
            net,
            taps,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.cfg
    }

    pub fn blocks(&self) -> usize {
        self.taps.len()
    }

    /// Layer indices whose outputs are the block features.
    pub fn taps(&self) -> &[usize] {
        &self.taps
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub(crate) fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    /// Number of layers covering the first `blocks` blocks.
    pub fn block_layers(&self, blocks: usize) -> usize {
        self.taps[blocks - 1] + 1
    }

    /// Channel width of block `b` (0-based).
    pub fn block_width(&self, b: usize) -> usize {
        self.cfg.widths[b]
    }

    /// Standalone copy of the first `blocks` blocks.
    pub fn backbone(&self, blocks: usize) -> Result<Network> {
        if blocks == 0 || blocks > self.blocks() {
            return Err(Error::Config(format!(
                "backbone must use 1..={} blocks, got {blocks}",
                self.blocks()
            )));
        }
        Ok(self.net.prefix(self.block_layers(blocks)))
    }

    pub(crate) fn check_channels(&self, c: usize) -> Result<()> {
        if c != self.in_channels {
            return Err(Error::ChannelMismatch {
                expected: self.in_channels,
                actual: c,
            });
        }
        Ok(())
    }

    /// Block features for a batch `(n, c, h, w)`.
    pub fn features_batch(&self, x: &Array4<f64>) -> Result<Vec<Array4<f64>>> {
        self.check_channels(x.dim().1)?;
        let min_side = 1usize << self.blocks();
        if x.dim().2 < min_side || x.dim().3 < min_side {
            return Err(Error::Shape {
                expected: format!("spatial size at least {min_side}"),
                actual: format!("{}x{}", x.dim().2, x.dim().3),
            });
        }
        let tape = self.net.forward_tape_range(x, self.block_layers(self.blocks()));
        Ok(self.taps.iter().map(|&t| tape.layer_output(t).clone()).collect())
    }

    pub fn extract_features(&self, x: &RgbdSample) -> Result<FeaturePyramid> {
        let batch = x.to_tensor().insert_axis(Axis(0));
        let levels = self
            .features_batch(&batch)?
            .into_iter()
            .map(|f| f.index_axis_move(Axis(0), 0))
            .collect();
        Ok(FeaturePyramid { levels })
    }

    /// Class logits `(n, classes)` for a batch.
    pub fn logits(&self, x: &Array4<f64>) -> Result<ndarray::Array2<f64>> {
        self.check_channels(x.dim().1)?;
        let out = self.net.forward(x);
        let (n, k, _, _) = out.dim();
        Ok(out.into_shape_with_order((n, k)).expect("flat logits"))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(CHECKPOINT_KIND);
        c.set("in_channels", self.in_channels);
        c.set(
            "widths",
            self.cfg
                .widths
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(","),
        );
        c.set("convs_per_block", self.cfg.convs_per_block);
        c.set("bias", self.cfg.bias);
        c.set("classes", self.cfg.classes);
        c.set("architecture_hash", self.net.architecture_hash());
        c.add_blob("params", self.net.params());
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind(CHECKPOINT_KIND)?;
        let widths = c
            .get("widths")
            .unwrap_or("")
            .split(',')
            .map(|w| w.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Config("extractor checkpoint has malformed widths".into()))?;
        let cfg = ExtractorConfig {
            widths,
            convs_per_block: c.parse("convs_per_block")?,
            bias: c.parse("bias")?,
            classes: c.parse("classes")?,
        };
        let mut ext = Self::new(c.parse("in_channels")?, cfg, 0)?;
        if c.get("architecture_hash") != Some(ext.net.architecture_hash().as_str()) {
            return Err(Error::Config("extractor architecture hash mismatch".into()));
        }
        let params = c
            .blob("params")
            .ok_or_else(|| Error::Config("extractor checkpoint lacks params".into()))?;
        ext.net.set_params(params.to_vec())?;
        Ok(ext)
    }

    pub fn save(&self, dir: &Path, extra: &[(&str, String)]) -> Result<()> {
        let mut c = self.to_checkpoint();
        for (k, v) in extra {
            c.set(k, v);
        }
        c.save(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(dir)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ChannelMode;

    #[test]
    fn block_sizes_halve_with_floor() {
        let ext = FeatureExtractor::new(1, ExtractorConfig::default(), 0).unwrap();
        let s = RgbdSample::zeros(ChannelMode::DepthOnly, 112, 112);
        let p = ext.extract_features(&s).unwrap();
        let sizes: Vec<(usize, usize, usize)> = p.levels.iter().map(|l| l.dim()).collect();
        assert_eq!(
            sizes,
            vec![(16, 56, 56), (32, 28, 28), (64, 14, 14), (128, 7, 7), (128, 3, 3)]
        );
    }

    #[test]
    fn zero_input_without_bias_gives_zero_features() {
        let cfg = ExtractorConfig {
            bias: false,
            ..Default::default()
        };
        let ext = FeatureExtractor::new(4, cfg, 3).unwrap();
        let p = ext
            .extract_features(&RgbdSample::zeros(ChannelMode::Rgbd, 32, 32))
            .unwrap();
        assert!(p.levels.iter().all(|l| l.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn extraction_is_deterministic() {
        let ext = FeatureExtractor::new(4, ExtractorConfig::default(), 3).unwrap();
        let raster = Array3::from_shape_fn((4, 32, 32), |(c, y, x)| ((c * 7 + y * 3 + x) % 11) as f32 / 10.0);
        let s = RgbdSample::new(ChannelMode::Rgbd, raster).unwrap();
        assert_eq!(ext.extract_features(&s).unwrap(), ext.extract_features(&s).unwrap());
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let ext = FeatureExtractor::new(1, ExtractorConfig::default(), 0).unwrap();
        let s = RgbdSample::zeros(ChannelMode::Rgbd, 32, 32);
        assert!(matches!(
            ext.extract_features(&s),
            Err(Error::ChannelMismatch { expected: 1, actual: 4 })
        ));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ext = FeatureExtractor::new(3, ExtractorConfig::default(), 5).unwrap();
        ext.save(dir.path(), &[("val_accuracy", "0.9".into())]).unwrap();
        let back = FeatureExtractor::load(dir.path()).unwrap();
        assert_eq!(back.network(), ext.network());
    }
}
