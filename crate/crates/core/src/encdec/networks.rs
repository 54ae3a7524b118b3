use std::path::Path;

use ndarray::{Array2, Array4, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{seeded_rng, Checkpoint, Layer, Network, NetworkBuilder};
use crate::perceptual::FeatureExtractor;
use crate::types::{ChannelMode, FmriVector, RgbdSample};

pub const ENCODER_KIND: &str = "encoder";
pub const DECODER_KIND: &str = "decoder";

/// Maps a stimulus batch to predicted voxel responses `(n, V)`.
pub trait StimulusEncoder {
    fn in_channels(&self) -> usize;
    fn encode_batch(&self, x: &Array4<f64>) -> Result<Array2<f64>>;
    /// Digest of everything that determines the mapping.
    fn fingerprint(&self) -> String;
}

pub(crate) fn to_rows(y: Array4<f64>) -> Array2<f64> {
    let (n, v, h, w) = y.dim();
    y.into_shape_with_order((n, v * h * w)).expect("contiguous output")
}

pub(crate) fn to_columns(r: &Array2<f64>) -> Array4<f64> {
    let (n, v) = r.dim();
    r.as_standard_layout()
        .to_owned()
        .into_shape_with_order((n, v, 1, 1))
        .expect("contiguous input")
}

fn combined_hash(nets: &[&Network]) -> String {
    let mut h = Sha256::new();
    for net in nets {
        h.update(net.param_hash().as_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub backbone_blocks: usize,
    pub freeze_backbone: bool,
    /// Side of the adaptive pooling grid applied to backbone features.
    pub pool_grid: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            backbone_blocks: 3,
            freeze_backbone: true,
            pool_grid: 4,
        }
    }
}

/// Stimulus -> voxel network: pretrained backbone blocks followed by a
/// pooled linear readout.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    mode: ChannelMode,
    voxel_ids: Vec<u32>,
    cfg: EncoderConfig,
    backbone: Network,
    head: Network,
}

impl Encoder {
    pub fn new(
        ext: &FeatureExtractor,
        mode: ChannelMode,
        voxel_ids: Vec<u32>,
        cfg: EncoderConfig,
        seed: u64,
    ) -> Result<Self> {
        if ext.in_channels() != mode.channels() {
            return Err(Error::ChannelMismatch {
                expected: mode.channels(),
                actual: ext.in_channels(),
            });
        }
        if voxel_ids.is_empty() || cfg.pool_grid == 0 {
            return Err(Error::Config(
                "encoder needs at least one voxel and a positive pool grid".into(),
            ));
        }
        let backbone = ext.backbone(cfg.backbone_blocks)?;
        let c = ext.block_width(cfg.backbone_blocks - 1);
        let g = cfg.pool_grid;
        let mut rng = seeded_rng(seed);
        let head = NetworkBuilder::new(&mut rng)
            .layer(Layer::AdaptiveAvgPool(g))
            .layer(Layer::Flatten)
            .linear(c * g * g, voxel_ids.len(), true)
            .build();
        Ok(Self {
            mode,
            voxel_ids,
            cfg,
            backbone,
            head,
        })
    }

    pub fn mode(&self) -> ChannelMode {
        self.mode
    }

    pub fn voxels(&self) -> usize {
        self.voxel_ids.len()
    }

    pub fn voxel_ids(&self) -> &[u32] {
        &self.voxel_ids
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn backbone(&self) -> &Network {
        &self.backbone
    }

    pub fn head(&self) -> &Network {
        &self.head
    }

    pub fn backbone_mut(&mut self) -> &mut Network {
        &mut self.backbone
    }

    pub fn head_mut(&mut self) -> &mut Network {
        &mut self.head
    }

    fn check(&self, x: &Array4<f64>) -> Result<()> {
        if x.dim().1 != self.mode.channels() {
            return Err(Error::ChannelMismatch {
                expected: self.mode.channels(),
                actual: x.dim().1,
            });
        }
        Ok(())
    }

    /// Backbone activations, the input of the trainable head.
    pub fn features(&self, x: &Array4<f64>) -> Result<Array4<f64>> {
        self.check(x)?;
        Ok(self.backbone.forward(x))
    }

    pub fn head_forward(&self, features: &Array4<f64>) -> Array2<f64> {
        to_rows(self.head.forward(features))
    }

    pub fn encode(&self, s: &RgbdSample) -> Result<FmriVector> {
        let r = self.encode_batch(&s.to_tensor().insert_axis(Axis(0)))?;
        FmriVector::new(r.row(0).to_vec(), self.voxel_ids.clone())
    }

    /// SHA-256 over backbone and head parameters.
    pub fn param_hash(&self) -> String {
        combined_hash(&[&self.backbone, &self.head])
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(ENCODER_KIND);
        c.set("channel_mode", self.mode);
        c.set("backbone_blocks", self.cfg.backbone_blocks);
        c.set("freeze_backbone", self.cfg.freeze_backbone);
        c.set("pool_grid", self.cfg.pool_grid);
        c.set("voxels", self.voxel_ids.len());
        c.set("param_hash", self.param_hash());
        c.add_network("backbone", &self.backbone);
        c.add_network("head", &self.head);
        c.add_blob(
            "voxel_ids",
            &self.voxel_ids.iter().map(|&v| f64::from(v)).collect::<Vec<_>>(),
        );
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind(ENCODER_KIND)?;
        let ids = c
            .blob("voxel_ids")
            .ok_or_else(|| Error::Config("encoder checkpoint lacks voxel ids".into()))?
            .iter()
            .map(|&v| v as u32)
            .collect();
        let enc = Self {
            mode: c.parse("channel_mode")?,
            voxel_ids: ids,
            cfg: EncoderConfig {
                backbone_blocks: c.parse("backbone_blocks")?,
                freeze_backbone: c.parse("freeze_backbone")?,
                pool_grid: c.parse("pool_grid")?,
            },
            backbone: c.network("backbone")?,
            head: c.network("head")?,
        };
        if c.get("param_hash") != Some(enc.param_hash().as_str()) {
            return Err(Error::Config(
                "encoder checkpoint parameters do not match their recorded hash".into(),
            ));
        }
        Ok(enc)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.to_checkpoint().save(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(dir)?)
    }
}

impl StimulusEncoder for Encoder {
    fn in_channels(&self) -> usize {
        self.mode.channels()
    }

    fn encode_batch(&self, x: &Array4<f64>) -> Result<Array2<f64>> {
        Ok(self.head_forward(&self.features(x)?))
    }

    fn fingerprint(&self) -> String {
        self.param_hash()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    /// Channels of the lifted coarse grid (resolution / 16 per side).
    pub lift_channels: usize,
    /// Output channels of the four upsampling stages.
    pub widths: Vec<usize>,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            lift_channels: 64,
            widths: vec![64, 32, 16, 8],
        }
    }
}

/// Voxel -> stimulus network: linear lift to a coarse grid, four
/// nearest-neighbor upsample + conv stages and a sigmoid output.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    mode: ChannelMode,
    voxels: usize,
    resolution: usize,
    net: Network,
}

impl Decoder {
    pub fn new(mode: ChannelMode, voxels: usize, resolution: usize, cfg: &DecoderConfig, seed: u64) -> Result<Self> {
        if resolution == 0 || !resolution.is_multiple_of(16) {
            return Err(Error::Config(format!(
                "decoder resolution must be a positive multiple of 16, got {resolution}"
            )));
        }
        if cfg.widths.len() != 4 || cfg.widths.contains(&0) || cfg.lift_channels == 0 || voxels == 0 {
            return Err(Error::Config(
                "decoder needs 4 positive stage widths, lift channels and voxels".into(),
            ));
        }
        let g = resolution / 16;
        let mut rng = seeded_rng(seed);
        let mut b = NetworkBuilder::new(&mut rng)
            .linear(voxels, cfg.lift_channels * g * g, true)
            .layer(Layer::Reshape(cfg.lift_channels, g, g))
            .layer(Layer::Elu);
        let mut cin = cfg.lift_channels;
        for &w in &cfg.widths {
            b = b.layer(Layer::Upsample2).conv(cin, w, true).layer(Layer::Elu);
            cin = w;
        }
        let net = b.conv(cin, mode.channels(), true).layer(Layer::Sigmoid).build();
        Ok(Self {
            mode,
            voxels,
            resolution,
            net,
        })
    }

    /// Wraps an arbitrary network mapping `(n, voxels, 1, 1)` to
    /// `(n, channels, resolution, resolution)`.
    pub fn from_network(mode: ChannelMode, voxels: usize, resolution: usize, net: Network) -> Result<Self> {
        let probe = net.forward(&Array4::zeros((1, voxels, 1, 1)));
        if probe.dim() != (1, mode.channels(), resolution, resolution) {
            return Err(Error::Shape {
                expected: format!("(1, {}, {resolution}, {resolution})", mode.channels()),
                actual: format!("{:?}", probe.dim()),
            });
        }
        Ok(Self {
            mode,
            voxels,
            resolution,
            net,
        })
    }

    pub fn mode(&self) -> ChannelMode {
        self.mode
    }

    pub fn voxels(&self) -> usize {
        self.voxels
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    pub(crate) fn check(&self, r: &Array2<f64>) -> Result<()> {
        if r.dim().1 != self.voxels {
            return Err(Error::Shape {
                expected: format!("{} voxels", self.voxels),
                actual: format!("{} voxels", r.dim().1),
            });
        }
        Ok(())
    }

    pub fn decode_batch(&self, r: &Array2<f64>) -> Result<Array4<f64>> {
        self.check(r)?;
        Ok(self.net.forward(&to_columns(r)))
    }

    pub fn decode(&self, r: &FmriVector) -> Result<RgbdSample> {
        let rows = Array2::from_shape_vec((1, r.len()), r.values().to_vec()).expect("row vector");
        let y = self.decode_batch(&rows)?;
        RgbdSample::from_tensor(self.mode, y.index_axis(Axis(0), 0))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(DECODER_KIND);
        c.set("channel_mode", self.mode);
        c.set("voxels", self.voxels);
        c.set("resolution", self.resolution);
        c.add_network("net", &self.net);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind(DECODER_KIND)?;
        Ok(Self {
            mode: c.parse("channel_mode")?,
            voxels: c.parse("voxels")?,
            resolution: c.parse("resolution")?,
            net: c.network("net")?,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.to_checkpoint().save(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(dir)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perceptual::ExtractorConfig;
    use proptest::prelude::*;

    fn encoder() -> Encoder {
        let ext = FeatureExtractor::new(4, ExtractorConfig::default(), 1).unwrap();
        Encoder::new(&ext, ChannelMode::Rgbd, (0..20).collect(), EncoderConfig::default(), 2).unwrap()
    }

    #[test]
    fn encode_is_deterministic() {
        let enc = encoder();
        let s = RgbdSample::new(
            ChannelMode::Rgbd,
            ndarray::Array3::from_shape_fn((4, 32, 32), |(c, y, x)| ((c + y * x) % 9) as f32 / 8.0),
        )
        .unwrap();
        let a = enc.encode(&s).unwrap();
        assert_eq!(a, enc.encode(&s).unwrap());
        assert_eq!(a.len(), 20);
    }

    #[test]
    fn encoder_rejects_wrong_mode() {
        let enc = encoder();
        assert!(enc.encode(&RgbdSample::zeros(ChannelMode::DepthOnly, 32, 32)).is_err());
    }

    #[test]
    fn checkpoints_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let enc = encoder();
        enc.save(&dir.path().join("enc")).unwrap();
        assert_eq!(Encoder::load(&dir.path().join("enc")).unwrap(), enc);
        let dec = Decoder::new(ChannelMode::DepthOnly, 20, 32, &DecoderConfig::default(), 3).unwrap();
        dec.save(&dir.path().join("dec")).unwrap();
        assert_eq!(Decoder::load(&dir.path().join("dec")).unwrap(), dec);
    }

    #[test]
    fn decoder_shape_follows_mode() {
        let dec = Decoder::new(ChannelMode::Rgb, 5, 32, &DecoderConfig::default(), 0).unwrap();
        let out = dec.decode(&FmriVector::from_values(vec![0.1; 5]).unwrap()).unwrap();
        assert_eq!((out.channels(), out.resolution()), (3, (32, 32)));
        assert!(Decoder::new(ChannelMode::Rgb, 5, 40, &DecoderConfig::default(), 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn decoder_output_is_bounded(values in proptest::collection::vec(-100.0f64..100.0, 6), seed in 0u64..50) {
            let dec = Decoder::new(ChannelMode::Rgbd, 6, 16, &DecoderConfig::default(), seed).unwrap();
            let rows = Array2::from_shape_vec((1, 6), values).unwrap();
            let y = dec.decode_batch(&rows).unwrap();
            prop_assert!(y.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
