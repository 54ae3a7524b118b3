//! Domain data model: stimulus rasters, voxel response vectors, paired and
//! unpaired examples, and region masks.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array3, Array4, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channel layout of a stimulus raster. Depth is always the last channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelMode {
    #[serde(rename = "d")]
    DepthOnly,
    Rgb,
    Rgbd,
}

impl ChannelMode {
    pub fn channels(self) -> usize {
        match self {
            ChannelMode::DepthOnly => 1,
            ChannelMode::Rgb => 3,
            ChannelMode::Rgbd => 4,
        }
    }

    pub fn has_depth(self) -> bool {
        !matches!(self, ChannelMode::Rgb)
    }

    pub fn has_color(self) -> bool {
        !matches!(self, ChannelMode::DepthOnly)
    }

    pub fn from_channels(c: usize) -> Option<Self> {
        match c {
            1 => Some(ChannelMode::DepthOnly),
            3 => Some(ChannelMode::Rgb),
            4 => Some(ChannelMode::Rgbd),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ChannelMode::DepthOnly => "d",
            ChannelMode::Rgb => "rgb",
            ChannelMode::Rgbd => "rgbd",
        }
    }
}

impl fmt::Display for ChannelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ChannelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "d" | "depth" | "depth-only" => Ok(ChannelMode::DepthOnly),
            "rgb" => Ok(ChannelMode::Rgb),
            "rgbd" => Ok(ChannelMode::Rgbd),
            other => Err(Error::Config(format!("unknown channel mode {other:?}"))),
        }
    }
}

/// A C x H x W stimulus raster with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct RgbdSample {
    mode: ChannelMode,
    raster: Array3<f32>,
}

impl RgbdSample {
    pub fn new(mode: ChannelMode, raster: Array3<f32>) -> Result<Self> {
        let c = raster.dim().0;
        if c != mode.channels() {
            return Err(Error::ChannelMismatch {
                expected: mode.channels(),
                actual: c,
            });
        }
        if let Some(bad) = raster.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Invalid(format!(
                "raster value {bad} outside [0, 1] or non-finite"
            )));
        }
        Ok(Self {
            mode,
            raster: raster.as_standard_layout().into_owned(),
        })
    }

    /// Builds from an `f64` tensor, clamping into [0, 1]. Non-finite values
    /// are rejected.
    pub fn from_tensor(mode: ChannelMode, t: ArrayView3<f64>) -> Result<Self> {
        if t.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite raster value".into()));
        }
        Self::new(mode, t.mapv(|v| v.clamp(0.0, 1.0) as f32))
    }

    pub fn zeros(mode: ChannelMode, height: usize, width: usize) -> Self {
        Self {
            mode,
            raster: Array3::zeros((mode.channels(), height, width)),
        }
    }

    pub fn mode(&self) -> ChannelMode {
        self.mode
    }

    pub fn channels(&self) -> usize {
        self.mode.channels()
    }

    pub fn resolution(&self) -> (usize, usize) {
        let (_, h, w) = self.raster.dim();
        (h, w)
    }

    pub fn raster(&self) -> &Array3<f32> {
        &self.raster
    }

    pub fn to_tensor(&self) -> Array3<f64> {
        self.raster.mapv(f64::from)
    }

    /// Converts to another channel layout. Only narrowing conversions are
    /// possible (RGBD to D or RGB).
    pub fn to_mode(&self, target: ChannelMode) -> Result<Self> {
        if target == self.mode {
            return Ok(self.clone());
        }
        let raster = match (self.mode, target) {
            (ChannelMode::Rgbd, ChannelMode::DepthOnly) => self.raster.slice(s![3..4, .., ..]).to_owned(),
            (ChannelMode::Rgbd, ChannelMode::Rgb) => self.raster.slice(s![0..3, .., ..]).to_owned(),
            _ => {
                return Err(Error::ChannelMismatch {
                    expected: target.channels(),
                    actual: self.channels(),
                })
            }
        };
        Ok(Self { mode: target, raster })
    }

    pub fn depth(&self) -> Result<Self> {
        self.to_mode(ChannelMode::DepthOnly)
    }

    /// Appends a depth map to an RGB sample.
    pub fn with_depth(&self, depth: &RgbdSample) -> Result<Self> {
        if self.mode != ChannelMode::Rgb || depth.mode != ChannelMode::DepthOnly {
            return Err(Error::Invalid("with_depth needs an RGB sample and a depth map".into()));
        }
        if self.resolution() != depth.resolution() {
            return Err(Error::Shape {
                expected: format!("{:?}", self.resolution()),
                actual: format!("{:?}", depth.resolution()),
            });
        }
        let raster =
            ndarray::concatenate(Axis(0), &[self.raster.view(), depth.raster.view()]).expect("matching spatial dims");
        Ok(Self {
            mode: ChannelMode::Rgbd,
            raster,
        })
    }
}

/// Stacks samples into an (n, c, h, w) `f64` batch.
pub fn stack_samples<'a, I>(samples: I) -> Array4<f64>
where
    I: IntoIterator<Item = &'a RgbdSample>,
{
    let views: Vec<_> = samples.into_iter().map(|s| s.raster.view()).collect();
    assert!(!views.is_empty(), "cannot stack an empty batch");
    let stacked = ndarray::stack(Axis(0), &views).expect("samples share a shape");
    stacked.mapv(f64::from)
}

/// Splits an (n, c, h, w) batch back into samples.
pub fn unstack_samples(batch: &Array4<f64>, mode: ChannelMode) -> Result<Vec<RgbdSample>> {
    batch
        .axis_iter(Axis(0))
        .map(|t| RgbdSample::from_tensor(mode, t))
        .collect()
}

/// A voxel activation vector with aligned voxel identifiers.
#[derive(Clone, Debug, PartialEq)]
pub struct FmriVector {
    values: Vec<f64>,
    voxel_ids: Vec<u32>,
}

impl FmriVector {
    pub fn new(values: Vec<f64>, voxel_ids: Vec<u32>) -> Result<Self> {
        if values.len() != voxel_ids.len() {
            return Err(Error::Shape {
                expected: format!("{} values", voxel_ids.len()),
                actual: format!("{} values", values.len()),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite voxel value".into()));
        }
        let mut seen = HashSet::with_capacity(voxel_ids.len());
        if let Some(dup) = voxel_ids.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::Invalid(format!("duplicate voxel id {dup}")));
        }
        Ok(Self { values, voxel_ids })
    }

    /// Vector with voxel ids `0..len`.
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        let ids = (0..values.len() as u32).collect();
        Self::new(values, ids)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn voxel_ids(&self) -> &[u32] {
        &self.voxel_ids
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Restricts to the given positions (in the given order).
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            values: indices.iter().map(|&i| self.values[i]).collect(),
            voxel_ids: indices.iter().map(|&i| self.voxel_ids[i]).collect(),
        }
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedExample {
    pub item_id: String,
    pub stimulus: RgbdSample,
    pub response: FmriVector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnpairedExample {
    pub item_id: String,
    pub stimulus: RgbdSample,
}

/// Cortical region label of a voxel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Region {
    V1,
    V2,
    V3,
    #[serde(rename = "LOC")]
    Loc,
    #[serde(rename = "FFA")]
    Ffa,
    #[serde(rename = "PPA")]
    Ppa,
    #[serde(rename = "OTHER")]
    Other,
}

impl Region {
    pub fn is_lvc(self) -> bool {
        matches!(self, Region::V1 | Region::V2 | Region::V3)
    }

    pub fn is_hvc(self) -> bool {
        matches!(self, Region::Loc | Region::Ffa | Region::Ppa)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Region::V1 => "V1",
            Region::V2 => "V2",
            Region::V3 => "V3",
            Region::Loc => "LOC",
            Region::Ffa => "FFA",
            Region::Ppa => "PPA",
            Region::Other => "OTHER",
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "V1" => Ok(Region::V1),
            "V2" => Ok(Region::V2),
            "V3" => Ok(Region::V3),
            "LOC" => Ok(Region::Loc),
            "FFA" => Ok(Region::Ffa),
            "PPA" => Ok(Region::Ppa),
            "OTHER" => Ok(Region::Other),
            other => Err(Error::Invalid(format!("unknown region {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum RegionSet {
    Lvc,
    Hvc,
    All,
}

impl RegionSet {
    pub fn contains(self, region: Region) -> bool {
        match self {
            RegionSet::Lvc => region.is_lvc(),
            RegionSet::Hvc => region.is_hvc(),
            RegionSet::All => true,
        }
    }
}

impl FromStr for RegionSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "LVC" => Ok(RegionSet::Lvc),
            "HVC" => Ok(RegionSet::Hvc),
            "ALL" => Ok(RegionSet::All),
            other => Err(Error::Invalid(format!("unknown region set {other:?}"))),
        }
    }
}

impl fmt::Display for RegionSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RegionSet::Lvc => "LVC",
            RegionSet::Hvc => "HVC",
            RegionSet::All => "ALL",
        })
    }
}

/// Region label for every voxel of a dataset.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct VoxelMask {
    labels: BTreeMap<u32, Region>,
}

impl VoxelMask {
    pub fn new<I: IntoIterator<Item = (u32, Region)>>(entries: I) -> Result<Self> {
        let mut labels = BTreeMap::new();
        for (id, region) in entries {
            if labels.insert(id, region).is_some() {
                return Err(Error::Invalid(format!("voxel {id} labeled twice")));
            }
        }
        Ok(Self { labels })
    }

    pub fn region(&self, voxel: u32) -> Option<Region> {
        self.labels.get(&voxel).copied()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, Region)> + '_ {
        self.labels.iter().map(|(k, v)| (*k, *v))
    }

    pub fn lvc(&self) -> Vec<u32> {
        self.select(RegionSet::Lvc)
    }

    pub fn hvc(&self) -> Vec<u32> {
        self.select(RegionSet::Hvc)
    }

    pub fn select(&self, set: RegionSet) -> Vec<u32> {
        self.labels
            .iter()
            .filter(|(_, r)| set.contains(**r))
            .map(|(k, _)| *k)
            .collect()
    }

    /// Checks the mask covers exactly the given voxel ids.
    pub fn validate_covers(&self, voxel_ids: &[u32]) -> Result<()> {
        let missing: Vec<String> = voxel_ids
            .iter()
            .filter(|id| !self.labels.contains_key(id))
            .map(|id| id.to_string())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Consistency {
                reason: "voxels without a region label".into(),
                items: missing,
            });
        }
        if self.labels.len() != voxel_ids.len() {
            return Err(Error::Consistency {
                reason: format!(
                    "mask labels {} voxels but dataset has {}",
                    self.labels.len(),
                    voxel_ids.len()
                ),
                items: vec![],
            });
        }
        Ok(())
    }

    /// Positions within `voxel_ids` whose region falls in `set`.
    pub fn positions(&self, voxel_ids: &[u32], set: RegionSet) -> Vec<usize> {
        voxel_ids
            .iter()
            .enumerate()
            .filter(|(_, id)| self.region(**id).is_some_and(|r| set.contains(r)))
            .map(|(i, _)| i)
            .collect()
    }
}
