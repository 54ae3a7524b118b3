//! Voxel depth sensitivity (response change under depth-channel zeroing
//! relative to the mean change under color-channel zeroing), agreement
//! between sensitivity maps, and region-restricted pipeline comparisons.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{s, Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::encdec::StimulusEncoder;
use crate::error::{Error, Result};
use crate::evaluation::RankResult;
use crate::pipeline::{run_pipeline, PipelineConfig, PipelineInputs};
use crate::types::{stack_samples, Region, RegionSet, RgbdSample, VoxelMask};

pub const VDSI_EPS: f64 = 1e-8;
pub const VDSI_CLIP: f64 = 1e6;

/// Value written into a zeroed channel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelFill {
    #[default]
    Zero,
    /// Per-channel mean over the analyzed samples.
    DatasetMean,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VdsiConfig {
    pub fill: ChannelFill,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VdsiEntry {
    pub voxel_id: u32,
    pub vdsi: f64,
    pub region: Option<Region>,
    /// The color denominator vanished and the value was clipped.
    pub clipped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VdsiReport {
    pub samples: usize,
    pub fill: ChannelFill,
    /// Every voxel's color denominator vanished.
    pub degenerate: bool,
    pub entries: Vec<VdsiEntry>,
}

impl VdsiReport {
    pub fn values(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.vdsi).collect()
    }

    pub fn with_regions(mut self, mask: &VoxelMask) -> Self {
        for e in &mut self.entries {
            e.region = mask.region(e.voxel_id);
        }
        self
    }

    /// Median over the given voxel ids.
    pub fn median_of(&self, ids: &[u32]) -> Option<f64> {
        let wanted: std::collections::HashSet<u32> = ids.iter().copied().collect();
        let mut v: Vec<f64> = self
            .entries
            .iter()
            .filter(|e| wanted.contains(&e.voxel_id))
            .map(|e| e.vdsi)
            .collect();
        median(&mut v)
    }
}

pub fn median(v: &mut [f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len().is_multiple_of(2) {
        (v[m - 1] + v[m]) / 2.0
    } else {
        v[m]
    })
}

fn encode_chunked(enc: &dyn StimulusEncoder, x: &Array4<f64>) -> Result<Array2<f64>> {
    let n = x.dim().0;
    let mut rows = Vec::with_capacity(n);
    for start in (0..n).step_by(64) {
        let end = (start + 64).min(n);
        rows.push(enc.encode_batch(&x.slice(s![start..end, .., .., ..]).to_owned())?);
    }
    let views: Vec<_> = rows.iter().map(|a| a.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::Invalid(e.to_string()))
}

/// Per-voxel sensitivity of a 4-channel encoder over `samples`.
pub fn compute_vdsi(
    enc: &dyn StimulusEncoder,
    voxel_ids: &[u32],
    samples: &[RgbdSample],
    cfg: &VdsiConfig,
) -> Result<VdsiReport> {
    if enc.in_channels() != 4 {
        return Err(Error::ChannelMismatch {
            expected: 4,
            actual: enc.in_channels(),
        });
    }
    if samples.is_empty() {
        return Err(Error::Invalid("sensitivity analysis needs samples".into()));
    }
    let x = stack_samples(samples.iter());
    if x.dim().1 != 4 {
        return Err(Error::ChannelMismatch {
            expected: 4,
            actual: x.dim().1,
        });
    }
    let base = encode_chunked(enc, &x)?;
    if base.ncols() != voxel_ids.len() {
        return Err(Error::Shape {
            expected: format!("{} voxel ids", base.ncols()),
            actual: voxel_ids.len().to_string(),
        });
    }
    let n = samples.len() as f64;
    let mut change = Vec::with_capacity(4);
    for k in 0..4 {
        let mut xk = x.clone();
        let fill = match cfg.fill {
            ChannelFill::Zero => 0.0,
            ChannelFill::DatasetMean => x.slice(s![.., k, .., ..]).mean().unwrap_or(0.0),
        };
        xk.slice_mut(s![.., k, .., ..]).fill(fill);
        let fk = encode_chunked(enc, &xk)?;
        let mean_abs: Vec<f64> = (0..base.ncols())
            .map(|v| {
                base.column(v)
                    .iter()
                    .zip(fk.column(v))
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>()
                    / n
            })
            .collect();
        change.push(mean_abs);
    }
    let mut degenerate = true;
    let entries = voxel_ids
        .iter()
        .enumerate()
        .map(|(v, &id)| {
            let num = change[3][v];
            let den = (change[0][v] + change[1][v] + change[2][v]) / 3.0;
            if den > VDSI_EPS {
                degenerate = false;
            }
            let raw = num / (den + VDSI_EPS);
            let clipped = raw >= VDSI_CLIP;
            VdsiEntry {
                voxel_id: id,
                vdsi: raw.min(VDSI_CLIP),
                region: None,
                clipped,
            }
        })
        .collect();
    Ok(VdsiReport {
        samples: samples.len(),
        fill: cfg.fill,
        degenerate,
        entries,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub pearson: f64,
    /// Voxels used: common to both reports and clipped in neither.
    pub count: usize,
    pub excluded: usize,
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// Pearson correlation of two sensitivity maps over voxels present in both.
pub fn vdsi_agreement(a: &VdsiReport, b: &VdsiReport) -> Result<Agreement> {
    let by_id: BTreeMap<u32, &VdsiEntry> = b.entries.iter().map(|e| (e.voxel_id, e)).collect();
    let (mut xa, mut xb) = (Vec::new(), Vec::new());
    let mut excluded = 0;
    for e in &a.entries {
        if let Some(f) = by_id.get(&e.voxel_id) {
            if e.clipped || f.clipped {
                excluded += 1;
            } else {
                xa.push(e.vdsi);
                xb.push(f.vdsi);
            }
        }
    }
    if xa.len() < 3 {
        return Err(Error::Invalid(format!(
            "agreement needs at least 3 common finite voxels, found {}",
            xa.len()
        )));
    }
    let r = pearson(&xa, &xb);
    if !r.is_finite() {
        return Err(Error::Invalid(
            "agreement undefined for constant sensitivity maps".into(),
        ));
    }
    Ok(Agreement {
        pearson: r,
        count: xa.len(),
        excluded,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiRow {
    pub region_set: RegionSet,
    pub voxels: usize,
    pub results: Vec<RankResult>,
}

/// Runs the full pipeline on the voxels of one region set.
pub fn roi_restricted_pipeline(
    ds: &Dataset,
    mask: &VoxelMask,
    set: RegionSet,
    inputs: PipelineInputs<'_>,
    cfg: &PipelineConfig,
    out: Option<&Path>,
) -> Result<RoiRow> {
    mask.validate_covers(&ds.voxel_ids)?;
    let positions = mask.positions(&ds.voxel_ids, set);
    if positions.is_empty() {
        return Err(Error::Invalid(format!("region set {set} selects no voxels")));
    }
    let sub = ds.select_voxels(&positions);
    let run = run_pipeline(&sub, inputs, cfg, out)?;
    Ok(RoiRow {
        region_set: set,
        voxels: positions.len(),
        results: run.eval.results,
    })
}

/// Comparison table over several region sets, one row each.
pub fn roi_compare(
    ds: &Dataset,
    mask: &VoxelMask,
    sets: &[RegionSet],
    inputs: PipelineInputs<'_>,
    cfg: &PipelineConfig,
    out: Option<&Path>,
) -> Result<Vec<RoiRow>> {
    sets.iter()
        .map(|&set| {
            let dir = out.map(|d| d.join(set.to_string().to_lowercase()));
            roi_restricted_pipeline(ds, mask, set, inputs, cfg, dir.as_deref())
        })
        .collect()
}

/// Plain-text table of mean ranks per region set and n.
pub fn format_roi_table(rows: &[RoiRow]) -> String {
    let ns: Vec<usize> = rows
        .first()
        .map(|r| r.results.iter().map(|x| x.n).collect())
        .unwrap_or_default();
    let mut out = format!("{:<8}{:>8}", "region", "voxels");
    for n in &ns {
        out.push_str(&format!("{:>12}", format!("n={n}")));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{:<8}{:>8}", r.region_set.to_string(), r.voxels));
        for x in &r.results {
            out.push_str(&format!("{:>12.2}", x.mean_rank));
        }
        out.push('\n');
    }
    out
}
