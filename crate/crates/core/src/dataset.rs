//! Dataset containers, the on-disk layout, voxel normalization and seeded
//! batch sampling.
//!
//! Layout:
//! ```text
//! root/paired_train/<item_id>.{ddr|png}
//! root/paired_test/<item_id>.{ddr|png}
//! root/unpaired/<item_id>.{ddr|png}
//! root/fmri/<item_id>.ddf
//! root/fmri/voxels.csv
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::io;
use crate::nn::{derive_seed, seeded_rng};
use crate::types::{ChannelMode, FmriVector, PairedExample, RgbdSample, UnpairedExample, VoxelMask};

pub const PAIRED_TRAIN_DIR: &str = "paired_train";
pub const PAIRED_TEST_DIR: &str = "paired_test";
pub const UNPAIRED_DIR: &str = "unpaired";
pub const FMRI_DIR: &str = "fmri";
pub const VOXEL_TABLE: &str = "voxels.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub mode: ChannelMode,
    pub paired_train: Vec<PairedExample>,
    pub paired_test: Vec<PairedExample>,
    pub unpaired: Vec<UnpairedExample>,
    pub voxel_ids: Vec<u32>,
    pub mask: Option<VoxelMask>,
}

impl Dataset {
    pub fn voxel_count(&self) -> usize {
        self.voxel_ids.len()
    }

    pub fn resolution(&self) -> Option<(usize, usize)> {
        self.paired_train
            .first()
            .map(|p| p.stimulus.resolution())
            .or_else(|| self.unpaired.first().map(|u| u.stimulus.resolution()))
    }

    /// Same dataset with every stimulus narrowed to `mode`.
    pub fn with_mode(&self, mode: ChannelMode) -> Result<Dataset> {
        let conv_p = |v: &[PairedExample]| -> Result<Vec<PairedExample>> {
            v.iter()
                .map(|p| {
                    Ok(PairedExample {
                        item_id: p.item_id.clone(),
                        stimulus: p.stimulus.to_mode(mode)?,
                        response: p.response.clone(),
                    })
                })
                .collect()
        };
        Ok(Dataset {
            mode,
            paired_train: conv_p(&self.paired_train)?,
            paired_test: conv_p(&self.paired_test)?,
            unpaired: self
                .unpaired
                .iter()
                .map(|u| {
                    Ok(UnpairedExample {
                        item_id: u.item_id.clone(),
                        stimulus: u.stimulus.to_mode(mode)?,
                    })
                })
                .collect::<Result<_>>()?,
            voxel_ids: self.voxel_ids.clone(),
            mask: self.mask.clone(),
        })
    }

    /// Restricts every response vector to the given voxel positions.
    pub fn select_voxels(&self, positions: &[usize]) -> Dataset {
        let sel = |v: &[PairedExample]| -> Vec<PairedExample> {
            v.iter()
                .map(|p| PairedExample {
                    item_id: p.item_id.clone(),
                    stimulus: p.stimulus.clone(),
                    response: p.response.select(positions),
                })
                .collect()
        };
        Dataset {
            mode: self.mode,
            paired_train: sel(&self.paired_train),
            paired_test: sel(&self.paired_test),
            unpaired: self.unpaired.clone(),
            voxel_ids: positions.iter().map(|&i| self.voxel_ids[i]).collect(),
            mask: self.mask.clone(),
        }
    }
}

struct RawItem {
    id: String,
    path: PathBuf,
}

fn list_items(dir: &Path) -> Result<Vec<RawItem>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut items = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        if ext != "ddr" && ext != "png" {
            continue;
        }
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::format(&path, "non-UTF-8 file name"))?
            .to_string();
        items.push(RawItem { id, path });
    }
    items.sort_by(|a, b| a.id.cmp(&b.id).then(a.path.cmp(&b.path)));
    let mut seen = HashSet::new();
    let dups: Vec<String> = items
        .iter()
        .filter(|i| !seen.insert(i.id.clone()))
        .map(|i| i.id.clone())
        .collect();
    if !dups.is_empty() {
        return Err(Error::Consistency {
            reason: format!("duplicate item ids in {}", dir.display()),
            items: dups,
        });
    }
    Ok(items)
}

fn load_stimulus(path: &Path, mode: ChannelMode) -> Result<RgbdSample> {
    let is_png = path.extension().is_some_and(|e| e == "png");
    let raster = if is_png {
        io::read_png_rgb(path)?
    } else {
        io::read_raster(path)?
    };
    let file_mode = ChannelMode::from_channels(raster.dim().0)
        .ok_or_else(|| Error::format(path, format!("unsupported channel count {}", raster.dim().0)))?;
    let sample = RgbdSample::new(file_mode, raster).map_err(|e| Error::format(path, e.to_string()))?;
    sample
        .to_mode(mode)
        .map_err(|_| Error::format(path, format!("{file_mode} raster cannot provide {mode} stimuli")))
}

/// Loads and validates a dataset tree.
pub fn load_dataset(root: &Path, mode: ChannelMode) -> Result<Dataset> {
    let fmri_dir = root.join(FMRI_DIR);
    let table_path = fmri_dir.join(VOXEL_TABLE);
    let table = if table_path.exists() {
        Some(io::read_voxel_table(&table_path)?)
    } else {
        None
    };

    let mut resolutions: BTreeMap<(usize, usize), Vec<String>> = BTreeMap::new();
    let mut load_unpaired = |dir: &Path| -> Result<Vec<UnpairedExample>> {
        list_items(dir)?
            .into_iter()
            .map(|it| {
                let stimulus = load_stimulus(&it.path, mode)?;
                resolutions
                    .entry(stimulus.resolution())
                    .or_default()
                    .push(it.id.clone());
                Ok(UnpairedExample {
                    item_id: it.id,
                    stimulus,
                })
            })
            .collect()
    };
    let train_items = load_unpaired(&root.join(PAIRED_TRAIN_DIR))?;
    let test_items = load_unpaired(&root.join(PAIRED_TEST_DIR))?;
    let unpaired = load_unpaired(&root.join(UNPAIRED_DIR))?;

    if resolutions.len() > 1 {
        let majority = resolutions
            .iter()
            .max_by_key(|(_, v)| v.len())
            .map(|(k, _)| *k)
            .expect("non-empty");
        let offenders = resolutions
            .iter()
            .filter(|(k, _)| **k != majority)
            .flat_map(|(_, v)| v.clone())
            .collect();
        return Err(Error::Consistency {
            reason: format!("rasters differ from the common resolution {majority:?}"),
            items: offenders,
        });
    }

    let train_ids: HashSet<&str> = train_items.iter().map(|i| i.item_id.as_str()).collect();
    let overlap: Vec<String> = test_items
        .iter()
        .filter(|i| train_ids.contains(i.item_id.as_str()))
        .map(|i| i.item_id.clone())
        .collect();
    if !overlap.is_empty() {
        return Err(Error::Consistency {
            reason: "train and test item ids overlap".into(),
            items: overlap,
        });
    }
    let paired_ids: HashSet<&str> = train_items
        .iter()
        .chain(&test_items)
        .map(|i| i.item_id.as_str())
        .collect();
    let overlap: Vec<String> = unpaired
        .iter()
        .filter(|i| paired_ids.contains(i.item_id.as_str()))
        .map(|i| i.item_id.clone())
        .collect();
    if !overlap.is_empty() {
        return Err(Error::Consistency {
            reason: "unpaired item ids overlap paired items".into(),
            items: overlap,
        });
    }

    let mut raw: Vec<(UnpairedExample, Vec<f32>, bool)> = Vec::new();
    let mut missing = Vec::new();
    for (items, is_train) in [(train_items, true), (test_items, false)] {
        for it in items {
            let p = fmri_dir.join(format!("{}.ddf", it.item_id));
            if !p.exists() {
                missing.push(it.item_id.clone());
                continue;
            }
            let values = io::read_fmri(&p)?;
            raw.push((it, values, is_train));
        }
    }
    if !missing.is_empty() {
        return Err(Error::Consistency {
            reason: "paired items without a voxel vector".into(),
            items: missing,
        });
    }

    let expected_len = match &table {
        Some(t) => t.len(),
        None => {
            // most common length is taken as the dataset voxel count
            let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
            for (_, v, _) in &raw {
                *counts.entry(v.len()).or_default() += 1;
            }
            counts.into_iter().max_by_key(|(_, c)| *c).map(|(l, _)| l).unwrap_or(0)
        }
    };
    let wrong: Vec<String> = raw
        .iter()
        .filter(|(_, v, _)| v.len() != expected_len)
        .map(|(it, v, _)| format!("{} ({} voxels, expected {expected_len})", it.item_id, v.len()))
        .collect();
    if !wrong.is_empty() {
        return Err(Error::Consistency {
            reason: "voxel vectors of inconsistent length".into(),
            items: wrong,
        });
    }

    let (voxel_ids, mask) = match table {
        Some(t) => {
            let ids: Vec<u32> = t.iter().map(|(id, _)| *id).collect();
            (ids, Some(VoxelMask::new(t)?))
        }
        None => ((0..expected_len as u32).collect(), None),
    };

    let mut paired_train = Vec::new();
    let mut paired_test = Vec::new();
    for (it, values, is_train) in raw {
        let response = FmriVector::new(values.into_iter().map(f64::from).collect(), voxel_ids.clone())
            .map_err(|e| Error::format(fmri_dir.join(format!("{}.ddf", it.item_id)), e.to_string()))?;
        let ex = PairedExample {
            item_id: it.item_id,
            stimulus: it.stimulus,
            response,
        };
        if is_train {
            paired_train.push(ex);
        } else {
            paired_test.push(ex);
        }
    }

    Ok(Dataset {
        mode,
        paired_train,
        paired_test,
        unpaired,
        voxel_ids,
        mask,
    })
}

/// Writes a dataset in the standard layout. Stimuli are stored as DDR1
/// rasters and responses as DDF1 (f32) vectors.
pub fn save_dataset(root: &Path, ds: &Dataset) -> Result<()> {
    let mk = |p: &Path| fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    for d in [PAIRED_TRAIN_DIR, PAIRED_TEST_DIR, UNPAIRED_DIR, FMRI_DIR] {
        mk(&root.join(d))?;
    }
    for (dir, items) in [(PAIRED_TRAIN_DIR, &ds.paired_train), (PAIRED_TEST_DIR, &ds.paired_test)] {
        for p in items {
            io::write_raster(&root.join(dir).join(format!("{}.ddr", p.item_id)), p.stimulus.raster())?;
            let vals: Vec<f32> = p.response.values().iter().map(|&v| v as f32).collect();
            io::write_fmri(&root.join(FMRI_DIR).join(format!("{}.ddf", p.item_id)), &vals)?;
        }
    }
    for u in &ds.unpaired {
        io::write_raster(
            &root.join(UNPAIRED_DIR).join(format!("{}.ddr", u.item_id)),
            u.stimulus.raster(),
        )?;
    }
    if let Some(mask) = &ds.mask {
        let rows: Vec<_> = ds
            .voxel_ids
            .iter()
            .map(|id| (*id, mask.region(*id).unwrap_or(crate::types::Region::Other)))
            .collect();
        io::write_voxel_table(&root.join(FMRI_DIR).join(VOXEL_TABLE), &rows)?;
    }
    Ok(())
}

/// Per-voxel train statistics used for z-scoring.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FmriStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Voxel ids whose train variance was zero (std replaced by 1).
    pub zero_variance: Vec<u32>,
}

impl FmriStats {
    pub fn apply(&self, v: &mut FmriVector) {
        for ((x, m), s) in v.values_mut().iter_mut().zip(&self.mean).zip(&self.std) {
            *x = (*x - m) / s;
        }
    }
}

/// Z-scores every voxel with statistics computed on `train` only, then
/// applies the same transform to `others`.
pub fn normalize_fmri(train: &mut [PairedExample], others: &mut [&mut [PairedExample]]) -> Result<FmriStats> {
    let first = train
        .first()
        .ok_or_else(|| Error::Invalid("cannot normalize with an empty train set".into()))?;
    let v = first.response.len();
    let ids = first.response.voxel_ids().to_vec();
    let n = train.len() as f64;
    let mut mean = vec![0.0; v];
    for p in train.iter() {
        for (m, x) in mean.iter_mut().zip(p.response.values()) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; v];
    for p in train.iter() {
        for ((s, x), m) in var.iter_mut().zip(p.response.values()).zip(&mean) {
            *s += (x - m) * (x - m);
        }
    }
    let mut zero_variance = Vec::new();
    let std: Vec<f64> = var
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let sd = (s / n).sqrt();
            if sd > 1e-12 {
                sd
            } else {
                zero_variance.push(ids[i]);
                1.0
            }
        })
        .collect();
    if !zero_variance.is_empty() {
        warn!(
            "{} zero-variance voxels normalized with unit std: {:?}",
            zero_variance.len(),
            zero_variance
        );
    }
    let stats = FmriStats {
        mean,
        std,
        zero_variance,
    };
    for p in train.iter_mut() {
        stats.apply(&mut p.response);
    }
    for coll in others.iter_mut() {
        for p in coll.iter_mut() {
            stats.apply(&mut p.response);
        }
    }
    Ok(stats)
}

/// Reproducible shuffled mini-batches over `0..len`.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    len: usize,
    batch: usize,
    seed: u64,
}

impl BatchSampler {
    pub fn new(len: usize, batch: usize, seed: u64) -> Self {
        assert!(batch >= 1, "batch size must be at least 1");
        Self { len, batch, seed }
    }

    /// All batches of one epoch; the last may be short.
    pub fn epoch(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.len).collect();
        let mut rng = seeded_rng(derive_seed(self.seed, &format!("epoch{epoch}")));
        idx.shuffle(&mut rng);
        idx.chunks(self.batch).map(<[usize]>::to_vec).collect()
    }

    /// An independent batch for a given step, drawn with replacement across
    /// steps and without replacement within the batch.
    pub fn draw(&self, step: usize) -> Vec<usize> {
        let mut rng = seeded_rng(derive_seed(self.seed, &format!("draw{step}")));
        if self.batch >= self.len {
            let mut all: Vec<usize> = (0..self.len).collect();
            all.shuffle(&mut rng);
            return all;
        }
        rand::seq::index::sample(&mut rng, self.len, self.batch).into_vec()
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.len.div_ceil(self.batch)
    }
}

/// Splits `0..len` into (train, validation) positions with a seeded shuffle.
pub fn holdout_split(len: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..len).collect();
    let mut rng = seeded_rng(seed);
    idx.shuffle(&mut rng);
    let n_val = if len >= 2 {
        ((len as f64 * fraction).round() as usize).clamp(1, len - 1)
    } else {
        0
    };
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn sample(v: f32) -> RgbdSample {
        RgbdSample::new(ChannelMode::Rgbd, Array3::from_elem((4, 3, 3), v)).unwrap()
    }

    fn paired(id: &str, vals: Vec<f64>) -> PairedExample {
        PairedExample {
            item_id: id.into(),
            stimulus: sample(0.5),
            response: FmriVector::from_values(vals).unwrap(),
        }
    }

    fn toy(n_train: usize, n_test: usize, n_unpaired: usize) -> Dataset {
        Dataset {
            mode: ChannelMode::Rgbd,
            paired_train: (0..n_train)
                .map(|i| paired(&format!("tr{i:03}"), vec![i as f64, 1.0]))
                .collect(),
            paired_test: (0..n_test)
                .map(|i| paired(&format!("te{i:03}"), vec![0.25, i as f64]))
                .collect(),
            unpaired: (0..n_unpaired)
                .map(|i| UnpairedExample {
                    item_id: format!("un{i:03}"),
                    stimulus: sample(i as f32 / n_unpaired as f32),
                })
                .collect(),
            voxel_ids: vec![0, 1],
            mask: None,
        }
    }

    #[test]
    fn load_preserves_counts() {
        let dir = tempfile::tempdir().unwrap();
        let ds = toy(8, 2, 20);
        save_dataset(dir.path(), &ds).unwrap();
        let back = load_dataset(dir.path(), ChannelMode::Rgbd).unwrap();
        assert_eq!(
            (back.paired_train.len(), back.paired_test.len(), back.unpaired.len()),
            (8, 2, 20)
        );
        assert_eq!(back, ds);
    }

    #[test]
    fn depth_only_load_never_yields_four_channels() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &toy(2, 1, 3)).unwrap();
        let back = load_dataset(dir.path(), ChannelMode::DepthOnly).unwrap();
        assert!(back
            .paired_train
            .iter()
            .map(|p| &p.stimulus)
            .chain(back.unpaired.iter().map(|u| &u.stimulus))
            .all(|s| s.channels() == 1));
    }

    #[test]
    fn wrong_length_vector_is_a_consistency_error() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &toy(4, 1, 0)).unwrap();
        io::write_fmri(&dir.path().join(FMRI_DIR).join("tr002.ddf"), &[1.0, 2.0, 3.0]).unwrap();
        match load_dataset(dir.path(), ChannelMode::Rgbd) {
            Err(Error::Consistency { items, .. }) => {
                assert_eq!(items.len(), 1);
                assert!(items[0].starts_with("tr002"));
            }
            other => panic!("expected consistency error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_header_names_file() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &toy(2, 1, 0)).unwrap();
        fs::write(dir.path().join(PAIRED_TRAIN_DIR).join("tr001.ddr"), b"nope").unwrap();
        let err = load_dataset(dir.path(), ChannelMode::Rgbd).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        assert!(err.to_string().contains("tr001.ddr"));
    }

    #[test]
    fn train_test_overlap_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = toy(2, 1, 0);
        ds.paired_test[0].item_id = "tr000".into();
        save_dataset(dir.path(), &ds).unwrap();
        assert!(matches!(
            load_dataset(dir.path(), ChannelMode::Rgbd),
            Err(Error::Consistency { .. })
        ));
    }

    #[test]
    fn zscore_examples() {
        let mut train = vec![paired("a", vec![2.0]), paired("b", vec![4.0])];
        let mut test = vec![paired("t", vec![5.0])];
        let stats = normalize_fmri(&mut train, &mut [&mut test]).unwrap();
        assert!((stats.mean[0] - 3.0).abs() < 1e-12);
        assert!((stats.std[0] - 1.0).abs() < 1e-12);
        assert_eq!(train[0].response.values(), &[-1.0]);
        assert_eq!(train[1].response.values(), &[1.0]);
        assert!((test[0].response.values()[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn constant_voxel_maps_to_zero_with_warning_list() {
        let mut train = vec![paired("a", vec![7.0, 1.0]), paired("b", vec![7.0, 3.0])];
        let stats = normalize_fmri(&mut train, &mut []).unwrap();
        assert_eq!(stats.zero_variance, vec![0]);
        assert!(train.iter().all(|p| p.response.values()[0] == 0.0));
    }

    #[test]
    fn normalized_train_has_unit_moments() {
        let mut train: Vec<_> = (0..37)
            .map(|i| paired(&format!("i{i}"), vec![(i as f64 * 1.7).sin() * 5.0 + 2.0, i as f64]))
            .collect();
        normalize_fmri(&mut train, &mut []).unwrap();
        for v in 0..2 {
            let xs: Vec<f64> = train.iter().map(|p| p.response.values()[v]).collect();
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            let s = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt();
            assert!(m.abs() < 1e-6 && (s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn sampler_is_reproducible() {
        let a = BatchSampler::new(50, 8, 11);
        let b = BatchSampler::new(50, 8, 11);
        assert_eq!(a.epoch(3), b.epoch(3));
        assert_ne!(a.epoch(3), a.epoch(4));
        assert_eq!(a.draw(9), b.draw(9));
        let mut all: Vec<usize> = a.epoch(0).concat();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
    }
}
