//! Simulated voxel responses to rendered scenes: a seeded linear "brain" over
//! a downsampled RGBD stimulus, and the benchmark dataset built from it.
//!
//! Lower-visual voxels have small Gaussian receptive fields; higher-visual
//! voxels read region-pooled signal. A fixed set of lower-visual voxels is
//! planted as depth-only or color-only.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Array4, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{save_dataset, Dataset};
use crate::depth::{render_rgbd, SceneConfig, SceneSpec};
use crate::encdec::StimulusEncoder;
use crate::error::{Error, Result};
use crate::nn::{derive_seed, kernels, seeded_rng};
use crate::types::{
    stack_samples, ChannelMode, FmriVector, PairedExample, Region, RgbdSample, UnpairedExample, VoxelMask,
};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BrainConfig {
    pub voxels: usize,
    /// Side of the downsampled stimulus grid the voxels read.
    pub grid: usize,
    pub lvc_fraction: f64,
    pub depth_only: usize,
    pub color_only: usize,
    pub sigma: f64,
    /// Receptive-field widths (grid cells) of V1, V2 and V3 voxels.
    pub rf_sigma: [f64; 3],
    /// Response gain of higher-visual voxels; 0 leaves them pure noise.
    pub hvc_gain: f64,
    pub seed: u64,
}

impl Default for BrainConfig {
    fn default() -> Self {
        Self {
            voxels: 512,
            grid: 14,
            lvc_fraction: 0.6,
            depth_only: 32,
            color_only: 32,
            sigma: 0.1,
            rf_sigma: [0.7, 1.1, 1.6],
            hvc_gain: 1.0,
            seed: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoxelKind {
    DepthOnly,
    ColorOnly,
    Mixed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulatedBrain {
    cfg: BrainConfig,
    /// `(V, 4 * grid * grid)`, columns in (channel, y, x) order.
    weights: Array2<f64>,
    kinds: Vec<VoxelKind>,
    regions: Vec<Region>,
    voxel_ids: Vec<u32>,
}

fn gaussian_rf(g: usize, cx: f64, cy: f64, sigma: f64) -> Vec<f64> {
    let mut w: Vec<f64> = (0..g * g)
        .map(|i| {
            let (y, x) = ((i / g) as f64 + 0.5, (i % g) as f64 + 0.5);
            (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Uniform weights over the whole grid or one of its four halves.
fn pooled_rf<R: Rng>(g: usize, rng: &mut R) -> Vec<f64> {
    let half = g / 2;
    let region = rng.random_range(0..5);
    let inside = |y: usize, x: usize| match region {
        0 => true,
        1 => x < half,
        2 => x >= half,
        3 => y < half,
        _ => y >= half,
    };
    let mut w: Vec<f64> = (0..g * g).map(|i| f64::from(u8::from(inside(i / g, i % g)))).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

impl SimulatedBrain {
    pub fn new(cfg: BrainConfig) -> Result<Self> {
        let v = cfg.voxels;
        let n_lvc = (cfg.lvc_fraction * v as f64).round() as usize;
        if v == 0 || cfg.grid < 2 || n_lvc > v || cfg.depth_only + cfg.color_only > n_lvc {
            return Err(Error::Config(
                "brain needs voxels, a grid of at least 2 and room for planted voxels among lower-visual voxels".into(),
            ));
        }
        if cfg.sigma.is_nan() || cfg.sigma < 0.0 {
            return Err(Error::Config(format!(
                "noise sigma must be non-negative, got {}",
                cfg.sigma
            )));
        }
        let g = cfg.grid;
        let mut rng = seeded_rng(derive_seed(cfg.seed, "brain"));
        let mut lvc_order: Vec<usize> = (0..n_lvc).collect();
        rand::seq::SliceRandom::shuffle(lvc_order.as_mut_slice(), &mut rng);
        let mut kinds = vec![VoxelKind::Mixed; v];
        for &i in &lvc_order[..cfg.depth_only] {
            kinds[i] = VoxelKind::DepthOnly;
        }
        for &i in &lvc_order[cfg.depth_only..cfg.depth_only + cfg.color_only] {
            kinds[i] = VoxelKind::ColorOnly;
        }
        let lvc_regions = [Region::V1, Region::V2, Region::V3];
        let hvc_regions = [Region::Loc, Region::Ffa, Region::Ppa];
        let mut regions = Vec::with_capacity(v);
        let mut weights = Array2::<f64>::zeros((v, 4 * g * g));
        for i in 0..v {
            let (spatial, region, gain) = if i < n_lvc {
                let r = i % 3;
                let cx = rng.random_range(0.0..g as f64);
                let cy = rng.random_range(0.0..g as f64);
                (gaussian_rf(g, cx, cy, cfg.rf_sigma[r]), lvc_regions[r], 1.0)
            } else {
                (pooled_rf(g, &mut rng), hvc_regions[i % 3], cfg.hvc_gain)
            };
            let mut ch: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
            match kinds[i] {
                VoxelKind::DepthOnly => {
                    ch = [0.0, 0.0, 0.0, ch[3].signum() * (1.0 + ch[3].abs())];
                }
                VoxelKind::ColorOnly => {
                    ch[3] = 0.0;
                }
                VoxelKind::Mixed => {}
            }
            for c in 0..4 {
                for (p, &sw) in spatial.iter().enumerate() {
                    weights[[i, c * g * g + p]] = gain * ch[c] * sw;
                }
            }
            regions.push(region);
        }
        Ok(Self {
            cfg,
            weights,
            kinds,
            regions,
            voxel_ids: (0..v as u32).collect(),
        })
    }

    pub fn config(&self) -> &BrainConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn kinds(&self) -> &[VoxelKind] {
        &self.kinds
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn voxel_ids(&self) -> &[u32] {
        &self.voxel_ids
    }

    pub fn mask(&self) -> VoxelMask {
        VoxelMask::new(self.voxel_ids.iter().copied().zip(self.regions.iter().copied())).expect("unique ids")
    }

    pub fn voxels_of(&self, kind: VoxelKind) -> Vec<u32> {
        self.voxel_ids
            .iter()
            .zip(&self.kinds)
            .filter(|(_, k)| **k == kind)
            .map(|(id, _)| *id)
            .collect()
    }

    /// SHA-256 over the little-endian projection weights.
    pub fn projection_checksum(&self) -> String {
        let mut h = Sha256::new();
        for w in self.weights.iter() {
            h.update(w.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn downsample(&self, x: &Array4<f64>) -> Array2<f64> {
        let pooled = kernels::adaptive_avg_pool_forward(x, self.cfg.grid);
        let n = pooled.dim().0;
        pooled
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((n, 4 * self.cfg.grid * self.cfg.grid))
            .expect("contiguous")
    }

    /// Noise-free responses `(n, V)` to a 4-channel batch.
    pub fn signal_batch(&self, x: &Array4<f64>) -> Result<Array2<f64>> {
        if x.dim().1 != 4 {
            return Err(Error::ChannelMismatch {
                expected: 4,
                actual: x.dim().1,
            });
        }
        Ok(self.downsample(x).dot(&self.weights.t()))
    }

    /// Response to one stimulus with Gaussian noise drawn from `seed`.
    pub fn simulate_response(&self, s: &RgbdSample, seed: u64) -> Result<FmriVector> {
        let signal = self.signal_batch(&s.to_tensor().insert_axis(Axis(0)))?;
        let mut rng = seeded_rng(seed);
        let noise = Normal::new(0.0, self.cfg.sigma).map_err(|e| Error::Config(e.to_string()))?;
        let values = signal.row(0).iter().map(|&v| v + noise.sample(&mut rng)).collect();
        FmriVector::new(values, self.voxel_ids.clone())
    }

    /// Per-voxel signal variance over `stimuli` divided by signal variance
    /// plus noise variance.
    pub fn noise_ceilings(&self, stimuli: &[&RgbdSample]) -> Result<Vec<f64>> {
        if stimuli.is_empty() {
            return Ok(vec![0.0; self.cfg.voxels]);
        }
        let signal = self.signal_batch(&stack_samples(stimuli.iter().copied()))?;
        let var: Array1<f64> = signal.var_axis(Axis(0), 0.0);
        let noise = self.cfg.sigma * self.cfg.sigma;
        Ok(var
            .iter()
            .map(|&s| if s + noise > 0.0 { s / (s + noise) } else { 0.0 })
            .collect())
    }
}

impl StimulusEncoder for SimulatedBrain {
    fn in_channels(&self) -> usize {
        4
    }

    fn encode_batch(&self, x: &Array4<f64>) -> Result<Array2<f64>> {
        self.signal_batch(x)
    }

    fn fingerprint(&self) -> String {
        self.projection_checksum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub seed: u64,
    pub paired_train: usize,
    pub paired_test: usize,
    pub unpaired: usize,
    pub scene: SceneConfig,
    pub brain: BrainConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            paired_train: 200,
            paired_test: 50,
            unpaired: 5000,
            // brightness and position only partly follow depth, so color and
            // depth vary independently enough to tell their voxels apart
            scene: SceneConfig {
                depth_shading: 0.3,
                position_cue: 0.5,
                ..SceneConfig::default()
            },
            brain: BrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkManifest {
    pub config: BenchmarkConfig,
    /// How per-item seeds derive from `config.seed`.
    pub seed_scheme: String,
    pub sigma: f64,
    pub counts: [usize; 3],
    pub planted_depth_only: Vec<u32>,
    pub planted_color_only: Vec<u32>,
    pub lvc_voxels: Vec<u32>,
    pub hvc_voxels: Vec<u32>,
    /// Per-voxel noise ceiling over the paired stimuli.
    pub noise_ceilings: Vec<f64>,
    pub projection_checksum: String,
}

/// In-memory benchmark: raw (not z-scored) responses, the generating brain
/// and the manifest describing them.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub dataset: Dataset,
    pub brain: SimulatedBrain,
    pub manifest: BenchmarkManifest,
}

fn scene_sample(cfg: &BenchmarkConfig, id: &str) -> Result<RgbdSample> {
    render_rgbd(&SceneSpec::random(
        derive_seed(cfg.seed, &format!("scene/{id}")),
        &cfg.scene,
    ))
}

pub fn generate_benchmark(cfg: &BenchmarkConfig) -> Result<Benchmark> {
    let brain = SimulatedBrain::new(cfg.brain.clone())?;
    let paired = |prefix: &str, n: usize| -> Result<Vec<PairedExample>> {
        (0..n)
            .map(|i| {
                let id = format!("{prefix}_{i:04}");
                let stimulus = scene_sample(cfg, &id)?;
                let response = brain.simulate_response(&stimulus, derive_seed(cfg.seed, &format!("noise/{id}")))?;
                Ok(PairedExample {
                    item_id: id,
                    stimulus,
                    response,
                })
            })
            .collect()
    };
    let paired_train = paired("train", cfg.paired_train)?;
    let paired_test = paired("test", cfg.paired_test)?;
    let unpaired = (0..cfg.unpaired)
        .map(|i| {
            let id = format!("unp_{i:05}");
            Ok(UnpairedExample {
                stimulus: scene_sample(cfg, &id)?,
                item_id: id,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let stimuli: Vec<&RgbdSample> = paired_train.iter().chain(&paired_test).map(|p| &p.stimulus).collect();
    let mask = brain.mask();
    let manifest = BenchmarkManifest {
        config: cfg.clone(),
        seed_scheme: "scene/<item_id> and noise/<item_id> derived from config.seed; brain derived from brain.seed"
            .into(),
        sigma: cfg.brain.sigma,
        counts: [cfg.paired_train, cfg.paired_test, cfg.unpaired],
        planted_depth_only: brain.voxels_of(VoxelKind::DepthOnly),
        planted_color_only: brain.voxels_of(VoxelKind::ColorOnly),
        lvc_voxels: mask.lvc(),
        hvc_voxels: mask.hvc(),
        noise_ceilings: brain.noise_ceilings(&stimuli)?,
        projection_checksum: brain.projection_checksum(),
    };
    let dataset = Dataset {
        mode: ChannelMode::Rgbd,
        paired_train,
        paired_test,
        unpaired,
        voxel_ids: brain.voxel_ids().to_vec(),
        mask: Some(mask),
    };
    Ok(Benchmark {
        dataset,
        brain,
        manifest,
    })
}

/// Generates the benchmark and writes it in the standard dataset layout plus
/// `manifest.json`. A non-empty `out` is only replaced when `force` is set.
pub fn build_benchmark(cfg: &BenchmarkConfig, out: &Path, force: bool) -> Result<BenchmarkManifest> {
    if out.exists() {
        let non_empty = fs::read_dir(out).map_err(|e| Error::io(out, e))?.next().is_some();
        if non_empty {
            if !force {
                return Err(Error::OutputExists(out.to_path_buf()));
            }
            fs::remove_dir_all(out).map_err(|e| Error::io(out, e))?;
        }
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let bench = generate_benchmark(cfg)?;
    save_dataset(out, &bench.dataset)?;
    let path = out.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&bench.manifest).map_err(|e| Error::Invalid(e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(bench.manifest)
}

pub fn read_manifest(root: &Path) -> Result<BenchmarkManifest> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::load_dataset;
    use ndarray::Array3;

    fn small_brain(sigma: f64) -> SimulatedBrain {
        SimulatedBrain::new(BrainConfig {
            voxels: 40,
            grid: 4,
            depth_only: 4,
            color_only: 4,
            sigma,
            ..Default::default()
        })
        .unwrap()
    }

    fn raster(seed: u64) -> RgbdSample {
        let mut k = seed;
        RgbdSample::new(
            ChannelMode::Rgbd,
            Array3::from_shape_fn((4, 16, 16), |_| {
                k = k.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (k >> 40) as f32 / (1u64 << 24) as f32
            }),
        )
        .unwrap()
    }

    #[test]
    fn zero_stimulus_without_noise_gives_zero() {
        let b = small_brain(0.0);
        let r = b
            .simulate_response(&RgbdSample::zeros(ChannelMode::Rgbd, 16, 16), 1)
            .unwrap();
        assert!(r.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn noiseless_response_is_linear() {
        let b = small_brain(0.0);
        let (s1, s2) = (raster(1), raster(2));
        let (a, c) = (0.3f32, 0.6f32);
        let mix = RgbdSample::new(ChannelMode::Rgbd, s1.raster() * a + s2.raster() * c).unwrap();
        let r1 = b.simulate_response(&s1, 0).unwrap();
        let r2 = b.simulate_response(&s2, 0).unwrap();
        let rm = b.simulate_response(&mix, 0).unwrap();
        for i in 0..40 {
            let expect = f64::from(a) * r1.values()[i] + f64::from(c) * r2.values()[i];
            assert!((rm.values()[i] - expect).abs() < 1e-5);
        }
    }

    #[test]
    fn depth_only_voxels_ignore_color() {
        let b = small_brain(0.0);
        let s = raster(3);
        let mut t = s.raster().clone();
        t.slice_mut(ndarray::s![0..3, .., ..]).fill(0.0);
        let zeroed = RgbdSample::new(ChannelMode::Rgbd, t).unwrap();
        let (r, rz) = (
            b.simulate_response(&s, 0).unwrap(),
            b.simulate_response(&zeroed, 0).unwrap(),
        );
        for id in b.voxels_of(VoxelKind::DepthOnly) {
            assert_eq!(r.values()[id as usize], rz.values()[id as usize]);
        }
        assert!(b
            .regions()
            .iter()
            .zip(b.kinds())
            .all(|(r, k)| *k == VoxelKind::Mixed || r.is_lvc()));
    }

    #[test]
    fn noise_is_seeded() {
        let b = small_brain(0.1);
        let s = raster(4);
        assert_eq!(b.simulate_response(&s, 9).unwrap(), b.simulate_response(&s, 9).unwrap());
        assert_ne!(
            b.simulate_response(&s, 9).unwrap(),
            b.simulate_response(&s, 10).unwrap()
        );
    }

    fn tiny_config() -> BenchmarkConfig {
        BenchmarkConfig {
            paired_train: 6,
            paired_test: 3,
            unpaired: 10,
            scene: SceneConfig {
                resolution: 16,
                ..Default::default()
            },
            brain: BrainConfig {
                voxels: 24,
                grid: 4,
                depth_only: 3,
                color_only: 3,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn benchmark_tree_loads_with_expected_counts_and_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        let cfg = tiny_config();
        let m = build_benchmark(&cfg, &a, false).unwrap();
        build_benchmark(&cfg, &b, false).unwrap();
        let ds = load_dataset(&a, ChannelMode::Rgbd).unwrap();
        assert_eq!(
            (ds.paired_train.len(), ds.paired_test.len(), ds.unpaired.len()),
            (6, 3, 10)
        );
        assert_eq!(ds.voxel_count(), 24);
        assert_eq!(m.planted_depth_only.len(), 3);
        assert_eq!(read_manifest(&a).unwrap(), m);
        for entry in walk(&a) {
            let rel = entry.strip_prefix(&a).unwrap();
            assert_eq!(
                fs::read(&entry).unwrap(),
                fs::read(b.join(rel)).unwrap(),
                "{}",
                rel.display()
            );
        }
    }

    #[test]
    fn existing_output_requires_force() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("keep.txt"), "x").unwrap();
        assert!(matches!(
            build_benchmark(&tiny_config(), dir.path(), false),
            Err(Error::OutputExists(_))
        ));
        build_benchmark(&tiny_config(), dir.path(), true).unwrap();
        assert!(!dir.path().join("keep.txt").exists());
    }

    fn walk(root: &Path) -> Vec<std::path::PathBuf> {
        let mut out = Vec::new();
        for e in fs::read_dir(root).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out
    }
}
