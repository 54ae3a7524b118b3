//! n-way rank identification of reconstructions against distractors drawn
//! from the unpaired pool, with percentile-bootstrap confidence intervals.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::depth::DepthEstimator;
use crate::encdec::Decoder;
use crate::error::{Error, Result};
use crate::nn::{derive_seed, seeded_rng};
use crate::perceptual::{normalized_batch, normalized_loss, FeatureExtractor, NormalizedPyramid, PerceptualConfig};
use crate::types::{stack_samples, ChannelMode, PairedExample, RgbdSample, UnpairedExample};

pub const DEFAULT_N_LIST: [usize; 6] = [5, 10, 50, 100, 500, 1000];

/// Which channels a ranking compares.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricMode {
    Depth,
    Rgb,
}

impl MetricMode {
    pub fn channel_mode(self) -> ChannelMode {
        match self {
            MetricMode::Depth => ChannelMode::DepthOnly,
            MetricMode::Rgb => ChannelMode::Rgb,
        }
    }

    /// Narrows a sample to the compared channels.
    pub fn project(self, s: &RgbdSample) -> Result<RgbdSample> {
        s.to_mode(self.channel_mode())
    }
}

impl fmt::Display for MetricMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricMode::Depth => "depth",
            MetricMode::Rgb => "rgb",
        })
    }
}

impl FromStr for MetricMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "depth" | "d" => Ok(Self::Depth),
            "rgb" => Ok(Self::Rgb),
            other => Err(Error::Config(format!("unknown metric mode {other:?}"))),
        }
    }
}

/// Produces a reconstruction for a test item.
pub trait Reconstructor {
    fn reconstruct(&self, item: &PairedExample) -> Result<RgbdSample>;
}

impl Reconstructor for Decoder {
    fn reconstruct(&self, item: &PairedExample) -> Result<RgbdSample> {
        self.decode(&item.response)
    }
}

/// Returns the true stimulus.
pub struct Passthrough;

impl Reconstructor for Passthrough {
    fn reconstruct(&self, item: &PairedExample) -> Result<RgbdSample> {
        Ok(item.stimulus.clone())
    }
}

/// Returns the same sample for every item.
pub struct ConstantReconstructor(pub RgbdSample);

impl Reconstructor for ConstantReconstructor {
    fn reconstruct(&self, _: &PairedExample) -> Result<RgbdSample> {
        Ok(self.0.clone())
    }
}

/// Depth estimated from another reconstructor's RGB output.
pub struct IndirectDepth<'a> {
    pub rgb: &'a dyn Reconstructor,
    pub estimator: &'a DepthEstimator,
}

impl Reconstructor for IndirectDepth<'_> {
    fn reconstruct(&self, item: &PairedExample) -> Result<RgbdSample> {
        let rgb = self.rgb.reconstruct(item)?;
        self.estimator.predict(&rgb)
    }
}

/// Average rank: 1 + (#strictly smaller) + half of (#equal).
fn rank_from_losses(truth: f64, distractors: impl IntoIterator<Item = f64>) -> (f64, usize) {
    let (mut less, mut ties) = (0usize, 0usize);
    for d in distractors {
        if d < truth {
            less += 1;
        } else if d == truth {
            ties += 1;
        }
    }
    (1.0 + less as f64 + 0.5 * ties as f64, ties)
}

/// Rank of `truth` among `truth` plus `distractors` by perceptual distance
/// to `recon`. Samples are compared in the extractor's channel mode.
pub fn rank_identify(
    recon: &RgbdSample,
    truth: (&str, &RgbdSample),
    distractors: &[(&str, &RgbdSample)],
    ext: &FeatureExtractor,
    cfg: &PerceptualConfig,
) -> Result<f64> {
    if distractors.is_empty() {
        return Err(Error::Invalid(
            "rank identification needs at least one distractor".into(),
        ));
    }
    let mut ids = HashSet::new();
    for id in std::iter::once(truth.0).chain(distractors.iter().map(|d| d.0)) {
        if !ids.insert(id) {
            return Err(Error::DuplicateCandidate(id.to_string()));
        }
    }
    let mode = ChannelMode::from_channels(ext.in_channels()).expect("extractor channel count is valid");
    let project = |s: &RgbdSample| s.to_mode(mode);
    let mut all = vec![project(recon)?, project(truth.1)?];
    for d in distractors {
        all.push(project(d.1)?);
    }
    let pyr = normalized_batch(ext, &stack_samples(all.iter()))?;
    let truth_loss = normalized_loss(&pyr[0], &pyr[1], cfg);
    Ok(rank_from_losses(truth_loss, pyr[2..].iter().map(|p| normalized_loss(&pyr[0], p, cfg))).0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub n_list: Vec<usize>,
    pub bootstrap_iterations: usize,
    pub level: f64,
    pub seed: u64,
    pub perceptual: PerceptualConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_list: DEFAULT_N_LIST.to_vec(),
            bootstrap_iterations: 2000,
            level: 0.95,
            seed: 7,
            perceptual: PerceptualConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemRank {
    pub item_id: String,
    pub rank: f64,
    pub n: usize,
    /// Distractors whose distance tied the true candidate.
    pub ties: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankResult {
    pub metric: MetricMode,
    pub n: usize,
    pub items: Vec<ItemRank>,
    pub mean_rank: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub chance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: MetricMode,
    pub seed: u64,
    pub bootstrap_iterations: usize,
    pub level: f64,
    pub test_items: usize,
    pub pool_items: usize,
    pub results: Vec<RankResult>,
}

impl EvalReport {
    pub fn at(&self, n: usize) -> Option<&RankResult> {
        self.results.iter().find(|r| r.n == n)
    }
}

/// Percentile bootstrap CI of the mean. The interval is widened to contain
/// the sample mean when resampling leaves it just outside.
pub fn bootstrap_ci(values: &[f64], iterations: usize, level: f64, seed: u64) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Invalid("bootstrap needs at least one value".into()));
    }
    if iterations < 1000 || !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!(
            "bootstrap needs at least 1000 iterations and a level in (0, 1), got {iterations} and {level}"
        )));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let mut rng = seeded_rng(seed);
    let mut means: Vec<f64> = (0..iterations)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let pick = |q: f64| {
        let pos = q * (iterations - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        means[lo] + (means[hi] - means[lo]) * (pos - lo as f64)
    };
    Ok((pick(tail).min(mean), pick(1.0 - tail).max(mean)))
}

/// Pool positions used as distractors for one item: a prefix of a per-item
/// seeded permutation, so sets for smaller n are nested in larger ones.
pub fn distractor_indices(item_id: &str, pool_len: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pool_len).collect();
    idx.shuffle(&mut seeded_rng(derive_seed(seed, &format!("distractors/{item_id}"))));
    idx.truncate(count);
    idx
}

const POOL_CHUNK: usize = 128;

fn pyramids(ext: &FeatureExtractor, samples: &[RgbdSample]) -> Result<Vec<NormalizedPyramid>> {
    let mut out = Vec::with_capacity(samples.len());
    for c in samples.chunks(POOL_CHUNK) {
        out.extend(normalized_batch(ext, &stack_samples(c.iter()))?);
    }
    Ok(out)
}

/// Ranks every test item's reconstruction for each n in `cfg.n_list`.
pub fn evaluate_testset(
    recon: &dyn Reconstructor,
    test: &[PairedExample],
    pool: &[UnpairedExample],
    ext: &FeatureExtractor,
    metric: MetricMode,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let reconstructions = test
        .iter()
        .map(|item| metric.project(&recon.reconstruct(item)?))
        .collect::<Result<Vec<_>>>()?;
    evaluate_reconstructions(&reconstructions, test, pool, ext, metric, cfg)
}

/// Ranking step of [`evaluate_testset`] over precomputed reconstructions.
pub fn evaluate_reconstructions(
    reconstructions: &[RgbdSample],
    test: &[PairedExample],
    pool: &[UnpairedExample],
    ext: &FeatureExtractor,
    metric: MetricMode,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Invalid("evaluation needs test items".into()));
    }
    if cfg.n_list.is_empty() || cfg.n_list.contains(&0) || cfg.n_list.contains(&1) {
        return Err(Error::Config("every n must be at least 2".into()));
    }
    if ext.in_channels() != metric.channel_mode().channels() {
        return Err(Error::ChannelMismatch {
            expected: metric.channel_mode().channels(),
            actual: ext.in_channels(),
        });
    }
    let max_n = *cfg.n_list.iter().max().expect("non-empty");
    if pool.len() < max_n - 1 {
        return Err(Error::InsufficientPool {
            required: max_n - 1,
            available: pool.len(),
        });
    }
    let test_ids: HashSet<&str> = test.iter().map(|p| p.item_id.as_str()).collect();
    if let Some(u) = pool.iter().find(|u| test_ids.contains(u.item_id.as_str())) {
        return Err(Error::DuplicateCandidate(u.item_id.clone()));
    }
    let truths = test
        .iter()
        .map(|p| metric.project(&p.stimulus))
        .collect::<Result<Vec<_>>>()?;
    let recon_pyr = pyramids(ext, reconstructions)?;
    let truth_pyr = pyramids(ext, &truths)?;
    let truth_loss: Vec<f64> = recon_pyr
        .iter()
        .zip(&truth_pyr)
        .map(|(r, t)| normalized_loss(r, t, &cfg.perceptual))
        .collect();

    let sets: Vec<Vec<usize>> = test
        .iter()
        .map(|p| distractor_indices(&p.item_id, pool.len(), max_n - 1, cfg.seed))
        .collect();
    let mut users: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, set) in sets.iter().enumerate() {
        for &j in set {
            users.entry(j).or_default().push(i);
        }
    }
    let mut losses: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); test.len()];
    let needed: Vec<usize> = users.keys().copied().collect();
    for chunk in needed.chunks(POOL_CHUNK) {
        let samples = chunk
            .iter()
            .map(|&j| metric.project(&pool[j].stimulus))
            .collect::<Result<Vec<_>>>()?;
        let pyr = normalized_batch(ext, &stack_samples(samples.iter()))?;
        for (&j, p) in chunk.iter().zip(&pyr) {
            for &i in &users[&j] {
                losses[i].insert(j, normalized_loss(&recon_pyr[i], p, &cfg.perceptual));
            }
        }
    }

    let mut results = Vec::with_capacity(cfg.n_list.len());
    for &n in &cfg.n_list {
        let items: Vec<ItemRank> = test
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let (rank, ties) = rank_from_losses(truth_loss[i], sets[i][..n - 1].iter().map(|j| losses[i][j]));
                ItemRank {
                    item_id: p.item_id.clone(),
                    rank,
                    n,
                    ties,
                }
            })
            .collect();
        let ranks: Vec<f64> = items.iter().map(|r| r.rank).collect();
        let mean_rank = ranks.iter().sum::<f64>() / ranks.len() as f64;
        let (ci_low, ci_high) = bootstrap_ci(
            &ranks,
            cfg.bootstrap_iterations,
            cfg.level,
            derive_seed(cfg.seed, &format!("bootstrap/{n}")),
        )?;
        results.push(RankResult {
            metric,
            n,
            items,
            mean_rank,
            ci_low,
            ci_high,
            chance: (n as f64 + 1.0) / 2.0,
        });
    }
    Ok(EvalReport {
        metric,
        seed: cfg.seed,
        bootstrap_iterations: cfg.bootstrap_iterations,
        level: cfg.level,
        test_items: test.len(),
        pool_items: pool.len(),
        results,
    })
}

/// Depth ranks of depth maps estimated from an RGB reconstructor's output.
pub fn indirect_depth_eval(
    rgb: &dyn Reconstructor,
    estimator: &DepthEstimator,
    test: &[PairedExample],
    pool: &[UnpairedExample],
    ext_depth: &FeatureExtractor,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let indirect = IndirectDepth { rgb, estimator };
    evaluate_testset(&indirect, test, pool, ext_depth, MetricMode::Depth, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perceptual::ExtractorConfig;
    use crate::types::FmriVector;
    use ndarray::Array3;
    use rand_distr::{Distribution, Uniform};

    const RES: usize = 8;

    fn extractor() -> FeatureExtractor {
        FeatureExtractor::new(
            1,
            ExtractorConfig {
                widths: vec![4, 6],
                convs_per_block: 1,
                ..Default::default()
            },
            9,
        )
        .unwrap()
    }

    fn random_sample<R: Rng>(rng: &mut R) -> RgbdSample {
        let u = Uniform::new(0.0f32, 1.0).unwrap();
        RgbdSample::new(
            ChannelMode::DepthOnly,
            Array3::from_shape_fn((1, RES, RES), |_| u.sample(rng)),
        )
        .unwrap()
    }

    fn test_set(seed: u64, n: usize) -> Vec<PairedExample> {
        let mut rng = seeded_rng(seed);
        (0..n)
            .map(|i| PairedExample {
                item_id: format!("t{i}"),
                stimulus: random_sample(&mut rng),
                response: FmriVector::from_values(vec![0.0]).unwrap(),
            })
            .collect()
    }

    fn pool(seed: u64, n: usize) -> Vec<UnpairedExample> {
        let mut rng = seeded_rng(seed);
        (0..n)
            .map(|i| UnpairedExample {
                item_id: format!("u{i}"),
                stimulus: random_sample(&mut rng),
            })
            .collect()
    }

    #[test]
    fn identical_reconstruction_ranks_first() {
        let mut rng = seeded_rng(1);
        let truth = random_sample(&mut rng);
        let d: Vec<RgbdSample> = (0..9).map(|_| random_sample(&mut rng)).collect();
        let names: Vec<String> = (0..9).map(|i| format!("d{i}")).collect();
        let ds: Vec<(&str, &RgbdSample)> = names.iter().map(String::as_str).zip(&d).collect();
        let ext = extractor();
        let rank = rank_identify(&truth, ("t", &truth), &ds, &ext, &PerceptualConfig::default()).unwrap();
        assert_eq!(rank, 1.0);
        let mut rev = ds.clone();
        rev.reverse();
        let other = random_sample(&mut rng);
        let a = rank_identify(&other, ("t", &truth), &ds, &ext, &PerceptualConfig::default()).unwrap();
        let b = rank_identify(&other, ("t", &truth), &rev, &ext, &PerceptualConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn duplicate_candidates_are_rejected() {
        let mut rng = seeded_rng(2);
        let s = random_sample(&mut rng);
        let err = rank_identify(&s, ("x", &s), &[("x", &s)], &extractor(), &PerceptualConfig::default());
        assert!(matches!(err, Err(Error::DuplicateCandidate(_))));
    }

    #[test]
    fn ties_count_half() {
        assert_eq!(rank_from_losses(0.5, [0.1, 0.5, 0.5, 0.9]), (3.0, 2));
    }

    #[test]
    fn independent_reconstruction_has_chance_rank() {
        // 10,000 draws of n = 5 candidates; expected rank (n + 1) / 2 = 3
        let ext = extractor();
        let cfg = PerceptualConfig::default();
        let mut rng = seeded_rng(3);
        let names = ["a", "b", "c", "d"];
        let draws = 10_000;
        let mut total = 0.0;
        for _ in 0..draws {
            let recon = random_sample(&mut rng);
            let truth = random_sample(&mut rng);
            let d: Vec<RgbdSample> = (0..4).map(|_| random_sample(&mut rng)).collect();
            let ds: Vec<(&str, &RgbdSample)> = names.iter().copied().zip(&d).collect();
            total += rank_identify(&recon, ("t", &truth), &ds, &ext, &cfg).unwrap();
        }
        // standard error is sqrt(2 / 10000) ~ 0.014
        assert!((total / draws as f64 - 3.0).abs() < 0.05, "{}", total / draws as f64);
    }

    fn cfg(n_list: Vec<usize>) -> EvalConfig {
        EvalConfig {
            n_list,
            bootstrap_iterations: 1000,
            ..Default::default()
        }
    }

    #[test]
    fn passthrough_ranks_first_for_every_n() {
        let report = evaluate_testset(
            &Passthrough,
            &test_set(4, 6),
            &pool(5, 60),
            &extractor(),
            MetricMode::Depth,
            &cfg(vec![5, 10, 50]),
        )
        .unwrap();
        for r in &report.results {
            assert_eq!(r.mean_rank, 1.0);
            assert_eq!((r.ci_low, r.ci_high), (1.0, 1.0));
        }
    }

    #[test]
    fn small_pool_names_required_size() {
        let err = evaluate_testset(
            &Passthrough,
            &test_set(4, 2),
            &pool(5, 8),
            &extractor(),
            MetricMode::Depth,
            &cfg(vec![10]),
        );
        match err {
            Err(Error::InsufficientPool { required, available }) => assert_eq!((required, available), (9, 8)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn batch_ranking_matches_single_item_ranking() {
        let test = test_set(6, 3);
        let p = pool(7, 20);
        let ext = extractor();
        let mut rng = seeded_rng(8);
        let recon = ConstantReconstructor(random_sample(&mut rng));
        let c = cfg(vec![4, 12]);
        let report = evaluate_testset(&recon, &test, &p, &ext, MetricMode::Depth, &c).unwrap();
        for r in &report.results {
            for (item, got) in test.iter().zip(&r.items) {
                let idx = distractor_indices(&item.item_id, p.len(), r.n - 1, c.seed);
                let ds: Vec<(&str, &RgbdSample)> =
                    idx.iter().map(|&j| (p[j].item_id.as_str(), &p[j].stimulus)).collect();
                let want = rank_identify(&recon.0, (&item.item_id, &item.stimulus), &ds, &ext, &c.perceptual).unwrap();
                assert_eq!(got.rank, want);
            }
        }
    }

    #[test]
    fn more_distractors_do_not_lower_expected_rank() {
        let mut rng = seeded_rng(10);
        let recon = ConstantReconstructor(random_sample(&mut rng));
        let report = evaluate_testset(
            &recon,
            &test_set(11, 40),
            &pool(12, 200),
            &extractor(),
            MetricMode::Depth,
            &cfg(vec![10, 100]),
        )
        .unwrap();
        // nested distractor sets make this hold per item, not just on average
        for (a, b) in report.results[0].items.iter().zip(&report.results[1].items) {
            assert!(b.rank >= a.rank);
        }
    }

    #[test]
    fn bootstrap_trivial_cases() {
        assert_eq!(bootstrap_ci(&[4.0; 20], 1000, 0.95, 1).unwrap(), (4.0, 4.0));
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        let (lo, hi) = bootstrap_ci(&v, 2000, 0.95, 1).unwrap();
        assert!(lo <= 50.5 && 50.5 <= hi);
        assert!(bootstrap_ci(&v, 999, 0.95, 1).is_err());
        assert!(bootstrap_ci(&v, 1000, 1.0, 1).is_err());
    }

    #[test]
    fn bootstrap_is_seeded() {
        let v: Vec<f64> = (0..30).map(|i| f64::from(i * i % 17)).collect();
        assert_eq!(
            bootstrap_ci(&v, 1000, 0.9, 5).unwrap(),
            bootstrap_ci(&v, 1000, 0.9, 5).unwrap()
        );
    }

    #[test]
    fn indirect_with_passthrough_equals_estimator_depth_ranking() {
        let est = DepthEstimator::new(2, 1);
        let mut rng = seeded_rng(13);
        let rgbd = |rng: &mut crate::nn::SeededRng| {
            let u = Uniform::new(0.0f32, 1.0).unwrap();
            RgbdSample::new(ChannelMode::Rgbd, Array3::from_shape_fn((4, 16, 16), |_| u.sample(rng))).unwrap()
        };
        let test: Vec<PairedExample> = (0..3)
            .map(|i| PairedExample {
                item_id: format!("t{i}"),
                stimulus: rgbd(&mut rng),
                response: FmriVector::from_values(vec![0.0]).unwrap(),
            })
            .collect();
        let p: Vec<UnpairedExample> = (0..12)
            .map(|i| UnpairedExample {
                item_id: format!("u{i}"),
                stimulus: rgbd(&mut rng),
            })
            .collect();
        let ext = extractor();
        let c = cfg(vec![5]);
        let indirect = indirect_depth_eval(&Passthrough, &est, &test, &p, &ext, &c).unwrap();
        let est_depth: Vec<RgbdSample> = test.iter().map(|t| est.predict(&t.stimulus).unwrap()).collect();
        let direct = evaluate_reconstructions(&est_depth, &test, &p, &ext, MetricMode::Depth, &c).unwrap();
        assert_eq!(indirect.results, direct.results);
    }
}
