use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use depthdecode_core::analysis::{compute_vdsi, format_roi_table, roi_compare, vdsi_agreement, VdsiReport};
use depthdecode_core::config::ExperimentConfig;
use depthdecode_core::dataset::{load_dataset, Dataset};
use depthdecode_core::depth::{render_rgbd, train_depth_estimator, DepthEstimator, SceneSpec};
use depthdecode_core::encdec::{Decoder, Encoder};
use depthdecode_core::evaluation::{evaluate_testset, indirect_depth_eval, EvalReport, MetricMode};
use depthdecode_core::io::{read_raster, read_voxel_table, write_raster};
use depthdecode_core::nn::{derive_seed, MANIFEST_FILE};
use depthdecode_core::perceptual::{classification_dataset, pretrain_classifier, FeatureExtractor};
use depthdecode_core::pipeline::{normalized_responses, PipelineInputs};
use depthdecode_core::synth::build_benchmark;
use depthdecode_core::training::{
    train_decoder_phase2, train_encoder_phase1, train_rgb_only_with_depth_constraint, DepthConstraint, RunOutput,
};
use depthdecode_core::types::{ChannelMode, RgbdSample, VoxelMask};
use log::info;
use serde::Serialize;

use crate::manifest::Run;
use crate::plot;
use crate::{Cli, Command, ConfigArg, RunDirArgs};

/// Subdirectory of a run directory holding the final model checkpoint.
pub const MODEL_DIR: &str = "model";

pub enum Failure {
    Usage(String),
    Run(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Run(e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Unpaired,
    Test,
    Train,
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "unpaired" => Ok(Split::Unpaired),
            "test" => Ok(Split::Test),
            "train" => Ok(Split::Train),
            other => Err(format!("unknown split {other:?} (unpaired, test or train)")),
        }
    }
}

/// One-line JSON error for stderr, tagged with the failing error's kind.
pub fn structured_error(e: &anyhow::Error) -> String {
    use depthdecode_core::Error as E;
    let kind = match e.downcast_ref::<E>() {
        Some(E::Io { .. }) => "io",
        Some(E::Format { .. }) => "format",
        Some(E::Consistency { .. }) => "consistency",
        Some(E::Shape { .. }) => "shape",
        Some(E::ChannelMismatch { .. }) => "channel_mismatch",
        Some(E::Config(_)) => "config",
        Some(E::Invalid(_)) => "invalid",
        Some(E::MissingDepth(_)) => "missing_depth",
        Some(E::Diverged { .. }) => "diverged",
        Some(E::EncoderMutated { .. }) => "encoder_mutated",
        Some(E::InsufficientPool { .. }) => "insufficient_pool",
        Some(E::DuplicateCandidate(_)) => "duplicate_candidate",
        Some(E::Checkpoint { .. }) => "checkpoint",
        Some(E::OutputExists(_)) => "output_exists",
        Some(E::Image { .. }) => "image",
        None => "error",
    };
    serde_json::json!({ "error": kind, "message": format!("{e:#}") }).to_string()
}

fn config_of(arg: Option<&ConfigArg>) -> Result<ExperimentConfig> {
    let path = arg.and_then(|c| c.config.as_deref());
    Ok(ExperimentConfig::resolve(path)?)
}

fn config_arg(cmd: &Command) -> Option<&ConfigArg> {
    match cmd {
        Command::GenScenes { config, .. }
        | Command::GenBenchmark { config, .. }
        | Command::PretrainFeatures { config, .. }
        | Command::TrainDepthEst { config, .. }
        | Command::TrainEnc { config, .. }
        | Command::TrainDec { config, .. }
        | Command::TrainDecRgbConstrained { config, .. }
        | Command::Eval { config, .. }
        | Command::Vdsi { config, .. }
        | Command::RoiCompare { config, .. } => Some(config),
        Command::VdsiScatter { .. } | Command::PlotRanks { .. } => None,
    }
}

pub fn dispatch(cli: Cli) -> Result<(), Failure> {
    if cli.print_config {
        let cfg = config_of(cli.command.as_ref().and_then(config_arg))?;
        print!("{}", cfg.to_toml().map_err(anyhow::Error::from)?);
        return Ok(());
    }
    let Some(cmd) = cli.command else {
        return Err(Failure::Usage("a subcommand is required".into()));
    };
    let cfg = config_of(config_arg(&cmd))?;
    match cmd {
        Command::GenScenes {
            count,
            seed,
            out,
            config,
        } => gen_scenes(&cfg, config.config.as_deref(), count, seed, &out),
        Command::GenBenchmark { config, out, force } => gen_benchmark(&cfg, config.config.as_deref(), &out, force),
        Command::PretrainFeatures { mode, config, run } => {
            pretrain_features(&cfg, config.config.as_deref(), mode, &run)
        }
        Command::TrainDepthEst {
            config,
            data,
            count,
            run,
        } => train_depth_est(&cfg, config.config.as_deref(), data.as_deref(), count, &run),
        Command::TrainEnc {
            mode,
            config,
            data,
            features,
            run,
        } => train_enc(cfg, config.config.as_deref(), mode, &data, &features, &run),
        Command::TrainDec {
            mode,
            config,
            data,
            features,
            enc,
            supervised_only,
            run,
        } => train_dec(
            cfg,
            config.config.as_deref(),
            mode,
            &data,
            &features,
            &enc,
            supervised_only,
            &run,
        ),
        Command::TrainDecRgbConstrained {
            config,
            data,
            features,
            enc,
            depth_est,
            depth_features,
            loss,
            run,
        } => train_dec_constrained(
            cfg,
            config.config.as_deref(),
            &data,
            &features,
            &enc,
            &depth_est,
            depth_features.as_deref(),
            loss,
            &run,
        ),
        Command::Eval {
            config,
            data,
            dec,
            depth_features,
            features,
            depth_est,
            metric,
            out,
        } => eval(
            &cfg,
            config.config.as_deref(),
            &data,
            &dec,
            EvalModels {
                depth_features: depth_features.as_deref(),
                features: features.as_deref(),
                depth_est: depth_est.as_deref(),
            },
            metric,
            &out,
        ),
        Command::Vdsi {
            config,
            enc,
            data,
            split,
            samples,
            offset,
            out,
        } => vdsi(
            &cfg,
            config.config.as_deref(),
            &enc,
            &data,
            split,
            samples,
            offset,
            &out,
        ),
        Command::VdsiScatter { a, b, out } => vdsi_scatter(&a, &b, &out),
        Command::RoiCompare {
            mask,
            mode,
            config,
            data,
            features,
            depth_features,
            depth_est,
            sets,
            run,
        } => roi(
            cfg,
            mode,
            config.config.as_deref(),
            &mask,
            &data,
            &features,
            &depth_features,
            depth_est.as_deref(),
            &sets,
            &run,
        ),
        Command::PlotRanks { reports, out } => plot_ranks(&reports, &out),
    }
    .map_err(Failure::Run)
}

/// Resolves a checkpoint given either its own directory or a run directory
/// holding it under `model/`.
pub fn checkpoint_dir(path: &Path) -> Result<PathBuf> {
    if path.join(MANIFEST_FILE).is_file() {
        return Ok(path.to_path_buf());
    }
    let nested = path.join(MODEL_DIR);
    if nested.join(MANIFEST_FILE).is_file() {
        return Ok(nested);
    }
    Err(depthdecode_core::Error::Checkpoint {
        path: path.to_path_buf(),
        reason: "no checkpoint found".into(),
    }
    .into())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn record_config(run: &mut Run, cfg: &ExperimentConfig, file: Option<&Path>) -> Result<()> {
    run.config(cfg);
    if let Some(f) = file {
        run.input("config", f)?;
    }
    Ok(())
}

fn start_dir_run(
    command: &str,
    args: &RunDirArgs,
    cfg: &ExperimentConfig,
    file: Option<&Path>,
    inputs: &[(&str, &Path)],
) -> Result<Option<Run>> {
    let mut run = Run::in_dir(command, &args.out)?;
    record_config(&mut run, cfg, file)?;
    for (label, path) in inputs {
        run.input(label, path)?;
    }
    if run.up_to_date(args.resume, args.force)? {
        info!(
            "{}: inputs unchanged and outputs present, nothing to do",
            args.out.display()
        );
        return Ok(None);
    }
    Ok(Some(run))
}

fn load_data(data: &Path, cfg: &ExperimentConfig) -> Result<Dataset> {
    let ds = load_dataset(data, ChannelMode::Rgbd)?;
    let (ds, _) = normalized_responses(&ds, cfg.pipeline.normalize_fmri)?;
    Ok(ds)
}

fn load_extractor(path: &Path) -> Result<FeatureExtractor> {
    Ok(FeatureExtractor::load(&checkpoint_dir(path)?)?)
}

fn load_encoder(path: &Path) -> Result<Encoder> {
    Ok(Encoder::load(&checkpoint_dir(path)?)?)
}

fn load_estimator(path: &Path) -> Result<DepthEstimator> {
    Ok(DepthEstimator::load(&checkpoint_dir(path)?)?)
}

fn gen_scenes(cfg: &ExperimentConfig, file: Option<&Path>, count: usize, seed: u64, out: &Path) -> Result<()> {
    if count == 0 {
        bail!("--count must be at least 1");
    }
    let mut run = Run::in_dir("gen-scenes", out)?;
    record_config(&mut run, cfg, file)?;
    let mut specs = Vec::with_capacity(count);
    for i in 0..count {
        let spec = SceneSpec::random(derive_seed(seed, &format!("scene/{i}")), &cfg.benchmark.scene);
        let sample = render_rgbd(&spec)?;
        let path = out.join(format!("scene_{i:05}.ddr"));
        write_raster(&path, sample.raster())?;
        run.output(&path);
        specs.push(spec);
    }
    let specs_path = out.join("scenes.json");
    write_json(&specs_path, &specs)?;
    run.output(&specs_path);
    run.finish()?;
    info!("wrote {count} scenes to {}", out.display());
    Ok(())
}

fn gen_benchmark(cfg: &ExperimentConfig, file: Option<&Path>, out: &Path, force: bool) -> Result<()> {
    let manifest = build_benchmark(&cfg.benchmark, out, force)?;
    let mut run = Run::in_dir("gen-benchmark", out)?;
    record_config(&mut run, cfg, file)?;
    run.output(&out.join(depthdecode_core::synth::MANIFEST_FILE));
    run.finish()?;
    info!(
        "benchmark with {:?} paired-train/paired-test/unpaired items written to {}",
        manifest.counts,
        out.display()
    );
    Ok(())
}

fn pretrain_features(cfg: &ExperimentConfig, file: Option<&Path>, mode: ChannelMode, args: &RunDirArgs) -> Result<()> {
    let Some(mut run) = start_dir_run("pretrain-features", args, cfg, file, &[])? else {
        return Ok(());
    };
    let data = classification_dataset(cfg.pretrain.samples, mode, &cfg.benchmark.scene, cfg.pretrain.seed)?;
    let (ext, report) = pretrain_classifier(&data, &cfg.pretrain)?;
    let model = args.out.join(MODEL_DIR);
    ext.save(
        &model,
        &[
            ("mode", mode.to_string()),
            ("val_accuracy", report.val_accuracy.to_string()),
        ],
    )?;
    let report_path = args.out.join("report.json");
    write_json(&report_path, &report)?;
    run.output(&model);
    run.output(&report_path);
    run.finish()?;
    info!("{mode} extractor validation accuracy {:.4}", report.val_accuracy);
    Ok(())
}

fn read_scene_dir(dir: &Path) -> Result<Vec<RgbdSample>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ddr"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no .ddr rasters in {}", dir.display());
    }
    paths
        .iter()
        .map(|p| {
            let raster = read_raster(p)?;
            RgbdSample::new(ChannelMode::Rgbd, raster).with_context(|| format!("{} is not an RGBD raster", p.display()))
        })
        .collect()
}

fn train_depth_est(
    cfg: &ExperimentConfig,
    file: Option<&Path>,
    data: Option<&Path>,
    count: usize,
    args: &RunDirArgs,
) -> Result<()> {
    let inputs: Vec<(&str, &Path)> = data.map(|d| vec![("data", d)]).unwrap_or_default();
    let Some(mut run) = start_dir_run("train-depth-est", args, cfg, file, &inputs)? else {
        return Ok(());
    };
    let samples = match data {
        Some(d) => read_scene_dir(d)?,
        None => (0..count)
            .map(|i| {
                let spec = SceneSpec::random(
                    derive_seed(cfg.depth_estimator.seed, &format!("scene/{i}")),
                    &cfg.benchmark.scene,
                );
                render_rgbd(&spec)
            })
            .collect::<depthdecode_core::Result<_>>()?,
    };
    let (est, report) = train_depth_estimator(&samples, &cfg.depth_estimator)?;
    let model = args.out.join(MODEL_DIR);
    est.save(&model)?;
    let report_path = args.out.join("report.json");
    write_json(&report_path, &report)?;
    run.output(&model);
    run.output(&report_path);
    run.finish()?;
    info!(
        "depth estimator validation MAE {:.4} (mean baseline {:.4})",
        report.val_mae, report.mean_baseline_mae
    );
    Ok(())
}

fn train_enc(
    mut cfg: ExperimentConfig,
    file: Option<&Path>,
    mode: ChannelMode,
    data: &Path,
    features: &Path,
    args: &RunDirArgs,
) -> Result<()> {
    cfg.pipeline.train.mode = mode;
    let Some(mut run) = start_dir_run("train-enc", args, &cfg, file, &[("data", data), ("features", features)])? else {
        return Ok(());
    };
    let ext = load_extractor(features)?;
    let ds = load_data(data, &cfg)?.with_mode(mode)?;
    let (enc, report) = train_encoder_phase1(&ds.paired_train, &ext, &cfg.pipeline.train, &RunOutput::at(&args.out))?;
    let model = args.out.join(MODEL_DIR);
    enc.save(&model)?;
    let report_path = args.out.join("report.json");
    write_json(&report_path, &report)?;
    run.output(&model);
    run.output(&report_path);
    run.finish()?;
    info!(
        "encoder best epoch {} validation loss {:.4}",
        report.best_epoch, report.val_loss
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_dec(
    mut cfg: ExperimentConfig,
    file: Option<&Path>,
    mode: ChannelMode,
    data: &Path,
    features: &Path,
    enc: &Path,
    supervised_only: bool,
    args: &RunDirArgs,
) -> Result<()> {
    cfg.pipeline.train.mode = mode;
    cfg.pipeline.use_unpaired = !supervised_only;
    let inputs = [("data", data), ("features", features), ("encoder", enc)];
    let Some(run) = start_dir_run("train-dec", args, &cfg, file, &inputs)? else {
        return Ok(());
    };
    let ext = load_extractor(features)?;
    let encoder = load_encoder(enc)?;
    let ds = load_data(data, &cfg)?.with_mode(mode)?;
    let unpaired = if cfg.pipeline.use_unpaired {
        &ds.unpaired[..]
    } else {
        &[]
    };
    let (dec, report) = train_decoder_phase2(
        &ds.paired_train,
        unpaired,
        &encoder,
        &ext,
        &cfg.pipeline.train,
        &RunOutput::at(&args.out),
    )?;
    finish_decoder(run, args, &dec, &report)
}

fn finish_decoder(
    mut run: Run,
    args: &RunDirArgs,
    dec: &Decoder,
    report: &depthdecode_core::training::DecoderReport,
) -> Result<()> {
    let model = args.out.join(MODEL_DIR);
    dec.save(&model)?;
    let report_path = args.out.join("report.json");
    write_json(&report_path, report)?;
    run.output(&model);
    run.output(&report_path);
    run.finish()?;
    info!(
        "decoder best epoch {} validation loss {:.4}",
        report.best_epoch, report.val_loss
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_dec_constrained(
    mut cfg: ExperimentConfig,
    file: Option<&Path>,
    data: &Path,
    features: &Path,
    enc: &Path,
    depth_est: &Path,
    depth_features: Option<&Path>,
    loss: depthdecode_core::training::DepthLossKind,
    args: &RunDirArgs,
) -> Result<()> {
    cfg.pipeline.train.mode = ChannelMode::Rgb;
    let mut inputs = vec![
        ("data", data),
        ("features", features),
        ("encoder", enc),
        ("depth_estimator", depth_est),
    ];
    if let Some(df) = depth_features {
        inputs.push(("depth_features", df));
    }
    let Some(run) = start_dir_run("train-dec-rgb-constrained", args, &cfg, file, &inputs)? else {
        return Ok(());
    };
    let ext = load_extractor(features)?;
    let encoder = load_encoder(enc)?;
    let estimator = load_estimator(depth_est)?;
    let depth_ext = depth_features.map(load_extractor).transpose()?;
    let ds = load_data(data, &cfg)?.with_mode(ChannelMode::Rgb)?;
    let unpaired = if cfg.pipeline.use_unpaired {
        &ds.unpaired[..]
    } else {
        &[]
    };
    let constraint = DepthConstraint {
        estimator: &estimator,
        kind: loss,
        depth_extractor: depth_ext.as_ref(),
    };
    let (dec, report) = train_rgb_only_with_depth_constraint(
        &ds.paired_train,
        unpaired,
        &encoder,
        &ext,
        constraint,
        &cfg.pipeline.train,
        &RunOutput::at(&args.out),
    )?;
    finish_decoder(run, args, &dec, &report)
}

pub struct EvalModels<'a> {
    pub depth_features: Option<&'a Path>,
    pub features: Option<&'a Path>,
    pub depth_est: Option<&'a Path>,
}

fn eval(
    cfg: &ExperimentConfig,
    file: Option<&Path>,
    data: &Path,
    dec: &Path,
    models: EvalModels<'_>,
    metric: MetricMode,
    out: &Path,
) -> Result<()> {
    let dec_dir = checkpoint_dir(dec)?;
    let scorer = match metric {
        MetricMode::Depth => models
            .depth_features
            .ok_or_else(|| anyhow!("--metric depth needs --depth-features"))?,
        MetricMode::Rgb => models
            .features
            .ok_or_else(|| anyhow!("--metric rgb needs --features"))?,
    };
    let mut run = Run::for_file("eval", out)?;
    record_config(&mut run, cfg, file)?;
    run.input("data", data)?;
    run.input("decoder", &dec_dir)?;
    run.input("scorer", scorer)?;
    let decoder = Decoder::load(&dec_dir)?;
    let ext = load_extractor(scorer)?;
    let ds = load_data(data, cfg)?;
    let report: EvalReport = match metric {
        MetricMode::Depth if !decoder.mode().has_depth() => {
            let est_path = models.depth_est.ok_or_else(|| {
                anyhow!(
                    "decoder reconstructs {} only; depth evaluation needs --depth-est",
                    decoder.mode()
                )
            })?;
            run.input("depth_estimator", est_path)?;
            let est = load_estimator(est_path)?;
            indirect_depth_eval(&decoder, &est, &ds.paired_test, &ds.unpaired, &ext, &cfg.pipeline.eval)?
        }
        _ => evaluate_testset(
            &decoder,
            &ds.paired_test,
            &ds.unpaired,
            &ext,
            metric,
            &cfg.pipeline.eval,
        )?,
    };
    write_json(out, &report)?;
    run.output(out);
    run.finish()?;
    for r in &report.results {
        info!(
            "n={:>5} mean rank {:.2} [{:.2}, {:.2}] chance {:.1}",
            r.n, r.mean_rank, r.ci_low, r.ci_high, r.chance
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn vdsi(
    cfg: &ExperimentConfig,
    file: Option<&Path>,
    enc: &Path,
    data: &Path,
    split: Split,
    samples: Option<usize>,
    offset: usize,
    out: &Path,
) -> Result<()> {
    let enc_dir = checkpoint_dir(enc)?;
    let mut run = Run::for_file("vdsi", out)?;
    record_config(&mut run, cfg, file)?;
    run.input("encoder", &enc_dir)?;
    run.input("data", data)?;
    let encoder = Encoder::load(&enc_dir)?;
    let ds = load_dataset(data, ChannelMode::Rgbd)?;
    let stimuli: Vec<RgbdSample> = match split {
        Split::Unpaired => ds.unpaired.iter().map(|u| u.stimulus.clone()).collect(),
        Split::Test => ds.paired_test.iter().map(|p| p.stimulus.clone()).collect(),
        Split::Train => ds.paired_train.iter().map(|p| p.stimulus.clone()).collect(),
    };
    let end = samples.map_or(stimuli.len(), |n| (offset + n).min(stimuli.len()));
    if offset >= end {
        bail!("split has {} stimuli; offset {offset} leaves none", stimuli.len());
    }
    let mut report = compute_vdsi(&encoder, encoder.voxel_ids(), &stimuli[offset..end], &cfg.vdsi)?;
    if let Some(mask) = &ds.mask {
        report = report.with_regions(mask);
    }
    write_json(out, &report)?;
    run.output(out);
    run.finish()?;
    info!(
        "VDSI over {} stimuli for {} voxels",
        report.samples,
        report.entries.len()
    );
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn vdsi_scatter(a: &Path, b: &Path, out: &Path) -> Result<()> {
    let mut run = Run::for_file("vdsi-scatter", out)?;
    run.input("a", a)?;
    run.input("b", b)?;
    let ra: VdsiReport = read_json(a)?;
    let rb: VdsiReport = read_json(b)?;
    let agreement = vdsi_agreement(&ra, &rb)?;
    let labels = (a.display().to_string(), b.display().to_string());
    let sidecar = plot::plot_vdsi_scatter(&ra, &rb, (&labels.0, &labels.1), &agreement, out)?;
    run.output(out);
    run.output(&sidecar);
    run.finish()?;
    info!(
        "VDSI agreement r = {:.4} over {} voxels ({} excluded)",
        agreement.pearson, agreement.count, agreement.excluded
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn roi(
    mut cfg: ExperimentConfig,
    mode: Option<ChannelMode>,
    file: Option<&Path>,
    mask_path: &Path,
    data: &Path,
    features: &Path,
    depth_features: &Path,
    depth_est: Option<&Path>,
    sets: &[depthdecode_core::types::RegionSet],
    args: &RunDirArgs,
) -> Result<()> {
    let mut inputs = vec![
        ("mask", mask_path),
        ("data", data),
        ("features", features),
        ("depth_features", depth_features),
    ];
    if let Some(e) = depth_est {
        inputs.push(("depth_estimator", e));
    }
    if let Some(m) = mode {
        cfg.pipeline.train.mode = m;
    }
    let Some(mut run) = start_dir_run("roi-compare", args, &cfg, file, &inputs)? else {
        return Ok(());
    };
    let mask = VoxelMask::new(read_voxel_table(mask_path)?)?;
    let ext = load_extractor(features)?;
    let depth_ext = load_extractor(depth_features)?;
    let est = depth_est.map(load_estimator).transpose()?;
    let ds = load_dataset(data, ChannelMode::Rgbd)?;
    let inputs = PipelineInputs {
        extractor: &ext,
        depth_metric: &depth_ext,
        estimator: est.as_ref(),
        depth_loss: None,
    };
    let rows = roi_compare(&ds, &mask, sets, inputs, &cfg.pipeline, Some(&args.out))?;
    let json_path = args.out.join("roi.json");
    write_json(&json_path, &rows)?;
    let table = format_roi_table(&rows);
    let table_path = args.out.join("roi.txt");
    fs::write(&table_path, &table).with_context(|| format!("writing {}", table_path.display()))?;
    run.output(&json_path);
    run.output(&table_path);
    run.finish()?;
    print!("{table}");
    Ok(())
}

fn plot_ranks(reports: &[PathBuf], out: &Path) -> Result<()> {
    let mut run = Run::for_file("plot-ranks", out)?;
    let mut loaded = Vec::with_capacity(reports.len());
    for (i, p) in reports.iter().enumerate() {
        run.input(&format!("report{i}"), p)?;
        let label = p
            .file_stem()
            .map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
        loaded.push((label, read_json::<EvalReport>(p)?));
    }
    let sidecar = plot::plot_ranks(&loaded, out)?;
    run.output(out);
    run.output(&sidecar);
    run.finish()?;
    Ok(())
}
