use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use depthdecode_core::config::ExperimentConfig;
use serde_json::Value;

const SUBCOMMANDS: [&str; 12] = [
    "gen-scenes",
    "gen-benchmark",
    "pretrain-features",
    "train-depth-est",
    "train-enc",
    "train-dec",
    "train-dec-rgb-constrained",
    "eval",
    "vdsi",
    "vdsi-scatter",
    "roi-compare",
    "plot-ranks",
];

const SMOKE_CONFIG: &str = r#"
[benchmark]
seed = 5
paired_train = 12
paired_test = 4
unpaired = 30

[benchmark.scene]
resolution = 32

[benchmark.brain]
voxels = 24
grid = 4
depth_only = 3
color_only = 3

[pretrain]
samples = 40
epochs = 1

[pretrain.extractor]
widths = [4, 4, 4, 4, 4]

[depth_estimator]
epochs = 1
width = 4

[pipeline.train]
encoder_epochs = 2
decoder_epochs = 2
paired_batch = 4
unpaired_batch = 4

[pipeline.train.decoder]
lift_channels = 8
widths = [8, 8, 4, 4]

[pipeline.eval]
n_list = [5, 10]
bootstrap_iterations = 1000
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_depthdecode"));
    c.env_remove("DEPTHDECODE_SEED").env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn help_lists_every_subcommand() {
    let out = run(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in SUBCOMMANDS {
        assert!(text.contains(sub), "help lacks {sub}");
    }
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(run(&["eval", "--bogus-flag"]).status.code(), Some(2));
    assert_eq!(run(&[]).status.code(), Some(2));
}

#[test]
fn eval_with_missing_checkpoint_names_the_path() {
    let d = tempfile::tempdir().unwrap();
    let missing = d.path().join("no_decoder_here");
    let out = run(&[
        "eval",
        "--data",
        d.path().to_str().unwrap(),
        "--dec",
        missing.to_str().unwrap(),
        "--depth-features",
        d.path().to_str().unwrap(),
        "--out",
        d.path().join("r.json").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    let line = err.lines().last().unwrap();
    let v: Value = serde_json::from_str(line).expect("structured error");
    assert_eq!(v["error"], "checkpoint");
    assert!(v["message"].as_str().unwrap().contains("no_decoder_here"));
}

#[test]
fn print_config_round_trips_and_honors_seed_override() {
    let out = ok(&["--print-config"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), ExperimentConfig::default());

    let out = bin()
        .args(["--print-config"])
        .env("DEPTHDECODE_SEED", "77")
        .output()
        .unwrap();
    let cfg = ExperimentConfig::from_toml(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(cfg.pipeline.train.seed, 77);
    assert_eq!(cfg.benchmark.seed, 77);

    let out = bin()
        .args(["--print-config"])
        .env("DEPTHDECODE_SEED", "abc")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn invalid_config_exits_one() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("bad.toml");
    fs::write(&cfg, "[pipeline.train]\npaired_batch = 0\n").unwrap();
    let out = run(&[
        "gen-benchmark",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        d.path().join("b").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let v: Value = serde_json::from_str(String::from_utf8_lossy(&out.stderr).lines().last().unwrap()).unwrap();
    assert_eq!(v["error"], "config");
}

#[test]
fn smoke_pipeline_produces_complete_reports() {
    let d = tempfile::tempdir().unwrap();
    let p = |s: &str| d.path().join(s).to_str().unwrap().to_string();
    fs::write(d.path().join("smoke.toml"), SMOKE_CONFIG).unwrap();
    let cfg = p("smoke.toml");

    ok(&["gen-benchmark", "--config", &cfg, "--out", &p("bench")]);
    let bench_manifest = read_json(&d.path().join("bench/manifest.json"));
    assert_eq!(bench_manifest["counts"], serde_json::json!([12, 4, 30]));
    // a second build into the same directory needs --force
    assert_eq!(
        run(&["gen-benchmark", "--config", &cfg, "--out", &p("bench")])
            .status
            .code(),
        Some(1)
    );

    ok(&[
        "pretrain-features",
        "--mode",
        "rgbd",
        "--config",
        &cfg,
        "--out",
        &p("ext4"),
    ]);
    ok(&[
        "pretrain-features",
        "--mode",
        "d",
        "--config",
        &cfg,
        "--out",
        &p("ext1"),
    ]);
    ok(&[
        "train-enc",
        "--mode",
        "rgbd",
        "--config",
        &cfg,
        "--data",
        &p("bench"),
        "--features",
        &p("ext4"),
        "--out",
        &p("enc"),
    ]);
    assert!(d.path().join("enc/progress.jsonl").is_file());
    ok(&[
        "train-dec",
        "--mode",
        "rgbd",
        "--config",
        &cfg,
        "--data",
        &p("bench"),
        "--features",
        &p("ext4"),
        "--enc",
        &p("enc"),
        "--out",
        &p("dec"),
    ]);
    ok(&[
        "eval",
        "--config",
        &cfg,
        "--data",
        &p("bench"),
        "--dec",
        &p("dec"),
        "--depth-features",
        &p("ext1"),
        "--out",
        &p("eval/rgbd.json"),
    ]);

    let report = read_json(&d.path().join("eval/rgbd.json"));
    for key in [
        "metric",
        "seed",
        "bootstrap_iterations",
        "level",
        "test_items",
        "pool_items",
        "results",
    ] {
        assert!(report.get(key).is_some(), "eval report lacks {key}");
    }
    let results = report["results"].as_array().unwrap();
    assert_eq!(results.len(), 2);
    for r in results {
        for key in ["n", "mean_rank", "ci_low", "ci_high", "chance", "items"] {
            assert!(r.get(key).is_some(), "rank result lacks {key}");
        }
        assert_eq!(r["items"].as_array().unwrap().len(), 4);
    }
    assert!(d.path().join("eval/rgbd.json.manifest.json").is_file());

    ok(&[
        "vdsi",
        "--enc",
        &p("enc"),
        "--data",
        &p("bench"),
        "--samples",
        "10",
        "--out",
        &p("vdsi_a.json"),
    ]);
    ok(&[
        "vdsi",
        "--enc",
        &p("enc"),
        "--data",
        &p("bench"),
        "--samples",
        "10",
        "--offset",
        "10",
        "--out",
        &p("vdsi_b.json"),
    ]);
    let vd = read_json(&d.path().join("vdsi_a.json"));
    assert_eq!(vd["entries"].as_array().unwrap().len(), 24);
    assert!(vd["entries"][0].get("region").is_some());

    ok(&[
        "vdsi-scatter",
        &p("vdsi_a.json"),
        &p("vdsi_b.json"),
        "--out",
        &p("scatter.png"),
    ]);
    assert!(d.path().join("scatter.png").is_file());
    assert!(read_json(&d.path().join("scatter.json"))["pearson"].is_number());

    ok(&["plot-ranks", &p("eval/rgbd.json"), "--out", &p("ranks.png")]);
    assert!(d.path().join("ranks.png").is_file());
    assert_eq!(
        read_json(&d.path().join("ranks.json"))["series"][0]["n"],
        serde_json::json!([5, 10])
    );

    // manifests snapshot the effective configuration
    let m = read_json(&d.path().join("enc/run_manifest.json"));
    assert_eq!(m["command"], "train-enc");
    assert!(m["inputs"]["data"]["sha256"].as_str().unwrap().len() == 64);
    let snapshot: ExperimentConfig = serde_json::from_value(m["config"].clone()).unwrap();
    let mut expected = ExperimentConfig::from_toml(SMOKE_CONFIG).unwrap();
    expected.pipeline.train.mode = depthdecode_core::types::ChannelMode::Rgbd;
    assert_eq!(snapshot, expected);

    // resume skips an unchanged run and refuses a changed input
    let enc_args = [
        "train-enc",
        "--mode",
        "rgbd",
        "--config",
        &cfg,
        "--data",
        &p("bench"),
        "--features",
        &p("ext4"),
        "--out",
        &p("enc"),
    ];
    assert_eq!(run(&enc_args).status.code(), Some(1));
    let mut resume = enc_args.to_vec();
    resume.push("--resume");
    ok(&resume);
    fs::write(d.path().join("bench/paired_train/extra.txt"), "x").unwrap();
    let out = run(&resume);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("changed"));
}

#[test]
fn scenes_feed_the_depth_estimator() {
    let d = tempfile::tempdir().unwrap();
    let p = |s: &str| d.path().join(s).to_str().unwrap().to_string();
    fs::write(d.path().join("c.toml"), SMOKE_CONFIG).unwrap();
    ok(&[
        "gen-scenes",
        "--count",
        "6",
        "--seed",
        "3",
        "--config",
        &p("c.toml"),
        "--out",
        &p("scenes"),
    ]);
    assert_eq!(fs::read_dir(d.path().join("scenes")).unwrap().count(), 8);
    ok(&[
        "train-depth-est",
        "--config",
        &p("c.toml"),
        "--data",
        &p("scenes"),
        "--out",
        &p("est"),
    ]);
    let report = read_json(&d.path().join("est/report.json"));
    assert!(report["val_mae"].is_number());
    assert!(d.path().join("est/model/manifest.txt").is_file());
}

#[test]
fn rgb_constrained_and_roi_commands_run() {
    let d = tempfile::tempdir().unwrap();
    let p = |s: &str| d.path().join(s).to_str().unwrap().to_string();
    fs::write(d.path().join("c.toml"), SMOKE_CONFIG).unwrap();
    let cfg = p("c.toml");
    ok(&["gen-benchmark", "--config", &cfg, "--out", &p("bench")]);
    ok(&[
        "pretrain-features",
        "--mode",
        "rgb",
        "--config",
        &cfg,
        "--out",
        &p("ext3"),
    ]);
    ok(&[
        "pretrain-features",
        "--mode",
        "d",
        "--config",
        &cfg,
        "--out",
        &p("ext1"),
    ]);
    ok(&["train-depth-est", "--config", &cfg, "--count", "8", "--out", &p("est")]);
    ok(&[
        "train-enc",
        "--mode",
        "rgb",
        "--config",
        &cfg,
        "--data",
        &p("bench"),
        "--features",
        &p("ext3"),
        "--out",
        &p("enc"),
    ]);
    ok(&[
        "train-dec-rgb-constrained",
        "--config",
        &cfg,
        "--data",
        &p("bench"),
        "--features",
        &p("ext3"),
        "--enc",
        &p("enc"),
        "--depth-est",
        &p("est"),
        "--depth-features",
        &p("ext1"),
        "--loss",
        "perceptual",
        "--out",
        &p("dec"),
    ]);
    let report = read_json(&d.path().join("dec/report.json"));
    assert!(report["records"][0]["terms"].get("dec_depth").is_some());

    // an rgb decoder needs the estimator for depth ranking
    let (bench, dec, ext1) = (p("bench"), p("dec"), p("ext1"));
    let eval = |extra: &[&str]| {
        let mut a = vec![
            "eval",
            "--config",
            &cfg,
            "--data",
            &bench,
            "--dec",
            &dec,
            "--depth-features",
            &ext1,
        ];
        a.extend_from_slice(extra);
        run(&a)
    };
    assert_eq!(eval(&["--out", &p("e0.json")]).status.code(), Some(1));
    let out = eval(&["--depth-est", &p("est"), "--out", &p("e1.json")]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read_json(&d.path().join("e1.json"))["metric"], "depth");

    let bad_loss = run(&[
        "train-dec-rgb-constrained",
        "--loss",
        "l2",
        "--data",
        "x",
        "--features",
        "x",
        "--enc",
        "x",
        "--depth-est",
        "x",
        "--out",
        "x",
    ]);
    assert_eq!(bad_loss.status.code(), Some(2));

    ok(&[
        "roi-compare",
        "--mask",
        &p("bench/fmri/voxels.csv"),
        "--mode",
        "rgb",
        "--config",
        &cfg,
        "--data",
        &p("bench"),
        "--features",
        &p("ext3"),
        "--depth-features",
        &p("ext1"),
        "--depth-est",
        &p("est"),
        "--sets",
        "lvc,hvc",
        "--out",
        &p("roi"),
    ]);
    let rows = read_json(&d.path().join("roi/roi.json"));
    assert_eq!(rows.as_array().unwrap().len(), 2);
    assert!(fs::read_to_string(d.path().join("roi/roi.txt"))
        .unwrap()
        .contains("LVC"));
}
