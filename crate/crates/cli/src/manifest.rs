//! Run manifests: what ran, with which configuration and inputs, and what it
//! wrote.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use depthdecode_core::config::ExperimentConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Manifest file inside a run directory.
pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: Option<ExperimentConfig>,
    pub seeds: BTreeMap<String, u64>,
    pub version: String,
    /// Input label to its path and content checksum.
    pub inputs: BTreeMap<String, InputRecord>,
    /// Paths relative to the manifest's directory.
    pub outputs: Vec<String>,
    pub wall_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub path: String,
    pub sha256: String,
}

impl RunManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Named seeds of every configuration section.
pub fn seeds_of(cfg: &ExperimentConfig) -> BTreeMap<String, u64> {
    BTreeMap::from([
        ("benchmark".to_string(), cfg.benchmark.seed),
        ("pretrain".to_string(), cfg.pretrain.seed),
        ("depth_estimator".to_string(), cfg.depth_estimator.seed),
        ("train".to_string(), cfg.pipeline.train.seed),
        ("eval".to_string(), cfg.pipeline.eval.seed),
    ])
}

fn hash_file(path: &Path, h: &mut Sha256) -> Result<()> {
    let mut f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f
            .read(&mut buf)
            .with_context(|| format!("reading {}", path.display()))?;
        if n == 0 {
            return Ok(());
        }
        h.update(&buf[..n]);
    }
}

fn walk(dir: &Path, rel: &Path, out: &mut Vec<(PathBuf, PathBuf)>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let path = e.path();
        let r = rel.join(e.file_name());
        if path.is_dir() {
            walk(&path, &r, out)?;
        } else {
            out.push((r, path));
        }
    }
    Ok(())
}

/// Sha256 of a file, or of a directory tree's relative paths and contents.
pub fn checksum(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    if path.is_dir() {
        let mut files = Vec::new();
        walk(path, Path::new(""), &mut files)?;
        for (rel, full) in files {
            h.update(rel.to_string_lossy().as_bytes());
            h.update([0u8]);
            hash_file(&full, &mut h)?;
        }
    } else {
        hash_file(path, &mut h)?;
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Bookkeeping for one command invocation.
pub struct Run {
    manifest_path: PathBuf,
    base: PathBuf,
    started: Instant,
    manifest: RunManifest,
}

impl Run {
    /// A run whose outputs live in directory `dir`.
    pub fn in_dir(command: &str, dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self::new(command, dir.join(RUN_MANIFEST), dir.to_path_buf()))
    }

    /// A run producing the single file `out`; its manifest sits beside it.
    pub fn for_file(command: &str, out: &Path) -> Result<Self> {
        let parent = out
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        let name = out
            .file_name()
            .with_context(|| format!("{} is not a file path", out.display()))?
            .to_string_lossy();
        Ok(Self::new(
            command,
            parent.join(format!("{name}.manifest.json")),
            parent.to_path_buf(),
        ))
    }

    fn new(command: &str, manifest_path: PathBuf, base: PathBuf) -> Self {
        Self {
            manifest_path,
            base,
            started: Instant::now(),
            manifest: RunManifest {
                command: command.to_string(),
                args: std::env::args().skip(1).collect(),
                config: None,
                seeds: BTreeMap::new(),
                version: env!("CARGO_PKG_VERSION").to_string(),
                inputs: BTreeMap::new(),
                outputs: Vec::new(),
                wall_s: 0.0,
            },
        }
    }

    pub fn config(&mut self, cfg: &ExperimentConfig) {
        self.manifest.seeds = seeds_of(cfg);
        self.manifest.config = Some(cfg.clone());
    }

    pub fn input(&mut self, label: &str, path: &Path) -> Result<()> {
        let sha256 = checksum(path)?;
        self.manifest.inputs.insert(
            label.to_string(),
            InputRecord {
                path: path.display().to_string(),
                sha256,
            },
        );
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        let rel = path.strip_prefix(&self.base).unwrap_or(path);
        self.manifest.outputs.push(rel.display().to_string());
    }

    /// Compares against an existing manifest. Returns true when `resume`
    /// finds identical inputs and every recorded output still present.
    pub fn up_to_date(&self, resume: bool, force: bool) -> Result<bool> {
        if !self.manifest_path.exists() {
            return Ok(false);
        }
        if force {
            return Ok(false);
        }
        if !resume {
            bail!(
                "{} already holds a run manifest; pass --resume to validate it or --force to overwrite",
                self.manifest_path.display()
            );
        }
        let old = RunManifest::read(&self.manifest_path)?;
        if old.command != self.manifest.command {
            bail!(
                "{} was written by `{}`, not `{}`",
                self.manifest_path.display(),
                old.command,
                self.manifest.command
            );
        }
        for (label, rec) in &self.manifest.inputs {
            match old.inputs.get(label) {
                Some(o) if o.sha256 == rec.sha256 => {}
                Some(_) => bail!("input {label} ({}) changed since the recorded run", rec.path),
                None => bail!("input {label} ({}) is not part of the recorded run", rec.path),
            }
        }
        if old.config != self.manifest.config {
            bail!("configuration differs from the recorded run");
        }
        Ok(old.outputs.iter().all(|o| self.base.join(o).exists()))
    }

    pub fn finish(mut self) -> Result<RunManifest> {
        self.manifest.wall_s = self.started.elapsed().as_secs_f64();
        let text = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(&self.manifest_path, text).with_context(|| format!("writing {}", self.manifest_path.display()))?;
        Ok(self.manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn directory_checksum_tracks_names_and_contents() {
        let d = tempfile::tempdir().unwrap();
        fs::write(d.path().join("a"), b"1").unwrap();
        fs::create_dir(d.path().join("sub")).unwrap();
        fs::write(d.path().join("sub/b"), b"2").unwrap();
        let first = checksum(d.path()).unwrap();
        assert_eq!(first, checksum(d.path()).unwrap());
        fs::write(d.path().join("sub/b"), b"3").unwrap();
        assert_ne!(first, checksum(d.path()).unwrap());
    }

    #[test]
    fn resume_detects_changed_input() {
        let d = tempfile::tempdir().unwrap();
        let input = d.path().join("in.txt");
        fs::write(&input, b"x").unwrap();
        let out = d.path().join("run");
        let mut run = Run::in_dir("cmd", &out).unwrap();
        run.input("data", &input).unwrap();
        let file = out.join("result.json");
        fs::write(&file, b"{}").unwrap();
        run.output(&file);
        run.finish().unwrap();

        let mut again = Run::in_dir("cmd", &out).unwrap();
        again.input("data", &input).unwrap();
        assert!(again.up_to_date(true, false).unwrap());
        assert!(again.up_to_date(false, false).is_err());
        assert!(!again.up_to_date(false, true).unwrap());

        fs::write(&input, b"y").unwrap();
        let mut changed = Run::in_dir("cmd", &out).unwrap();
        changed.input("data", &input).unwrap();
        let err = changed.up_to_date(true, false).unwrap_err();
        assert!(err.to_string().contains("changed"));
    }

    #[test]
    fn manifest_config_round_trips() {
        let d = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.pipeline.train.encoder_adam.lr = 0.1 + 0.2;
        let mut run = Run::in_dir("cmd", d.path()).unwrap();
        run.config(&cfg);
        run.finish().unwrap();
        let back = RunManifest::read(&d.path().join(RUN_MANIFEST)).unwrap();
        let snapshot = back.config.unwrap();
        assert_eq!(snapshot, cfg);
        assert_eq!(ExperimentConfig::from_toml(&snapshot.to_toml().unwrap()).unwrap(), cfg);
    }
}
