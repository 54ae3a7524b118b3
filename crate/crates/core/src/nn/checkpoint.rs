//! On-disk checkpoints: a directory holding `weights.bin` (little-endian f64
//! parameter blobs, concatenated in manifest order) and `manifest.txt`
//! (one `key=value` per line).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::Network;
use crate::error::{Error, Result};

pub const WEIGHTS_FILE: &str = "weights.bin";
pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub manifest: BTreeMap<String, String>,
    pub blobs: Vec<(String, Vec<f64>)>,
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        let mut c = Self::default();
        c.set("kind", kind);
        c
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.manifest.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.manifest.get(key).map(String::as_str)
    }

    pub fn add_blob(&mut self, name: &str, data: &[f64]) {
        self.blobs.push((name.to_string(), data.to_vec()));
    }

    pub fn blob(&self, name: &str) -> Option<&[f64]> {
        self.blobs.iter().find(|(n, _)| n == name).map(|(_, d)| d.as_slice())
    }

    /// Stores a network's architecture under `<name>.architecture` and its
    /// parameters as blob `name`.
    pub fn add_network(&mut self, name: &str, net: &Network) {
        self.set(&format!("{name}.architecture"), net.architecture());
        self.add_blob(name, net.params());
    }

    pub fn network(&self, name: &str) -> Result<Network> {
        let arch = self
            .get(&format!("{name}.architecture"))
            .ok_or_else(|| Error::Config(format!("checkpoint lacks network {name}")))?;
        let params = self
            .blob(name)
            .ok_or_else(|| Error::Config(format!("checkpoint lacks parameters of {name}")))?;
        Network::from_architecture(arch, params.to_vec())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut bytes = Vec::new();
        let mut manifest = self.manifest.clone();
        let order: Vec<String> = self.blobs.iter().map(|(n, _)| n.clone()).collect();
        manifest.insert("blobs".into(), order.join(","));
        for (name, data) in &self.blobs {
            manifest.insert(format!("blob.{name}.len"), data.len().to_string());
            for v in data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let wpath = dir.join(WEIGHTS_FILE);
        fs::write(&wpath, bytes).map_err(|e| Error::io(&wpath, e))?;
        let mut text = String::new();
        for (k, v) in &manifest {
            text.push_str(k);
            text.push('=');
            text.push_str(v);
            text.push('\n');
        }
        let mpath = dir.join(MANIFEST_FILE);
        fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let mut manifest = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(&mpath, format!("line {} is not key=value", lineno + 1)))?;
            manifest.insert(k.to_string(), v.to_string());
        }
        let wpath = dir.join(WEIGHTS_FILE);
        let bytes = fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::format(&wpath, "length not a multiple of 8"));
        }
        let order = manifest.remove("blobs").unwrap_or_default();
        let mut blobs = Vec::new();
        let mut off = 0usize;
        for name in order.split(',').filter(|s| !s.is_empty()) {
            let key = format!("blob.{name}.len");
            let len: usize = manifest
                .remove(&key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(dir, format!("missing or invalid {key}")))?;
            let end = off + len * 8;
            if end > bytes.len() {
                return Err(bad(dir, format!("blob {name} extends past end of weights")));
            }
            let data = bytes[off..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            blobs.push((name.to_string(), data));
            off = end;
        }
        if off != bytes.len() {
            return Err(bad(dir, "trailing bytes in weights"));
        }
        Ok(Self { manifest, blobs })
    }

    pub fn require(&self, key: &str, dir: &Path) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| bad(dir, format!("manifest lacks key {key}")))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .get(key)
            .ok_or_else(|| Error::Config(format!("checkpoint manifest lacks key {key}")))?;
        raw.parse()
            .map_err(|_| Error::Config(format!("checkpoint key {key} has invalid value {raw}")))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        match self.get("kind") {
            Some(k) if k == kind => Ok(()),
            other => Err(Error::Config(format!(
                "expected a {kind} checkpoint, found {}",
                other.unwrap_or("<none>")
            ))),
        }
    }
}

fn bad(dir: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: PathBuf::from(dir),
        reason: reason.into(),
    }
}
