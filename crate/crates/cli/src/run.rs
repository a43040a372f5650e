//! Run identity, stamped artifacts and the run manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clot_core::jsonl::{self, Header};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "run-manifest.json";

fn sha256(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Content digest of a file, or of a directory's files (sorted by name).
pub fn digest(path: &Path) -> Result<String> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
            .with_context(|| format!("cannot list {}", path.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        entries.sort();
        let mut h = Sha256::new();
        for e in entries {
            h.update(e.file_name().unwrap_or_default().to_string_lossy().as_bytes());
            h.update(digest(&e)?.as_bytes());
        }
        Ok(hex::encode(h.finalize()))
    } else {
        let bytes = std::fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
        Ok(sha256(&bytes))
    }
}

/// Fails with the offending path when an input is missing.
pub fn require(path: &Path) -> Result<()> {
    if !path.exists() {
        bail!("input not found: {}", path.display());
    }
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub run: String,
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
    pub backend: Option<String>,
    pub params: Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

/// One invocation writing into `out`. The run id hashes everything that
/// determines the outputs: command, parameters, config, backend identity and
/// input contents (not their locations).
pub struct Run {
    pub out: PathBuf,
    manifest: Manifest,
}

impl Run {
    pub fn start(
        command: &str,
        out: &Path,
        seed: u64,
        config_hash: &str,
        backend: Option<String>,
        params: Value,
        inputs: &[(&str, &Path)],
    ) -> Result<Self> {
        let mut digests = BTreeMap::new();
        for (name, path) in inputs {
            require(path)?;
            digests.insert(name.to_string(), digest(path)?);
        }
        let version = env!("CARGO_PKG_VERSION").to_string();
        let basis = json!({
            "command": command,
            "version": version,
            "seed": seed,
            "config": config_hash,
            "backend": backend,
            "params": params,
            "inputs": digests,
        });
        let run = sha256(basis.to_string().as_bytes())[..16].to_string();
        Ok(Run {
            out: out.to_path_buf(),
            manifest: Manifest {
                run,
                command: command.to_string(),
                version,
                seed,
                config_hash: config_hash.to_string(),
                backend,
                params,
                inputs: digests,
                outputs: BTreeMap::new(),
            },
        })
    }

    pub fn id(&self) -> &str {
        &self.manifest.run
    }

    pub fn header(&self, schema: &str) -> Header {
        Header::new(schema, Some(self.id()))
    }

    fn prepare(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).with_context(|| format!("cannot create {}", parent.display()))?;
            }
        }
        Ok(())
    }

    fn record(&mut self, path: &Path) -> Result<()> {
        let name = path
            .strip_prefix(&self.out)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/");
        self.manifest.outputs.insert(name, digest(path)?);
        Ok(())
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn write_jsonl<T: Serialize>(&mut self, path: &Path, schema: &str, items: &[T]) -> Result<()> {
        self.prepare(path)?;
        jsonl::write_file(path, Some(&self.header(schema)), items)?;
        self.record(path)
    }

    /// Writes a JSON object with a `run` field added.
    pub fn write_json<T: Serialize>(&mut self, path: &Path, value: &T) -> Result<()> {
        self.prepare(path)?;
        let mut v = serde_json::to_value(value)?;
        if let Value::Object(map) = &mut v {
            map.insert("run".into(), Value::String(self.id().to_string()));
        }
        std::fs::write(path, serde_json::to_string_pretty(&v)? + "\n")
            .with_context(|| format!("cannot write {}", path.display()))?;
        self.record(path)
    }

    /// Plain text; `comment` prefixes a run line (`#` for word lists).
    pub fn write_text(&mut self, path: &Path, body: &str, comment: Option<&str>) -> Result<()> {
        self.prepare(path)?;
        let mut text = String::new();
        if let Some(c) = comment {
            text.push_str(&format!("{c} run: {}\n", self.id()));
        }
        text.push_str(body);
        std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))?;
        self.record(path)
    }

    /// Writes `run-manifest.json` next to the outputs.
    pub fn finish(self) -> Result<String> {
        let path = self.out.join(MANIFEST);
        self.prepare(&path)?;
        std::fs::write(&path, serde_json::to_string_pretty(&self.manifest)? + "\n")
            .with_context(|| format!("cannot write {}", path.display()))?;
        Ok(self.manifest.run)
    }
}

pub fn config_hash<T: Serialize>(cfg: &T) -> Result<String> {
    Ok(sha256(serde_json::to_string(cfg)?.as_bytes())[..16].to_string())
}
