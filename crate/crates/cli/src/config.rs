//! Pipeline configuration file. Command-line flags take precedence.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub variants: Option<Vec<String>>,
    pub backend: BackendConfig,
    pub refine: RefineConfig,
    pub formulate: FormulateConfig,
    pub paths: PathsConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    /// `mock`, `transcript` or `remote`.
    pub kind: Option<String>,
    pub transcript: Option<PathBuf>,
    pub base_url: Option<String>,
    pub model: Option<String>,
    /// Name of the environment variable holding the API key.
    pub api_key_env: Option<String>,
    pub max_inflight: Option<usize>,
    pub retries: Option<u32>,
    pub timeout_secs: Option<u64>,
    pub min_interval_ms: Option<u64>,
    pub text_only: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub n: Option<usize>,
    pub rho: Option<f64>,
    pub rho_c: Option<f64>,
    /// `weak` or `strong`.
    pub assoc: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FormulateConfig {
    pub mask_prob: Option<f64>,
    /// `synthetic`, `table`, `backend` or `none`.
    pub providers: Option<String>,
    pub captions: Option<PathBuf>,
    pub rewrites: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub lexicons: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub nouns: Option<PathBuf>,
}

impl PipelineConfig {
    /// Reads a TOML file; relative paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg: PipelineConfig =
            toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(x) = p {
                if x.is_relative() {
                    *x = base.join(&*x);
                }
            }
        };
        fix(&mut cfg.out_dir);
        fix(&mut cfg.backend.transcript);
        fix(&mut cfg.formulate.captions);
        fix(&mut cfg.formulate.rewrites);
        fix(&mut cfg.paths.lexicons);
        fix(&mut cfg.paths.embeddings);
        fix(&mut cfg.paths.nouns);
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_resolves_paths() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("clot.toml");
        std::fs::write(
            &p,
            "seed = 3\nvariants = [\"3T1\"]\n[backend]\nkind = \"mock\"\nmax_inflight = 2\n[refine]\nn = 4\n[paths]\nnouns = \"nouns\"\n",
        )
        .unwrap();
        let c = PipelineConfig::load(&p).unwrap();
        assert_eq!(c.seed, Some(3));
        assert_eq!(c.refine.n, Some(4));
        assert_eq!(c.paths.nouns, Some(dir.path().join("nouns")));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.toml");
        std::fs::write(&p, "sede = 3\n").unwrap();
        assert!(PipelineConfig::load(&p).is_err());
    }
}
