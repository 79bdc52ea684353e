use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

pub const ENV_CACHE_DIR: &str = "GEE_CACHE_DIR";

/// Keys accepted in a `--config` TOML file. Flags override these, and the
/// `GEE_*` environment variables override both.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub db: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub gold: Option<PathBuf>,
    pub gold_format: Option<String>,
    pub output: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub prompt_dir: Option<PathBuf>,
    pub lang: Option<String>,
    pub teacher: Option<String>,
    pub teacher_model: Option<String>,
    pub predictor: Option<String>,
    pub predictor_model: Option<String>,
    pub embedder: Option<String>,
    pub api_base: Option<String>,
    pub strategy: Option<String>,
    pub k_e: Option<usize>,
    pub k_c: Option<usize>,
    pub seed: Option<u64>,
    pub explanation_mode: Option<String>,
    pub detection_template: Option<String>,
    pub explanation_bm25: Option<bool>,
    pub include_source_matches: Option<bool>,
    pub min_tokens: Option<usize>,
    pub max_tokens: Option<usize>,
    pub cap: Option<usize>,
    pub explain_with_edits: Option<bool>,
    pub max_failure_fraction: Option<f64>,
    pub total: Option<usize>,
    pub jobs: Option<usize>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Backend endpoint and cache settings after applying file, flags and environment.
#[derive(Debug, Clone, Serialize)]
pub struct Endpoints {
    pub api_base: Option<String>,
    pub cache_dir: Option<PathBuf>,
}

impl Endpoints {
    pub fn resolve(file: &FileConfig, flag_api_base: Option<String>, flag_cache: Option<PathBuf>) -> Self {
        let api_base = std::env::var(gee_core::llm::ENV_API_BASE)
            .ok()
            .filter(|v| !v.is_empty())
            .or(flag_api_base)
            .or_else(|| file.api_base.clone());
        let cache_dir = std::env::var_os(ENV_CACHE_DIR)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
            .or(flag_cache)
            .or_else(|| file.cache_dir.clone());
        Self { api_base, cache_dir }
    }
}

pub fn require<T>(value: Option<T>, name: &str) -> Result<T> {
    match value {
        Some(v) => Ok(v),
        None => bail!("missing required option --{name} (flag or config file)"),
    }
}

pub fn readable_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        bail!("{what} {} is not a readable file", path.display());
    }
    Ok(())
}

/// Refuses to touch existing outputs unless `force` is set.
pub fn writable_output(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        bail!("{} already exists; pass --force to overwrite", path.display());
    }
    Ok(())
}

pub fn default_jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}
