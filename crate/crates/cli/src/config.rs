use std::path::{Path, PathBuf};

use dynkv::harness::MemoryGeometry;
use dynkv::{ModelConfig, PolicyConfig};
use serde::{Deserialize, Serialize};

/// Everything a run depends on. Loaded from a TOML file, then overridden by
/// flags, then echoed into the artifact.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub policy: PolicyConfig,
    pub model: ModelConfig,
    pub geometry: MemoryGeometry,
    pub run: RunOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunOptions {
    pub trace: Option<PathBuf>,
    pub trace_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Policies for `compare`.
    pub policies: Vec<String>,
    /// Top-k per layer for `profile`.
    pub per_layer_k: usize,
    pub prompt_len: usize,
    pub prompt_seed: u64,
    pub fidelity_steps: usize,
    /// Worker threads for `compare`; 0 uses every core.
    pub threads: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            trace: None,
            trace_dir: None,
            out: None,
            policies: dynkv::PolicyKind::ALL.iter().map(|p| p.to_string()).collect(),
            per_layer_k: 128,
            prompt_len: 1024,
            prompt_seed: 0,
            fidelity_steps: 8,
            threads: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("{}: {}", path.display(), e.message()))
    }
}
