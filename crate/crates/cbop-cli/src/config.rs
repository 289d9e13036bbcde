//! Run configuration files and the shared seed / output-path plumbing.

use std::path::Path;

use serde::{Deserialize, Serialize};

use cbop_core::agent::{BcConfig, FqeConfig, TrainConfig};
use cbop_core::dynamics::DynamicsConfig;
use cbop_core::{CbopError, Result};

/// Optional JSON config accepted by the heavier subcommands. Every section
/// is optional; missing sections fall back to defaults. Unknown keys are
/// rejected so typos fail loudly instead of silently training the wrong
/// thing.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub env_id: Option<String>,
    pub seed: Option<u64>,
    pub train: Option<TrainConfig>,
    pub dynamics: Option<DynamicsConfig>,
    pub bc: Option<BcConfig>,
    pub fqe: Option<FqeConfig>,
}

pub fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| CbopError::io(path.display(), e))?;
    serde_json::from_str(&text)
        .map_err(|e| CbopError::InvalidConfig(format!("config {}: {e}", path.display())))
}

/// Resolve the experiment seed: explicit flag beats the config file, which
/// beats the CBOP_SEED environment variable, which beats `fallback`.
pub fn resolve_seed(flag: Option<u64>, from_config: Option<u64>, fallback: u64) -> Result<u64> {
    if let Some(seed) = flag {
        return Ok(seed);
    }
    if let Some(seed) = from_config {
        return Ok(seed);
    }
    match std::env::var("CBOP_SEED") {
        Ok(text) => text.trim().parse().map_err(|_| {
            CbopError::InvalidConfig(format!(
                "CBOP_SEED must be an unsigned integer, got {text:?}"
            ))
        }),
        Err(std::env::VarError::NotPresent) => Ok(fallback),
        Err(err) => Err(CbopError::InvalidConfig(format!("CBOP_SEED: {err}"))),
    }
}

/// Refuse to clobber an existing output unless --overwrite was passed.
pub fn guard_output(path: &Path, overwrite: bool) -> Result<()> {
    if path.exists() && !overwrite {
        return Err(CbopError::InvalidConfig(format!(
            "output {} already exists (pass --overwrite to replace it)",
            path.display()
        )));
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() && !parent.exists() {
            return Err(CbopError::InvalidConfig(format!(
                "output directory {} does not exist",
                parent.display()
            )));
        }
    }
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CbopError::io(path.display(), e))
}

/// Parse one of the snake_case enum names used in config files (estimator
/// kinds, rollout modes, ...) from a CLI flag value.
pub fn parse_variant<T: serde::de::DeserializeOwned>(what: &str, value: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(value.to_string()))
        .map_err(|_| CbopError::InvalidConfig(format!("unknown {what} {value:?}")))
}
