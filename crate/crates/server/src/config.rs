//! Service configuration: a TOML file plus `CLICKFORGE_*` environment
//! overrides. Nested keys use a double underscore, so
//! `CLICKFORGE_ADAPT__LR_ADM=2e-4` sets `adapt.lr_adm`.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clickforge_core::adapter::AdaptConfig;
use clickforge_core::netcore::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::error::ServerError;

pub const ENV_PREFIX: &str = "CLICKFORGE_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub listen: SocketAddr,
    /// Starting parameters, used only while `state_dir` holds no checkpoint.
    pub checkpoint: Option<PathBuf>,
    /// Versioned checkpoints go to `state_dir/checkpoints`, masks to
    /// `state_dir/masks`.
    pub state_dir: PathBuf,
    pub model: ModelConfig,
    /// Defaults for new sessions; `adapt.mode` applies when the request names
    /// no mode.
    pub adapt: AdaptConfig,
    /// Commands waiting for the worker before new ones are refused.
    pub queue_depth: usize,
    pub retry_after_secs: u64,
    pub max_side: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            listen: SocketAddr::from(([127, 0, 0, 1], 7878)),
            checkpoint: None,
            state_dir: PathBuf::from("clickforge-state"),
            model: ModelConfig::default(),
            adapt: AdaptConfig::default(),
            queue_depth: 32,
            retry_after_secs: 1,
            max_side: 512,
        }
    }
}

impl ServerConfig {
    /// Reads `path` (if any) and applies overrides from the process
    /// environment.
    pub fn load(path: Option<&Path>) -> Result<Self, ServerError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| ServerError::Config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_parts(&text, std::env::vars())
    }

    pub fn from_parts(
        toml_text: &str,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, ServerError> {
        let mut table: toml::Table =
            toml::from_str(toml_text).map_err(|e| ServerError::Config(e.to_string()))?;
        for (key, raw) in env {
            let Some(rest) = key.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let path: Vec<String> = rest.split("__").map(|s| s.to_ascii_lowercase()).collect();
            set_path(&mut table, &path, parse_scalar(&raw))
                .map_err(|e| ServerError::Config(format!("{key}: {e}")))?;
        }
        let cfg: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| ServerError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ServerError> {
        self.model.validate()?;
        self.adapt.validate()?;
        if self.queue_depth == 0 {
            return Err(ServerError::Config("queue_depth must be >= 1".into()));
        }
        Ok(())
    }
}

/// Environment values are read as TOML literals when they parse as one
/// (numbers, booleans), otherwise as plain strings.
fn parse_scalar(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<(), String> {
    let (last, parents) = path.split_last().ok_or("empty key")?;
    let mut cur = table;
    for p in parents {
        cur = cur
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| format!("`{p}` is not a table"))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}
