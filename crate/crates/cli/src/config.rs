//! Config file loading: a TOML document is laid over a named preset, then
//! seeds and command-line flags are applied on top.

use std::path::Path;

use anyhow::{Context, Result};
use collision_sentinel::bench::ExperimentConfig;
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "COLLISION_SENTINEL_SEED";

/// Raised for anything the user can fix by editing flags or the config file.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

/// Settings of the `balance` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BalanceSettings {
    pub min_runs: u64,
    pub max_total_runs: u64,
    pub rate_lo: f64,
    pub rate_hi: f64,
}

impl Default for BalanceSettings {
    fn default() -> Self {
        Self {
            min_runs: 45,
            max_total_runs: 1200,
            rate_lo: 0.46,
            rate_hi: 0.54,
        }
    }
}

/// Everything a command may read. `experiment` is flattened at the top
/// level of the file; `preset`, `seed` and `[balance]` sit beside it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CliConfig {
    pub preset: String,
    /// Master seed; when set every named seed is derived from it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub balance: BalanceSettings,
    #[serde(flatten)]
    pub experiment: ExperimentConfig,
}

/// Recursively lays `over` onto `base`. Tables merge key by key, anything
/// else replaces. `imbalance` is a tagged enum and is replaced whole.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) if key != "imbalance" => {
                merge(b, o)
            }
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

fn to_table<T: Serialize>(value: &T) -> Result<toml::Table> {
    match toml::Value::try_from(value)? {
        toml::Value::Table(t) => Ok(t),
        other => anyhow::bail!("expected a table, got {other}"),
    }
}

/// Parses a config document. `preset_flag` and `seed_flag` win over the
/// file; the seed env var sits between the two.
pub fn resolve(
    text: Option<&str>,
    preset_flag: Option<&str>,
    seed_flag: Option<u64>,
) -> Result<CliConfig> {
    let mut doc = match text {
        Some(t) => {
            toml::from_str::<toml::Table>(t).map_err(|e| config_err(format!("config file: {e}")))?
        }
        None => toml::Table::new(),
    };
    let file_preset = match doc.remove("preset") {
        Some(toml::Value::String(s)) => Some(s),
        Some(other) => {
            return Err(config_err(format!(
                "`preset` must be a string, got {other}"
            )))
        }
        None => None,
    };
    let file_seed = match doc.remove("seed") {
        Some(toml::Value::Integer(i)) if i >= 0 => Some(i as u64),
        Some(other) => {
            return Err(config_err(format!(
                "`seed` must be a non-negative integer, got {other}"
            )))
        }
        None => None,
    };
    let balance = match doc.remove("balance") {
        Some(v) => v
            .try_into::<BalanceSettings>()
            .map_err(|e| config_err(format!("[balance]: {e}")))?,
        None => BalanceSettings::default(),
    };

    let preset = preset_flag
        .map(str::to_string)
        .or(file_preset)
        .unwrap_or_else(|| "balanced".into());
    let base = ExperimentConfig::preset(&preset).ok_or_else(|| {
        config_err(format!(
            "unknown preset `{preset}` (expected balanced or imbalanced)"
        ))
    })?;
    let mut table = to_table(&base)?;
    merge(&mut table, doc);
    let mut experiment: ExperimentConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| config_err(format!("config file: {e}")))?;

    let env_seed = match std::env::var(SEED_ENV) {
        Ok(v) => Some(v.trim().parse::<u64>().map_err(|_| {
            config_err(format!("{SEED_ENV} must be an unsigned integer, got `{v}`"))
        })?),
        Err(_) => None,
    };
    let seed = seed_flag.or(env_seed).or(file_seed);
    if let Some(s) = seed {
        experiment.reseed(s);
    }
    Ok(CliConfig {
        preset,
        seed,
        balance,
        experiment,
    })
}

pub fn load(
    path: Option<&Path>,
    preset_flag: Option<&str>,
    seed_flag: Option<u64>,
) -> Result<CliConfig> {
    let text = match path {
        Some(p) => Some(
            std::fs::read_to_string(p)
                .map_err(|e| config_err(format!("cannot read config {}: {e}", p.display())))?,
        ),
        None => None,
    };
    resolve(text.as_deref(), preset_flag, seed_flag)
}

impl CliConfig {
    pub fn validate(&self) -> Result<()> {
        self.experiment
            .validate()
            .map_err(|e| config_err(e.to_string()))?;
        let b = &self.balance;
        if !(0.0 <= b.rate_lo && b.rate_lo <= b.rate_hi && b.rate_hi <= 1.0) {
            return Err(config_err(format!(
                "balance rate bounds must satisfy 0 <= rate_lo <= rate_hi <= 1, got [{}, {}]",
                b.rate_lo, b.rate_hi
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serializing the effective config")
    }
}
