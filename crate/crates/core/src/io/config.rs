//! Run configuration: one document selecting the planner, agent mode,
//! simulation settings and metric settings.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::engine::{PlannerKind, SimulationConfig};
use crate::error::{Error, Result};
use crate::metrics::{ClsConfig, RealismConfig};

/// Overrides the configured seed; an explicit command-line seed wins.
pub const SEED_ENV: &str = "REACTIVE_BENCH_SEED";

/// Every field has a default, so `{}` is a complete configuration.
///
/// | key | default |
/// |-----|---------|
/// | `seed` | 0 |
/// | `planner` | `log_replay` (`constant_velocity`, `idm`) |
/// | `simulation` | see [`SimulationConfig`]; `agent_mode` defaults to `log_replay` |
/// | `cls` | see [`ClsConfig`] |
/// | `realism` | see [`RealismConfig`] |
/// | `model_path` | none; required for `diffusion_hybrid` agents |
/// | `parallel` | 1 |
/// | `write_logs` | true |
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub planner: PlannerKind,
    pub simulation: SimulationConfig,
    pub cls: ClsConfig,
    pub realism: RealismConfig,
    pub model_path: Option<PathBuf>,
    /// Worker threads for batch evaluation.
    pub parallel: usize,
    pub write_logs: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            planner: PlannerKind::default(),
            simulation: SimulationConfig::default(),
            cls: ClsConfig::default(),
            realism: RealismConfig::default(),
            model_path: None,
            parallel: 1,
            write_logs: true,
        }
    }
}

impl RunConfig {
    /// TOML for `.toml` files, JSON otherwise.
    pub fn load(path: &Path) -> Result<Self> {
        load_config_file(path)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        config_from_json(text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        config_from_toml(text)
    }

    /// Applies the seed precedence: flag, then environment, then file.
    pub fn apply_seed_override(&mut self, flag: Option<u64>) -> Result<()> {
        let env = match std::env::var(SEED_ENV) {
            Ok(v) => Some(v.trim().parse::<u64>().map_err(|_| {
                Error::Config(format!("{SEED_ENV} must be an unsigned integer, got {v:?}"))
            })?),
            Err(std::env::VarError::NotPresent) => None,
            Err(e) => return Err(Error::Config(format!("{SEED_ENV}: {e}"))),
        };
        if let Some(seed) = flag.or(env) {
            self.seed = seed;
        }
        Ok(())
    }

    /// The configuration as it is actually used: the top-level seed is the
    /// simulation's batch seed.
    pub fn effective(&self) -> Self {
        let mut out = self.clone();
        out.simulation.seed = self.seed;
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.simulation.validate()?;
        self.cls.validate()?;
        if self.realism.ttc_bins == 0 || self.realism.clusters == 0 {
            return Err(Error::Config(
                "realism bins and clusters must be positive".into(),
            ));
        }
        if !(self.realism.ttc_horizon > 0.0 && self.realism.ttc_dt_fine > 0.0) {
            return Err(Error::Config(
                "ttc horizon and step must be positive".into(),
            ));
        }
        if self.parallel == 0 {
            return Err(Error::Config("parallel must be at least 1".into()));
        }
        if self.simulation.agent_mode == crate::engine::AgentMode::DiffusionHybrid
            && self.model_path.is_none()
        {
            return Err(Error::Config(
                "diffusion_hybrid agents need model_path".into(),
            ));
        }
        Ok(())
    }

    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self.effective()).expect("config serializes")
    }
}

/// Reads a strict configuration document: TOML for `.toml` files, JSON
/// otherwise. Errors name the offending key path.
pub fn load_config_file<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    if path.extension().is_some_and(|e| e == "toml") {
        config_from_toml(&text)
    } else {
        config_from_json(&text)
    }
}

pub fn config_from_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    super::parse_json_strict(text, true).map_err(config_error)
}

pub fn config_from_toml<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = toml::Deserializer::parse(text).map_err(|e| Error::Config(e.to_string()))?;
    serde_path_to_error::deserialize(de)
        .map_err(|e| Error::Config(format!("at {}: {}", e.path(), e.inner().message().trim())))
}

fn config_error(e: Error) -> Error {
    match e {
        Error::Schema { path, message } => Error::Config(format!("at {path}: {message}")),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_documents_give_defaults() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn toml_and_json_agree() {
        let j = RunConfig::from_json(
            r#"{"seed": 7, "planner": "idm", "simulation": {"agent_mode": "idm", "idm": {"lane_width": 3.5}}}"#,
        )
        .unwrap();
        let t = RunConfig::from_toml(
            "seed = 7\nplanner = \"idm\"\n[simulation]\nagent_mode = \"idm\"\n[simulation.idm]\nlane_width = 3.5\n",
        )
        .unwrap();
        assert_eq!(j, t);
        assert_eq!(j.simulation.idm.lane_width, 3.5);
    }

    #[test]
    fn unknown_keys_are_rejected_with_path() {
        let err = RunConfig::from_json(r#"{"simulation": {"tick_hzz": 10}}"#).unwrap_err();
        assert!(err.to_string().contains("simulation"), "{err}");
        let err = RunConfig::from_toml("[cls]\nbogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("cls"), "{err}");
    }

    #[test]
    fn echo_round_trips() {
        let cfg = RunConfig {
            seed: 11,
            ..RunConfig::default()
        };
        let back: RunConfig = serde_json::from_value(cfg.echo()).unwrap();
        assert_eq!(back, cfg.effective());
        assert_eq!(back.simulation.seed, 11);
    }
}
