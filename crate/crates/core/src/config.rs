//! Run configuration: named profiles plus a JSON document of overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::fusion::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Published hyperparameters.
    Paper,
    /// Small model that trains in minutes on one CPU core.
    Desk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub k_folds: usize,
    pub parallel_folds: usize,
    /// Data directory used when no `--data` flag is given.
    #[serde(default)]
    pub data: Option<PathBuf>,
}

impl RunConfig {
    pub fn profile(profile: Profile) -> Self {
        RunConfig {
            profile,
            train: match profile {
                Profile::Paper => TrainConfig::paper(),
                Profile::Desk => TrainConfig::desk(),
            },
            synth: SynthConfig::default(),
            k_folds: 5,
            parallel_folds: 1,
            data: None,
        }
    }

    /// Profile defaults (`"profile"` key, `desk` when absent) overlaid with
    /// every key of `doc`. Unknown keys are rejected.
    pub fn from_json(doc: &str) -> Result<Self> {
        let user: Value = serde_json::from_str(doc).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        Self::from_value(user)
    }

    pub fn from_value(user: Value) -> Result<Self> {
        if !user.is_object() {
            return Err(Error::Config("config must be a JSON object".into()));
        }
        let profile = match user.get("profile") {
            None => Profile::Desk,
            Some(p) => serde_json::from_value(p.clone()).map_err(|e| Error::Config(format!("profile: {e}")))?,
        };
        let mut base = serde_json::to_value(Self::profile(profile))?;
        merge(&mut base, user);
        let cfg: RunConfig = serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.synth.validate()?;
        if self.k_folds < 2 {
            return Err(Error::Config(format!("k_folds = {} must be at least 2", self.k_folds)));
        }
        if self.parallel_folds == 0 {
            return Err(Error::Config("parallel_folds must be at least 1".into()));
        }
        Ok(())
    }
}

/// Recursive object merge; any non-object value in `over` replaces the base.
/// Enum-valued keys are replaced whole so a variant change cannot leave two
/// tags behind.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if k != "atei_mode" => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
