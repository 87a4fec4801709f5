//! The single run configuration document.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::EnvConfig;
use crate::error::{LabError, Result};
use crate::grpo::GrpoConfig;
use crate::lldreg::RegConfig;
use crate::policy::FeatureMap;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabConfig {
    pub env: EnvConfig,
    pub policy: FeatureMap,
    pub grpo: GrpoConfig,
    pub reg: RegConfig,
    pub train: TrainConfig,
}

impl LabConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.grpo.validate()?;
        self.reg.validate()?;
        self.train.validate()?;
        if self.policy.window == 0 {
            return Err(LabError::InvalidConfig("policy window must be >= 1".into()));
        }
        let turns = self.env.effective_max_turns();
        if self.policy.includes_turn_index && self.policy.max_turns < turns {
            return Err(LabError::InvalidConfig(format!(
                "policy.max_turns {} is below the environment's {turns}",
                self.policy.max_turns
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: LabConfig = serde_json::from_slice(&std::fs::read(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}
