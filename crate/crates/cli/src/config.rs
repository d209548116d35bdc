//! Optional JSON config file. Every section is a partial override of the
//! built-in defaults; unknown top-level keys are rejected.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use acwm::eval_harness::EpisodeConfig;
use acwm::learned::{CorpusConfig, LearnedConfig, TrainBudget};
use acwm::trajectory_engine::AugmentationSpec;

use crate::error::{invalid, CliError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppConfig {
    pub episode: EpisodeConfig,
    pub augmentation: AugmentationSpec,
    pub learned: LearnedConfig,
    pub corpus: CorpusConfig,
    pub budget: TrainBudget,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            episode: EpisodeConfig::default(),
            augmentation: AugmentationSpec::default(),
            learned: LearnedConfig::default(),
            corpus: CorpusConfig::default(),
            budget: TrainBudget { max_steps: 6000, max_seconds: 1800.0 },
        }
    }
}

/// Recursively overlays `patch` onto `base`; objects merge, everything else replaces.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

fn overlay<T: Serialize + DeserializeOwned>(base: &T, patch: Value, section: &str) -> Result<T, CliError> {
    let mut v = serde_json::to_value(base).map_err(invalid)?;
    merge(&mut v, patch);
    serde_json::from_value(v).map_err(|e| invalid(format!("config section {section}: {e}")))
}

impl AppConfig {
    pub fn from_value(v: Value) -> Result<Self, CliError> {
        let Value::Object(map) = v else {
            return Err(invalid("config must be a JSON object"));
        };
        let mut c = AppConfig::default();
        for (k, patch) in map {
            match k.as_str() {
                "episode" => c.episode = overlay(&c.episode, patch, &k)?,
                "augmentation" => c.augmentation = overlay(&c.augmentation, patch, &k)?,
                "learned" => c.learned = overlay(&c.learned, patch, &k)?,
                "corpus" => c.corpus = overlay(&c.corpus, patch, &k)?,
                "budget" => c.budget = overlay(&c.budget, patch, &k)?,
                other => return Err(invalid(format!("unknown config section {other:?}"))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        Self::from_value(v)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.episode.validate().map_err(invalid)?;
        self.augmentation.validate().map_err(invalid)?;
        self.learned.diffusion.schedule().map_err(invalid)?;
        let l = &self.learned;
        if l.chunk == 0 || l.batch == 0 || l.frames_per_sample == 0 || !(l.lr > 0.0) || !(l.residual_scale > 0.0) {
            return Err(invalid("learned: chunk, batch, frames_per_sample, lr and residual_scale must be positive"));
        }
        if !(0.0..=1.0).contains(&self.corpus.failure_fraction) {
            return Err(invalid("corpus.failure_fraction must be in [0, 1]"));
        }
        if self.budget.max_steps == 0 || !(self.budget.max_seconds > 0.0) {
            return Err(invalid("budget needs max_steps > 0 and max_seconds > 0"));
        }
        Ok(())
    }
}
