//! Run configuration, stored as TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::action::ResponseTags;
use crate::agent::Agent;
use crate::env::{generate_dataset, read_dataset, Dataset, GridSpec, TaskCounts};
use crate::error::{Error, Result};
use crate::eval::PreferenceConfig;
use crate::model::ModelConfig;
use crate::rng::stream_key;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub grid: GridSpec,
    pub tags: ResponseTags,
    /// History window `N`.
    pub window: usize,
    /// Task fractions in the order LOCAL, RECALL_1, RECALL_2, COPY_2.
    pub mix: [f64; 4],
    pub train_episodes: usize,
    pub eval_episodes: usize,
    /// Pre-generated datasets; generated from the seed when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_data: Option<PathBuf>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            grid: GridSpec::default(),
            tags: ResponseTags::default(),
            window: 2,
            mix: [0.40, 0.20, 0.25, 0.15],
            train_episodes: 2000,
            eval_episodes: 200,
            train_data: None,
            eval_data: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Drop layer used for compressed evaluation.
    pub drop_layer: usize,
    pub probe_ks: Vec<usize>,
    pub preference: PreferenceConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            drop_layer: 2,
            probe_ks: vec![0, 1, 2, 3, 4],
            preference: PreferenceConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub env: EnvConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            model: ModelConfig::default(),
            env: EnvConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::ConfigValidation(m));
        self.env.grid.validate()?;
        let m = &self.model;
        if m.layers == 0 || m.d_model == 0 || m.heads == 0 || m.d_ff == 0 {
            return fail("model dimensions must be >= 1".into());
        }
        if !m.d_model.is_multiple_of(m.heads) {
            return fail(format!("d_model = {} must be divisible by heads = {}", m.d_model, m.heads));
        }
        if m.max_response < 2 {
            return fail("max_response must be >= 2".into());
        }
        TaskCounts::from_mix(self.env.train_episodes, self.env.mix)?;
        if self.env.train_episodes == 0 && self.env.train_data.is_none() {
            return fail("train_episodes must be >= 1".into());
        }
        self.train.validate(m.layers)?;
        if self.eval.drop_layer > m.layers {
            return fail(format!("eval drop_layer = {} violates 0 <= k <= L = {}", self.eval.drop_layer, m.layers));
        }
        if let Some(k) = self.eval.probe_ks.iter().find(|k| **k > m.layers) {
            return fail(format!("probe k = {k} violates 0 <= k <= L = {}", m.layers));
        }
        if self.eval.preference.rollouts == 0 {
            return fail("preference rollouts must be >= 1".into());
        }
        Ok(())
    }

    pub fn agent(&self) -> Agent {
        Agent::new(self.env.grid, self.env.tags.clone(), self.env.window, self.model)
    }

    /// Trainer settings with the run seed filled in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_dataset(&self) -> Result<Dataset> {
        match &self.env.train_data {
            Some(p) => read_dataset(p),
            None => generate_dataset(
                stream_key(self.seed, &["train-data".into()]),
                TaskCounts::from_mix(self.env.train_episodes, self.env.mix)?,
                &self.env.grid,
            ),
        }
    }

    pub fn eval_dataset(&self) -> Result<Dataset> {
        match &self.env.eval_data {
            Some(p) => read_dataset(p),
            None => generate_dataset(
                stream_key(self.seed, &["eval-data".into()]),
                TaskCounts::from_mix(self.env.eval_episodes, self.env.mix)?,
                &self.env.grid,
            ),
        }
    }
}

/// Reads, parses and validates a config file; missing keys take defaults.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunConfig::from_toml(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn epsilon_out_of_range_names_constraint() {
        let err = RunConfig::from_toml("[train]\nepsilon = 1.5\n").unwrap_err();
        assert!(matches!(err, Error::ConfigValidation(_)));
        assert!(err.to_string().contains("0 < epsilon < 1"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml("[train]\nepsilonn = 0.1\n").unwrap_err();
        assert!(matches!(err, Error::ConfigParse(_)));
        assert!(err.to_string().contains("epsilonn"), "{err}");
        assert!(matches!(RunConfig::from_toml("bogus = 1\n"), Err(Error::ConfigParse(_))));
    }

    #[test]
    fn parse_errors_report_location() {
        let err = RunConfig::from_toml("[train]\nsteps = \"many\"\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn round_trip_is_idempotent() {
        let text = "seed = 9\n[model]\nd_model = 16\nheads = 2\n[train]\nmode = \"GRPO\"\nlambda = 0.5\n[train.dcs]\nschedule = \"uniform\"\n";
        let a = RunConfig::from_toml(text).unwrap();
        let b = RunConfig::from_toml(&a.to_toml()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_toml(), b.to_toml());
        assert_eq!(b.seed, 9);
        assert_eq!(b.model.d_model, 16);
    }

    #[test]
    fn drop_layer_must_fit_the_model() {
        let err = RunConfig::from_toml("[model]\nlayers = 2\n[train]\ndrop_layer = 3\n").unwrap_err();
        assert!(err.to_string().contains("0 <= k <= L"), "{err}");
    }
}
