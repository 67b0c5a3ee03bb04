use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use dpl_core::data::{planted_config_for_seed, PlantedSpec, PlantingConfig, TaskSpec, TEST_PER_LABEL};
use dpl_core::encoder::{Model, ModelConfig};
use dpl_core::search::SearchConfig;
use dpl_core::supprompt::{PromptConfiguration, SearchSpace};
use dpl_core::train::TrainConfig;

/// Fully resolved settings of one run. Files may give any subset of keys;
/// missing ones take the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Drives task generation, search and training.
    pub seed: u64,
    pub model_seed: u64,
    pub model: ModelConfig,
    pub task: TaskSettings,
    pub space: SearchSpace,
    pub search: SearchConfig,
    pub train: TrainConfig,
    pub shallow_baseline: bool,
    pub repeat: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSettings {
    pub num_labels: usize,
    pub shots: usize,
    pub test_per_label: usize,
    pub noise_std: f64,
    /// `None` generates an unplanted task.
    pub planted: Option<PlantedSettings>,
    pub planting: PlantingConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedSettings {
    /// Per-layer lengths; drawn from the seed when absent.
    pub text: Option<Vec<usize>>,
    pub image: Option<Vec<usize>>,
    pub bank_seed: u64,
    pub prompt_std: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model_seed: 0,
            model: ModelConfig::default(),
            task: TaskSettings {
                num_labels: 4,
                shots: 16,
                test_per_label: TEST_PER_LABEL,
                noise_std: 0.3,
                planted: Some(PlantedSettings {
                    text: None,
                    image: None,
                    bank_seed: 1,
                    prompt_std: 0.02,
                }),
                planting: PlantingConfig::default(),
            },
            space: SearchSpace::default(),
            search: SearchConfig::default(),
            train: TrainConfig::default(),
            shallow_baseline: false,
            repeat: 1,
        }
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub shots: Option<usize>,
    pub epochs_search: Option<usize>,
    pub epochs_train: Option<usize>,
    pub lambda: Option<f64>,
    pub space: Option<String>,
    pub shallow_baseline: bool,
    pub repeat: Option<usize>,
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

impl RunConfig {
    pub fn resolve(path: Option<&Path>, o: &Overrides) -> Result<Self> {
        let mut value = serde_json::to_value(RunConfig::default())?;
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let patch: Value =
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
            merge(&mut value, patch);
        }
        let mut cfg: RunConfig = serde_json::from_value(value).context("invalid config")?;
        if let Some(s) = o.seed {
            cfg.seed = s;
        }
        if let Some(s) = o.shots {
            cfg.task.shots = s;
        }
        if let Some(e) = o.epochs_search {
            cfg.search.epochs = e;
        }
        if let Some(e) = o.epochs_train {
            cfg.train.epochs = e;
        }
        if o.lambda.is_some() {
            cfg.train.lambda = o.lambda;
        }
        if let Some(s) = &o.space {
            cfg.space = SearchSpace::parse(s)?;
        }
        if o.shallow_baseline {
            cfg.shallow_baseline = true;
        }
        if let Some(r) = o.repeat {
            cfg.repeat = r;
        }
        cfg.search.seed = cfg.seed;
        cfg.train.seed = cfg.seed;
        cfg.model.validate()?;
        cfg.search.validate()?;
        cfg.train.validate()?;
        if cfg.repeat == 0 {
            return Err(dpl_core::DplError::contract("repeat must be at least 1").into());
        }
        Ok(cfg)
    }

    pub fn model(&self) -> Result<Model> {
        Ok(Model::init_pretrained(self.model_seed, self.model)?)
    }

    pub fn task_spec(&self) -> Result<TaskSpec> {
        let t = &self.task;
        let mut spec = TaskSpec::new(t.num_labels, t.shots);
        spec.test_per_label = t.test_per_label;
        spec.noise_std = t.noise_std;
        spec.planted = match &t.planted {
            None => None,
            Some(p) => {
                let drawn = planted_config_for_seed(&self.space, self.model.text.depth, self.model.image.depth, self.seed);
                let config = PromptConfiguration {
                    text: p.text.clone().unwrap_or(drawn.text),
                    image: p.image.clone().unwrap_or(drawn.image),
                    space: self.space.lengths().to_vec(),
                };
                let mut spec = PlantedSpec::new(config, p.bank_seed);
                spec.prompt_std = p.prompt_std;
                Some(spec)
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}
