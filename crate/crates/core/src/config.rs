//! Run configuration: a single JSON document covering the model, task,
//! masks, gates, objective weights, decoding, and trainer settings.
//!
//! Every field has a default; an empty `{}` file resolves to the
//! recommended hyperparameters. Unknown keys are rejected with the
//! offending key named. Flags override file values; `MAPO_SEED` is the
//! final fallback for the seed when neither the file nor a flag sets one.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::masks::MaskConfig;
use crate::model::{DecodingParams, ModelConfig};
use crate::objective::GateConfig;
use crate::task::{AccuracyMode, RewardWeights, TaskSpec, VocabLayout};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    /// KL penalty coefficient.
    pub beta: f64,
    /// Attention penalty weight.
    pub eta: f64,
    /// Force the relevance mask to all ones (uniform token weighting).
    /// Together with `eta = 0` this is the plain GRPO baseline.
    pub uniform_mask: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            beta: 0.002,
            eta: 0.1,
            uniform_mask: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub lambda_acc: f64,
    pub lambda_format: f64,
    pub lambda_cons: f64,
    pub accuracy_mode: AccuracyMode,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            lambda_acc: 2.0,
            lambda_format: 1.0,
            lambda_cons: 1.0,
            accuracy_mode: AccuracyMode::Strict,
        }
    }
}

impl RewardConfig {
    pub fn weights(&self) -> RewardWeights {
        RewardWeights {
            lambda_acc: self.lambda_acc,
            lambda_format: self.lambda_format,
            lambda_cons: self.lambda_cons,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerParams {
    /// Completions per prompt (G).
    pub group_size: usize,
    /// Prompts per outer step.
    pub instances_per_step: usize,
    /// Optimizer updates per generation batch.
    pub steps_per_generation: usize,
    /// Outer RL iterations.
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub warmup_batch: usize,
    pub warmup_lr: f64,
    /// Held-out greedy accuracy the warm-up is expected to reach.
    pub warmup_target_accuracy: f64,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Checkpoint every N outer steps; 0 disables periodic checkpoints.
    pub checkpoint_interval: usize,
    /// Held-out instances used by evaluation commands.
    pub eval_instances: usize,
    pub init_scale: f64,
}

impl Default for TrainerParams {
    fn default() -> Self {
        TrainerParams {
            group_size: 8,
            instances_per_step: 4,
            steps_per_generation: 4,
            total_steps: 300,
            warmup_steps: 1200,
            warmup_batch: 8,
            warmup_lr: 3e-3,
            warmup_target_accuracy: 0.8,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            checkpoint_interval: 100,
            eval_instances: 64,
            init_scale: 0.02,
        }
    }
}

impl TrainerParams {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config("trainer.group_size must be >= 2".into()));
        }
        if self.instances_per_step == 0 {
            return Err(Error::Config("trainer.instances_per_step must be >= 1".into()));
        }
        if self.steps_per_generation == 0 {
            return Err(Error::Config("trainer.steps_per_generation must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 || self.warmup_lr <= 0.0 {
            return Err(Error::Config("learning rates must be > 0".into()));
        }
        if self.init_scale <= 0.0 {
            return Err(Error::Config("trainer.init_scale must be > 0".into()));
        }
        if self.warmup_batch == 0 {
            return Err(Error::Config("trainer.warmup_batch must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: String,
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub masks: MaskConfig,
    pub gates: GateConfig,
    pub objective: ObjectiveConfig,
    pub rewards: RewardConfig,
    pub decoding: DecodingParams,
    pub trainer: TrainerParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: "runs/default".into(),
            model: ModelConfig::default(),
            task: TaskSpec::default(),
            masks: MaskConfig::default(),
            gates: GateConfig::default(),
            objective: ObjectiveConfig::default(),
            rewards: RewardConfig::default(),
            decoding: DecodingParams::default(),
            trainer: TrainerParams::default(),
        }
    }
}

impl RunConfig {
    pub fn layout(&self) -> Result<VocabLayout> {
        VocabLayout::for_vocab(self.model.vocab_size)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let layout = self.layout()?;
        self.task.validate(&layout, self.model.d_audio)?;
        self.masks.validate()?;
        self.gates.validate()?;
        self.decoding.validate()?;
        self.trainer.validate()?;
        if self.objective.beta < 0.0 || self.objective.eta < 0.0 {
            return Err(Error::Config("objective.beta and objective.eta must be >= 0".into()));
        }
        if self.rewards.lambda_acc < 0.0
            || self.rewards.lambda_format < 0.0
            || self.rewards.lambda_cons < 0.0
        {
            return Err(Error::Config("reward weights must be >= 0".into()));
        }
        // The longest sequence the trainer can produce must fit.
        let prompt_len = 3 + self.task.keys;
        let needed = self.task.frames + prompt_len + self.decoding.max_new_tokens;
        if needed > self.model.max_seq_len {
            return Err(Error::Config(format!(
                "audio + prompt + max_new_tokens = {needed} exceeds model.max_seq_len {}",
                self.model.max_seq_len
            )));
        }
        Ok(())
    }

    /// Echo the fully resolved configuration into the run directory.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join("resolved-config.json"),
            serde_json::to_string_pretty(self)?,
        )?;
        Ok(())
    }
}

/// Flag-level overrides; `None` leaves the file/default value in place.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<String>,
    pub eta: Option<f64>,
    pub beta: Option<f64>,
    pub total_steps: Option<usize>,
    pub warmup_steps: Option<usize>,
    pub group_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub uniform_mask: Option<bool>,
    pub eval_instances: Option<usize>,
}

/// Load a config file (or defaults when `path` is `None`), apply flag
/// overrides, then the `MAPO_SEED` fallback, then validate.
pub fn parse_config(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let (mut cfg, seed_in_file) = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            let value: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            let seed_in_file = value.get("seed").is_some();
            let cfg: RunConfig = serde_json::from_value(value)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            (cfg, seed_in_file)
        }
        None => (RunConfig::default(), false),
    };

    if let Some(seed) = overrides.seed {
        cfg.seed = seed;
    } else if !seed_in_file {
        if let Ok(env_seed) = std::env::var("MAPO_SEED") {
            cfg.seed = env_seed
                .parse()
                .map_err(|_| Error::Config(format!("MAPO_SEED {env_seed:?} is not a u64")))?;
        }
    }
    if let Some(v) = overrides.out_dir.clone() {
        cfg.out_dir = v;
    }
    if let Some(v) = overrides.eta {
        cfg.objective.eta = v;
    }
    if let Some(v) = overrides.beta {
        cfg.objective.beta = v;
    }
    if let Some(v) = overrides.total_steps {
        cfg.trainer.total_steps = v;
    }
    if let Some(v) = overrides.warmup_steps {
        cfg.trainer.warmup_steps = v;
    }
    if let Some(v) = overrides.group_size {
        cfg.trainer.group_size = v;
    }
    if let Some(v) = overrides.learning_rate {
        cfg.trainer.learning_rate = v;
    }
    if let Some(v) = overrides.uniform_mask {
        cfg.objective.uniform_mask = v;
    }
    if let Some(v) = overrides.eval_instances {
        cfg.trainer.eval_instances = v;
    }

    cfg.validate()?;
    Ok(cfg)
}
