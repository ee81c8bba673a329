use crate::arch::ModelConfig;
use crate::degrade::TaskSet;
use crate::error::{Error, Result};
use crate::losses::ContrastiveConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    /// Train the pseudo-GT network first, then freeze it and train the rest.
    #[default]
    Stepwise,
    /// Train all three parameter sets together.
    Joint,
}

/// A full experiment description. Every field has a default, so `{}` is a
/// valid config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Master seed; every random stream is derived from it by name.
    pub seed: u64,
    pub model: ModelConfig,
    /// Training patch height.
    pub height: usize,
    /// Training patch width.
    pub width: usize,
    pub lr: f64,
    /// Learning rate from `decay_step` on (counted within each stage).
    pub lr_decayed: f64,
    pub decay_step: u64,
    pub pretrain_iters: u64,
    /// Iterations of each fine-tuning phase.
    pub finetune_iters: u64,
    /// Pairs per optimizer step; gradients are averaged.
    pub batch_size: usize,
    /// Weight of the contrastive term during pre-training.
    pub lambda: f64,
    pub contrastive: ContrastiveConfig,
    pub tasks: TaskSet,
    pub finetune_mode: FinetuneMode,
    /// Task used by `finetune`/`compare` when none is given on the command line.
    pub finetune_task: Option<String>,
    /// Joint mode only: block gradients from the second prior pass into the
    /// pseudo-GT network.
    pub detach_pseudo_gt: bool,
    /// Size of each task's fixed evaluation set.
    pub eval_images: usize,
    /// Directory of P6 images to crop clean patches from; synthetic if unset.
    pub clean_dir: Option<PathBuf>,
    pub pretrain_checkpoint: Option<PathBuf>,
    pub finetune_checkpoint: Option<PathBuf>,
    /// Record elapsed seconds in the training log. Off makes logs
    /// byte-reproducible.
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            height: 16,
            width: 16,
            lr: 2e-4,
            lr_decayed: 1e-4,
            decay_step: 1500,
            pretrain_iters: 3000,
            finetune_iters: 1000,
            batch_size: 1,
            lambda: 0.1,
            contrastive: ContrastiveConfig::default(),
            tasks: TaskSet::default(),
            finetune_mode: FinetuneMode::Stepwise,
            finetune_task: None,
            detach_pseudo_gt: false,
            eval_images: 32,
            clean_dir: None,
            pretrain_checkpoint: None,
            finetune_checkpoint: None,
            log_wall_time: true,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Learning rate for the given 0-based iteration of a stage.
    pub fn lr_at(&self, iteration: u64) -> f64 {
        if iteration < self.decay_step {
            self.lr
        } else {
            self.lr_decayed
        }
    }

    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, msg: String| Err(Error::Config(format!("{name}: {msg}")));
        self.model.validate().map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("model.{m}")),
            other => other,
        })?;
        for (name, v) in [("lr", self.lr), ("lr_decayed", self.lr_decayed)] {
            if !(v > 0.0 && v.is_finite()) {
                return field(name, format!("must be positive, got {v}"));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return field("lambda", format!("must be nonnegative, got {}", self.lambda));
        }
        for (name, v) in [("pretrain_iters", self.pretrain_iters), ("finetune_iters", self.finetune_iters)] {
            if v == 0 {
                return field(name, "must be at least 1".into());
            }
        }
        if self.batch_size == 0 {
            return field("batch_size", "must be at least 1".into());
        }
        if self.eval_images == 0 {
            return field("eval_images", "must be at least 1".into());
        }
        if self.height < 8 || self.width < 8 {
            return field("height/width", format!("patches must be at least 8x8, got {}x{}", self.height, self.width));
        }
        let p = self.model.patch_size;
        if self.height % p != 0 || self.width % p != 0 {
            return field(
                "model.patch_size",
                format!("patch_size {p} must divide the {}x{} patch size", self.height, self.width),
            );
        }
        let n = (self.height / p) * (self.width / p);
        if n > self.model.max_tokens {
            return field("model.max_tokens", format!("{n} tokens needed, {} available", self.model.max_tokens));
        }
        if n < 2 {
            return field("model.patch_size", "the contrastive loss needs at least 2 tokens per image".into());
        }
        self.contrastive.validate()?;
        self.tasks.validate()?;
        if let Some(t) = &self.finetune_task {
            self.tasks.get(t).map_err(|e| Error::Config(format!("finetune_task: {e}")))?;
        }
        Ok(())
    }
}

/// Reads, defaults and validates a JSON config file.
pub fn parse_config(path: impl AsRef<Path>) -> Result<TrainConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    TrainConfig::from_json(&text)
}
