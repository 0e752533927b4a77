//! Experiment configuration: one flat TOML document whose hash stamps every
//! artifact. Defaults equal the reference configuration.

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::trainer::{GlobalTrainConfig, PerSampleConfig};
use crate::util::{mix_seed, sha256_hex};
use crate::Result;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSection {
    pub classes: usize,
    pub d_x: usize,
    pub d_e: usize,
    pub components_per_class: usize,
    pub samples_per_class: usize,
    /// Fraction of each class's samples receiving heavy noise.
    pub corruption_fraction: f64,
    pub corruption_sigma: f64,
    /// This class's dataset is fully corrupted; its frozen embedding serves
    /// as the handcrafted-negative analog.
    pub degraded_class: usize,
}

impl Default for WorldSection {
    fn default() -> Self {
        WorldSection {
            classes: 8,
            d_x: 2,
            d_e: 16,
            components_per_class: 2,
            samples_per_class: 64,
            corruption_fraction: 0.25,
            corruption_sigma: 0.75,
            degraded_class: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub t_infer: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection { t_infer: 30, beta_min: 0.01, beta_max: 0.28 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub p_drop: f64,
    pub width: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection { steps: 3000, learning_rate: 4e-3, batch_size: 16, p_drop: 0.1, width: 48 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainGlobalSection {
    pub total_steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub t_window_max: usize,
    pub gamma: f64,
    pub learnable_gamma: bool,
}

impl Default for TrainGlobalSection {
    fn default() -> Self {
        TrainGlobalSection {
            total_steps: 1200,
            learning_rate: 5e-3,
            batch_size: 32,
            weight_decay: 0.01,
            t_window_max: 10,
            gamma: 7.5,
            learnable_gamma: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerSampleSection {
    pub max_steps: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub fixed_noise: bool,
}

impl Default for PerSampleSection {
    fn default() -> Self {
        PerSampleSection { max_steps: 10, patience: 3, learning_rate: 5e-3, fixed_noise: true }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub n_seeds: usize,
    pub similarity_seeds: usize,
    pub adapter_ranks: Vec<usize>,
    pub probe_prompts: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { n_seeds: 256, similarity_seeds: 64, adapter_ranks: vec![2, 4], probe_prompts: 4 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferSection {
    pub model_b_width: usize,
}

impl Default for TransferSection {
    fn default() -> Self {
        TransferSection { model_b_width: 32 }
    }
}

/// Fixed seed-stream tags: every nested seed derives from the master seed.
pub mod streams {
    pub const WORLD: u64 = 1;
    pub const ENCODER: u64 = 2;
    pub const NETWORK_A: u64 = 3;
    pub const PRETRAIN_A: u64 = 4;
    pub const TRAIN_GLOBAL: u64 = 5;
    pub const PER_SAMPLE: u64 = 6;
    pub const EVAL: u64 = 7;
    pub const PROBE: u64 = 8;
    pub const SIMILARITY: u64 = 9;
    pub const NETWORK_B: u64 = 10;
    pub const PRETRAIN_B: u64 = 11;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub world: WorldSection,
    pub schedule: ScheduleSection,
    pub pretrain: PretrainSection,
    pub train_global: TrainGlobalSection,
    pub per_sample: PerSampleSection,
    pub eval: EvalSection,
    pub transfer: TransferSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            master_seed: 0,
            world: WorldSection::default(),
            schedule: ScheduleSection::default(),
            pretrain: PretrainSection::default(),
            train_global: TrainGlobalSection::default(),
            per_sample: PerSampleSection::default(),
            eval: EvalSection::default(),
            transfer: TransferSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::config("config", format!("cannot read {}: {e}", path.display()))
        })?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| Error::config("config", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &str, msg: &str| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::config(field, msg))
            }
        };
        check(self.world.classes >= 2, "world.classes", "need at least 2 classes")?;
        check(self.world.d_x >= 1, "world.d_x", "must be positive")?;
        check(self.world.d_e >= 1, "world.d_e", "must be positive")?;
        check(self.world.components_per_class >= 1, "world.components_per_class", "must be positive")?;
        check(self.world.samples_per_class >= 4, "world.samples_per_class", "need at least 4")?;
        check(
            (0.0..=1.0).contains(&self.world.corruption_fraction),
            "world.corruption_fraction",
            "must lie in [0, 1]",
        )?;
        check(self.world.corruption_sigma >= 0.0, "world.corruption_sigma", "must be non-negative")?;
        check(
            self.world.degraded_class < self.world.classes,
            "world.degraded_class",
            "must name an existing class",
        )?;
        check(self.schedule.t_infer >= 2, "schedule.t_infer", "need at least 2 steps")?;
        check(
            self.schedule.beta_min > 0.0 && self.schedule.beta_max < 1.0
                && self.schedule.beta_min <= self.schedule.beta_max,
            "schedule.beta_min",
            "need 0 < beta_min <= beta_max < 1",
        )?;
        check(self.pretrain.steps >= 1, "pretrain.steps", "must be positive")?;
        check(self.pretrain.width >= 1, "pretrain.width", "must be positive")?;
        check(
            (0.0..=1.0).contains(&self.pretrain.p_drop),
            "pretrain.p_drop",
            "must lie in [0, 1]",
        )?;
        check(self.train_global.total_steps >= 1, "train_global.total_steps", "must be positive")?;
        check(
            self.train_global.t_window_max < self.schedule.t_infer,
            "train_global.t_window_max",
            "must be below schedule.t_infer",
        )?;
        check(
            self.train_global.gamma.is_finite() && self.train_global.gamma >= 0.0,
            "train_global.gamma",
            "must be finite and non-negative",
        )?;
        check(self.per_sample.max_steps >= 1, "per_sample.max_steps", "must be positive")?;
        check(self.per_sample.patience >= 1, "per_sample.patience", "must be positive")?;
        check(self.eval.n_seeds >= 1, "eval.n_seeds", "must be positive")?;
        check(self.eval.similarity_seeds >= 1, "eval.similarity_seeds", "must be positive")?;
        check(self.eval.probe_prompts >= 1, "eval.probe_prompts", "must be positive")?;
        check(self.transfer.model_b_width >= 1, "transfer.model_b_width", "must be positive")?;
        Ok(())
    }

    /// Content hash of the canonical (JSON) serialization; stamps artifacts.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn seed(&self, stream: u64) -> u64 {
        mix_seed(self.master_seed, &[stream])
    }

    pub fn global_train_config(&self) -> GlobalTrainConfig {
        GlobalTrainConfig {
            total_steps: self.train_global.total_steps,
            learning_rate: self.train_global.learning_rate,
            batch_size: self.train_global.batch_size,
            weight_decay: self.train_global.weight_decay,
            t_window_max: self.train_global.t_window_max,
            gamma: self.train_global.gamma,
            learnable_gamma: self.train_global.learnable_gamma,
            seed: self.seed(streams::TRAIN_GLOBAL),
        }
    }

    pub fn per_sample_config(&self, compat_paper_alg1: bool) -> PerSampleConfig {
        PerSampleConfig {
            max_steps: self.per_sample.max_steps,
            patience: self.per_sample.patience,
            learning_rate: self.per_sample.learning_rate,
            fixed_noise: self.per_sample.fixed_noise,
            compat_paper_alg1,
            gamma: self.train_global.gamma,
            seed: self.seed(streams::PER_SAMPLE),
        }
    }

    /// Evaluation prompts: every class except the degraded one.
    pub fn eval_prompts(&self) -> Vec<crate::diffusion::Prompt> {
        (0..self.world.classes)
            .filter(|&c| c != self.world.degraded_class)
            .map(crate::diffusion::Prompt::Class)
            .collect()
    }
}
