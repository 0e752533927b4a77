//! Synthetic world generation: per-class Gaussian mixtures, a partially
//! corrupted training dataset, the frozen encoder, and the analytic reward.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{ConditionEncoder, Prompt};
use crate::error::Error;
use crate::harness::config::{streams, ExperimentConfig};
use crate::reward::{ClassMixture, MixtureComponent, RewardModel};
use crate::schedule::NoiseSchedule;
use crate::util::{derive_rng, mix_seed, standard_normal};
use crate::Result;

pub const WORLD_FORMAT_VERSION: u32 = 1;

/// One training example: prompt class, corruption flag, and the point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetRow {
    pub class: usize,
    pub corrupted: bool,
    pub x: Vec<f64>,
}

/// The complete frozen world: everything downstream stages consume.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct World {
    pub format_version: u32,
    pub config_hash: String,
    pub mixtures: Vec<ClassMixture>,
    pub encoder: ConditionEncoder,
    pub reward: RewardModel,
    pub degraded_class: usize,
    pub dataset: Vec<DatasetRow>,
}

impl World {
    pub fn schedule(config: &ExperimentConfig) -> Result<NoiseSchedule<f64>> {
        NoiseSchedule::linear(
            config.schedule.t_infer,
            config.schedule.beta_min,
            config.schedule.beta_max,
        )
        .map_err(Error::from)
    }

    pub fn handcrafted_negative(&self) -> Result<crate::trainer::NegativeEmbedding> {
        let vec = self.encoder.encode(Prompt::Class(self.degraded_class))?;
        Ok(crate::trainer::NegativeEmbedding {
            format_version: crate::trainer::EMBEDDING_FORMAT_VERSION,
            vector: vec.data().to_vec(),
            d_e: self.encoder.d_e(),
            encoder_fingerprint: self.encoder.fingerprint().to_string(),
            provenance: crate::trainer::Provenance::NullInit,
            config_hash: self.config_hash.clone(),
            reward_curve_path: None,
        })
    }

    pub fn training_pairs(&self) -> Vec<(Prompt, Vec<f64>)> {
        self.dataset
            .iter()
            .map(|row| (Prompt::Class(row.class), row.x.clone()))
            .collect()
    }
}

/// Deterministic mixture construction: component means on a ring with
/// per-component jitter, mild diagonal covariances, equal weights.
fn build_mixtures(config: &ExperimentConfig, seed: u64) -> Vec<ClassMixture> {
    let k = config.world.components_per_class;
    let d = config.world.d_x;
    let classes = config.world.classes;
    let mut rng = derive_rng(seed, 0);
    (0..classes)
        .map(|c| {
            // class anchor on a ring of radius 4 (first two coordinates)
            let angle = 2.0 * std::f64::consts::PI * c as f64 / classes as f64;
            let mut anchor = vec![0.0; d];
            anchor[0] = 4.0 * angle.cos();
            if d > 1 {
                anchor[1] = 4.0 * angle.sin();
            }
            let components = (0..k)
                .map(|_| {
                    let jitter = standard_normal(&mut rng, d);
                    let mean: Vec<f64> =
                        anchor.iter().zip(&jitter).map(|(a, j)| a + 0.8 * j).collect();
                    let cov_diag: Vec<f64> =
                        (0..d).map(|_| 0.05 + 0.1 * rng.gen::<f64>()).collect();
                    MixtureComponent { weight: 1.0 / k as f64, mean, cov_diag }
                })
                .collect();
            ClassMixture { components }
        })
        .collect()
}

/// Builds the frozen world: mixtures, encoder, analytic reward, and the
/// (deliberately imperfect) training dataset. Deterministic in the config.
pub fn generate_world(config: &ExperimentConfig) -> Result<World> {
    config.validate()?;
    let world_seed = config.seed(streams::WORLD);
    let mixtures = build_mixtures(config, world_seed);
    let reward = RewardModel::analytic(config.world.d_x, mixtures.clone())?;
    let names = (0..config.world.classes).map(|c| format!("class{c}")).collect();
    let encoder = ConditionEncoder::random(names, config.world.d_e, config.seed(streams::ENCODER))?;

    let mut dataset = Vec::with_capacity(config.world.classes * config.world.samples_per_class);
    for (c, mixture) in mixtures.iter().enumerate() {
        let mut rng = derive_rng(mix_seed(world_seed, &[c as u64 + 1]), 0);
        for _ in 0..config.world.samples_per_class {
            let clean = mixture.sample(&mut rng);
            let u: f64 = rng.gen();
            // corruption_fraction = 0 disables corruption entirely, including
            // the degraded class
            let corrupt = config.world.corruption_fraction > 0.0
                && (c == config.world.degraded_class || u < config.world.corruption_fraction);
            let x = if corrupt && config.world.corruption_sigma > 0.0 {
                let z = standard_normal(&mut rng, config.world.d_x);
                clean
                    .iter()
                    .zip(z)
                    .map(|(&v, n)| v + config.world.corruption_sigma * n)
                    .collect()
            } else {
                clean
            };
            dataset.push(DatasetRow { class: c, corrupted: corrupt, x });
        }
    }

    Ok(World {
        format_version: WORLD_FORMAT_VERSION,
        config_hash: config.hash(),
        mixtures,
        encoder,
        reward,
        degraded_class: config.world.degraded_class,
        dataset,
    })
}
