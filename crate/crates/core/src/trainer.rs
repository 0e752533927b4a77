//! Negative-embedding learning: global reward-ascent training, per-sample
//! patience-based refinement, and the shared-seed evaluation protocol.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::diffusion::{ConditionEncoder, Prompt, ScoreNetwork};
use crate::error::Error;
use crate::optim::{Adam, AdamConfig};
use crate::reward::RewardModel;
use crate::sampling::{sample, sample_to_t_then_x0hat, GuidanceConfig, Solver};
use crate::schedule::NoiseSchedule;
use crate::util::{derive_rng, mix_seed, sha256_hex};
use crate::{Result, Tensor};

pub const EMBEDDING_FORMAT_VERSION: u32 = 1;

/// A training run aborts after this many consecutive non-finite steps.
const MAX_CONSECUTIVE_NON_FINITE: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    NullInit,
    GlobalTrained,
    PerSample,
}

/// A learned (or null-initialized) negative embedding, pinned to the encoder
/// it was trained against and to the config that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NegativeEmbedding {
    pub format_version: u32,
    pub vector: Vec<f64>,
    pub d_e: usize,
    pub encoder_fingerprint: String,
    pub provenance: Provenance,
    pub config_hash: String,
    pub reward_curve_path: Option<String>,
}

impl NegativeEmbedding {
    pub fn null_init(encoder: &ConditionEncoder) -> Result<Self> {
        let phi = encoder.encode(Prompt::Null)?;
        Ok(NegativeEmbedding {
            format_version: EMBEDDING_FORMAT_VERSION,
            vector: phi.data().to_vec(),
            d_e: encoder.d_e(),
            encoder_fingerprint: encoder.fingerprint().to_string(),
            provenance: Provenance::NullInit,
            config_hash: String::new(),
            reward_curve_path: None,
        })
    }

    /// Checked at every use: the embedding must belong to this encoder.
    pub fn check_encoder(&self, encoder: &ConditionEncoder) -> Result<()> {
        if self.vector.len() != encoder.d_e() {
            return Err(Error::invalid(format!(
                "embedding length {} does not match encoder d_e {}",
                self.vector.len(),
                encoder.d_e()
            )));
        }
        if self.encoder_fingerprint != encoder.fingerprint() {
            return Err(Error::FingerprintMismatch {
                have: self.encoder_fingerprint.clone(),
                want: encoder.fingerprint().to_string(),
            });
        }
        Ok(())
    }

    pub fn tensor(&self) -> Tensor {
        Tensor::vector(self.vector.clone())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let emb: NegativeEmbedding = serde_json::from_str(&text)?;
        if emb.format_version != EMBEDDING_FORMAT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported embedding format version {}",
                emb.format_version
            )));
        }
        Ok(emb)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GlobalTrainConfig {
    pub total_steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Inclusive upper end of the t_stop window; t_stop is drawn uniformly
    /// from [0, t_window_max].
    pub t_window_max: usize,
    pub gamma: f64,
    /// When set, γ is optimized alongside n (soft study; results logged).
    pub learnable_gamma: bool,
    pub seed: u64,
}

impl Default for GlobalTrainConfig {
    fn default() -> Self {
        GlobalTrainConfig {
            total_steps: 4000,
            learning_rate: 5e-3,
            batch_size: 64,
            weight_decay: 0.01,
            t_window_max: 10,
            gamma: 7.5,
            learnable_gamma: false,
            seed: 0,
        }
    }
}

impl GlobalTrainConfig {
    pub fn validate(&self, schedule: &NoiseSchedule<f64>) -> Result<()> {
        if self.total_steps == 0 || self.batch_size == 0 {
            return Err(Error::invalid("total_steps and batch_size must be positive"));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::invalid("learning_rate must be finite and non-negative"));
        }
        if self.t_window_max >= schedule.steps() {
            return Err(Error::invalid(format!(
                "t_window_max {} must be below T = {}",
                self.t_window_max,
                schedule.steps()
            )));
        }
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(Error::invalid("gamma must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

/// Outcome of a global training run.
pub struct GlobalTrainResult {
    pub embedding: NegativeEmbedding,
    /// Mean batch reward per step; skipped (non-finite) steps keep their
    /// observed value so the log is honest.
    pub reward_curve: Vec<f64>,
    /// Final γ; differs from the configured value only with learnable_gamma.
    pub final_gamma: f64,
}

/// Reward-ascent training of the global negative embedding. Everything but
/// n (and optionally γ) stays frozen; one DDIM prefix plus one differentiable
/// guided prediction per batch element.
pub fn train_global(
    net: &ScoreNetwork,
    encoder: &ConditionEncoder,
    schedule: &NoiseSchedule<f64>,
    reward_model: &RewardModel,
    prompt_set: &[Prompt],
    config: &GlobalTrainConfig,
) -> Result<GlobalTrainResult> {
    config.validate(schedule)?;
    if prompt_set.is_empty() {
        return Err(Error::invalid("prompt set must be non-empty"));
    }
    let theta_hash_before = net.params_hash();
    let encoder_fp_before = encoder.fingerprint().to_string();
    let schedule_before = schedule.clone();

    let mut n: Vec<f64> = encoder.encode(Prompt::Null)?.data().to_vec();
    let mut gamma = config.gamma;
    let opt_cfg = AdamConfig {
        lr: config.learning_rate,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: config.weight_decay,
        cosine_total_steps: Some(config.total_steps),
    };
    let blocks: Vec<usize> = if config.learnable_gamma {
        vec![n.len(), 1]
    } else {
        vec![n.len()]
    };
    let mut opt = Adam::new(opt_cfg, &blocks);

    let mut rng = derive_rng(config.seed, 0);
    let mut reward_curve = Vec::with_capacity(config.total_steps);
    let mut consecutive_bad = 0usize;

    for _ in 0..config.total_steps {
        let tape = Tape::new();
        let n_leaf = tape.leaf(&Tensor::vector(n.clone()));
        let gamma_leaf = if config.learnable_gamma {
            Some(tape.leaf(&Tensor::scalar(gamma)))
        } else {
            None
        };

        let mut prompts = Vec::with_capacity(config.batch_size);
        let mut x0hats = Vec::with_capacity(config.batch_size);
        let mut failed = false;
        for _ in 0..config.batch_size {
            let prompt = prompt_set[rng.gen_range(0..prompt_set.len())];
            let t_stop = rng.gen_range(0..=config.t_window_max);
            let noise_seed: u64 = rng.gen();
            let x0hat = match &gamma_leaf {
                None => sample_to_t_then_x0hat(
                    net, encoder, schedule, prompt, &n_leaf, gamma, Solver::Ddim, t_stop,
                    noise_seed, None,
                )?,
                Some(g) => crate::sampling::sample_to_t_then_x0hat_taped_gamma(
                    net, encoder, schedule, prompt, &n_leaf, g, Solver::Ddim, t_stop, noise_seed,
                )?,
            };
            if !x0hat.all_finite() {
                failed = true;
                break;
            }
            prompts.push(prompt);
            x0hats.push(x0hat);
        }
        let mean_reward = if failed {
            f64::NAN
        } else {
            let (mean, _) = reward_model.batch_reward(&prompts, &x0hats)?;
            let value = mean.item();
            if value.is_finite() {
                let grads = tape.backward(&mean)?;
                let g_n = grads
                    .wrt(&n_leaf)
                    .map(|g| g.data().to_vec())
                    .unwrap_or_else(|| vec![0.0; n.len()]);
                // ascend the reward: descend its negation
                let mut params = vec![n.clone()];
                let mut gs = vec![g_n.iter().map(|v| -v).collect::<Vec<f64>>()];
                if let Some(gl) = &gamma_leaf {
                    params.push(vec![gamma]);
                    let gg = grads.wrt(gl).map(|g| g.data()[0]).unwrap_or(0.0);
                    gs.push(vec![-gg]);
                }
                opt.step(&mut params, &gs);
                n = params[0].clone();
                if config.learnable_gamma {
                    gamma = params[1][0].max(0.0);
                }
            }
            value
        };
        if mean_reward.is_finite() {
            consecutive_bad = 0;
        } else {
            consecutive_bad += 1;
            if consecutive_bad >= MAX_CONSECUTIVE_NON_FINITE {
                return Err(Error::Diverged(MAX_CONSECUTIVE_NON_FINITE));
            }
        }
        reward_curve.push(mean_reward);
    }

    // frozen-world guarantee
    if net.params_hash() != theta_hash_before
        || encoder.fingerprint() != encoder_fp_before
        || *schedule != schedule_before
    {
        return Err(Error::invalid("frozen world was mutated during training"));
    }

    Ok(GlobalTrainResult {
        embedding: NegativeEmbedding {
            format_version: EMBEDDING_FORMAT_VERSION,
            vector: n,
            d_e: encoder.d_e(),
            encoder_fingerprint: encoder.fingerprint().to_string(),
            provenance: Provenance::GlobalTrained,
            config_hash: config.hash(),
            reward_curve_path: None,
        },
        reward_curve,
        final_gamma: gamma,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerSampleConfig {
    pub max_steps: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub fixed_noise: bool,
    /// Verbatim-listing semantics: J_best starts at 0, noise is resampled
    /// every iteration, and the final (not best) embedding is returned.
    pub compat_paper_alg1: bool,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for PerSampleConfig {
    fn default() -> Self {
        PerSampleConfig {
            max_steps: 10,
            patience: 3,
            learning_rate: 5e-3,
            fixed_noise: true,
            compat_paper_alg1: false,
            gamma: 7.5,
            seed: 0,
        }
    }
}

impl PerSampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 || self.patience == 0 {
            return Err(Error::invalid("max_steps and patience must be at least 1"));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::invalid("learning_rate must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TuningIteration {
    pub iter: usize,
    pub reward: f64,
    pub improved: bool,
    pub p_ctr: usize,
}

/// Full log of one per-sample tuning run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TuningState {
    pub iterations: Vec<TuningIteration>,
    pub j_best: f64,
    /// True when the run ended by exhausting patience rather than max_steps.
    pub early_stopped: bool,
}

/// Patience-based per-sample refinement of a global embedding. The reward is
/// evaluated on the one-step prediction after a full severed DDIM prefix
/// (t_stop = 0), so J is the reward of the near-final sample.
pub fn train_per_sample(
    net: &ScoreNetwork,
    encoder: &ConditionEncoder,
    schedule: &NoiseSchedule<f64>,
    reward_model: &RewardModel,
    prompt: Prompt,
    global_n: &NegativeEmbedding,
    config: &PerSampleConfig,
) -> Result<(NegativeEmbedding, TuningState)> {
    config.validate()?;
    global_n.check_encoder(encoder)?;

    let resample = config.compat_paper_alg1 || !config.fixed_noise;
    let mut n = global_n.vector.clone();
    let mut best = n.clone();
    let mut j_best = if config.compat_paper_alg1 { 0.0 } else { f64::NEG_INFINITY };
    let mut p_ctr = 0usize;
    let mut opt = Adam::new(AdamConfig::adam(config.learning_rate), &[n.len()]);
    let mut iterations = Vec::new();
    let mut early_stopped = false;

    for iter in 1..=config.max_steps {
        let noise_seed = if resample {
            mix_seed(config.seed, &[iter as u64])
        } else {
            mix_seed(config.seed, &[0])
        };
        let tape = Tape::new();
        let n_leaf = tape.leaf(&Tensor::vector(n.clone()));
        let x0hat = sample_to_t_then_x0hat(
            net, encoder, schedule, prompt, &n_leaf, config.gamma, Solver::Ddim, 0, noise_seed,
            None,
        )?;
        let j = reward_model.reward(prompt, &x0hat)?;
        let j_val = j.item();
        if !j_val.is_finite() {
            return Err(Error::Diverged(1));
        }
        let improved = j_val > j_best;
        if improved {
            j_best = j_val;
            p_ctr = 0;
            best = n.clone();
        } else {
            p_ctr += 1;
        }
        iterations.push(TuningIteration { iter, reward: j_val, improved, p_ctr });
        if p_ctr >= config.patience {
            early_stopped = true;
            break;
        }
        let grads = tape.backward(&j)?;
        let g = grads
            .wrt(&n_leaf)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n.len()]);
        let mut params = vec![n.clone()];
        opt.step(&mut params, &[g.iter().map(|v| -v).collect::<Vec<f64>>()]);
        n = params[0].clone();
    }

    let returned = if config.compat_paper_alg1 { n } else { best };
    Ok((
        NegativeEmbedding {
            format_version: EMBEDDING_FORMAT_VERSION,
            vector: returned,
            d_e: encoder.d_e(),
            encoder_fingerprint: encoder.fingerprint().to_string(),
            provenance: Provenance::PerSample,
            config_hash: config.hash(),
            reward_curve_path: None,
        },
        TuningState { iterations, j_best, early_stopped },
    ))
}

/// Per-prompt mean rewards plus the overall mean for one embedding.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_prompt: Vec<(Prompt, f64)>,
    pub overall_mean: f64,
    pub n_seeds: usize,
    pub gamma: f64,
}

/// Full guided DDIM evaluation. `negative = None` means φ. Seeds are a pure
/// function of (master_seed, prompt index, seed index), so compared
/// embeddings see identical noise.
pub fn evaluate(
    net: &ScoreNetwork,
    encoder: &ConditionEncoder,
    schedule: &NoiseSchedule<f64>,
    reward_model: &RewardModel,
    negative: Option<&NegativeEmbedding>,
    prompt_set: &[Prompt],
    n_seeds: usize,
    gamma: f64,
    master_seed: u64,
) -> Result<EvalReport> {
    if n_seeds == 0 {
        return Err(Error::invalid("n_seeds must be at least 1"));
    }
    if prompt_set.is_empty() {
        return Err(Error::invalid("prompt set must be non-empty"));
    }
    let neg_tensor = match negative {
        Some(e) => {
            e.check_encoder(encoder)?;
            Some(e.tensor())
        }
        None => None,
    };
    let guidance = GuidanceConfig {
        gamma,
        negative: neg_tensor,
        solver: Solver::Ddim,
        steps: schedule.steps(),
    };
    let per_prompt: Vec<(Prompt, f64)> = prompt_set
        .par_iter()
        .enumerate()
        .map(|(pi, &prompt)| -> Result<(Prompt, f64)> {
            let mut total = 0.0;
            for si in 0..n_seeds {
                let seed = mix_seed(master_seed, &[pi as u64, si as u64]);
                let run = sample(net, encoder, schedule, prompt, &guidance, seed)?;
                total += reward_model.reward(prompt, &run.x0)?.item();
            }
            Ok((prompt, total / n_seeds as f64))
        })
        .collect::<Result<_>>()?;
    let overall_mean =
        per_prompt.iter().map(|(_, r)| r).sum::<f64>() / per_prompt.len() as f64;
    Ok(EvalReport { per_prompt, overall_mean, n_seeds, gamma })
}

/// Fraction of prompts where a strictly beats b; ties count 0.5.
pub fn win_rate(rewards_a: &[f64], rewards_b: &[f64]) -> Result<f64> {
    if rewards_a.len() != rewards_b.len() {
        return Err(Error::invalid(format!(
            "win_rate length mismatch: {} vs {}",
            rewards_a.len(),
            rewards_b.len()
        )));
    }
    if rewards_a.is_empty() {
        return Err(Error::invalid("win_rate needs at least one prompt"));
    }
    let score: f64 = rewards_a
        .iter()
        .zip(rewards_b)
        .map(|(a, b)| {
            if a > b {
                1.0
            } else if a < b {
                0.0
            } else {
                0.5
            }
        })
        .sum();
    Ok(score / rewards_a.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::diffusion::{pretrain, PretrainConfig};
    use crate::reward::{ClassMixture, DiscriminatorSpec, MixtureComponent, RewardModel};
    use crate::sampling::{cfg_combine, cfg_combine_taped};
    use crate::util::standard_normal;

    struct World {
        net: ScoreNetwork,
        encoder: ConditionEncoder,
        schedule: NoiseSchedule<f64>,
        reward: RewardModel,
        prompts: Vec<Prompt>,
    }

    fn trained_world(seed: u64) -> World {
        let centers = [[2.0, 2.0], [-2.0, 2.0], [0.0, -2.5]];
        let names = (0..centers.len()).map(|i| format!("class{i}")).collect();
        let encoder = ConditionEncoder::random(names, 6, seed).unwrap();
        let schedule = NoiseSchedule::linear(12, 1e-3, 0.05).unwrap();
        let phi = encoder.encode(Prompt::Null).unwrap().data().to_vec();
        let net = ScoreNetwork::new(2, 6, 24, seed + 1, phi).unwrap();
        let mut rng = derive_rng(seed + 2, 0);
        let dataset: Vec<(Prompt, Vec<f64>)> = centers
            .iter()
            .enumerate()
            .flat_map(|(ci, c)| {
                let z: Vec<Vec<f64>> = (0..24).map(|_| standard_normal(&mut rng, 2)).collect();
                z.into_iter()
                    .map(move |zi| (Prompt::Class(ci), vec![c[0] + 0.3 * zi[0], c[1] + 0.3 * zi[1]]))
                    .collect::<Vec<_>>()
            })
            .collect();
        let cfg = PretrainConfig { steps: 250, learning_rate: 4e-3, batch_size: 16, p_drop: 0.1, seed: seed + 3 };
        let (net, _) = pretrain(&net, &encoder, &schedule, &dataset, &cfg).unwrap();
        let classes = centers
            .iter()
            .map(|c| ClassMixture {
                components: vec![MixtureComponent {
                    weight: 1.0,
                    mean: c.to_vec(),
                    cov_diag: vec![0.09, 0.09],
                }],
            })
            .collect();
        let reward = RewardModel::analytic(2, classes).unwrap();
        let prompts = (0..centers.len()).map(Prompt::Class).collect();
        World { net, encoder, schedule, reward, prompts }
    }

    fn constant_reward(dim: usize) -> RewardModel {
        // zero output layer: logit is identically b2, gradient identically 0
        RewardModel::TrainedDiscriminator(DiscriminatorSpec {
            dim,
            hidden: 4,
            w1: vec![0.1; 4 * dim],
            b1: vec![0.0; 4],
            w2: vec![0.0; 4],
            b2: vec![1.25],
            holdout_accuracy: f64::NAN,
        })
    }

    fn small_config(steps: usize, lr: f64) -> GlobalTrainConfig {
        GlobalTrainConfig {
            total_steps: steps,
            learning_rate: lr,
            batch_size: 8,
            weight_decay: 0.0,
            t_window_max: 4,
            gamma: 7.5,
            learnable_gamma: false,
            seed: 9,
        }
    }

    #[test]
    fn zero_learning_rate_returns_phi_exactly() {
        let w = trained_world(100);
        let cfg = small_config(5, 0.0);
        let out = train_global(&w.net, &w.encoder, &w.schedule, &w.reward, &w.prompts, &cfg).unwrap();
        let phi = w.encoder.encode(Prompt::Null).unwrap();
        assert_eq!(out.embedding.vector, phi.data());
        assert_eq!(out.embedding.provenance, Provenance::GlobalTrained);
        assert_eq!(out.reward_curve.len(), 5);
    }

    #[test]
    fn constant_reward_leaves_embedding_unchanged() {
        let w = trained_world(101);
        let cfg = small_config(5, 5e-3);
        let reward = constant_reward(2);
        let out = train_global(&w.net, &w.encoder, &w.schedule, &reward, &w.prompts, &cfg).unwrap();
        let phi = w.encoder.encode(Prompt::Null).unwrap();
        for (a, b) in out.embedding.vector.iter().zip(phi.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        for r in &out.reward_curve {
            assert_eq!(*r, 1.25);
        }
    }

    #[test]
    fn global_training_is_deterministic() {
        let w = trained_world(102);
        let cfg = small_config(6, 5e-3);
        let a = train_global(&w.net, &w.encoder, &w.schedule, &w.reward, &w.prompts, &cfg).unwrap();
        let b = train_global(&w.net, &w.encoder, &w.schedule, &w.reward, &w.prompts, &cfg).unwrap();
        assert_eq!(a.embedding.vector, b.embedding.vector);
        for (x, y) in a.reward_curve.iter().zip(&b.reward_curve) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn global_training_improves_reward() {
        let w = trained_world(103);
        let cfg = GlobalTrainConfig {
            total_steps: 150,
            batch_size: 8,
            seed: 4,
            ..small_config(150, 5e-3)
        };
        let out = train_global(&w.net, &w.encoder, &w.schedule, &w.reward, &w.prompts, &cfg).unwrap();
        let head: f64 = out.reward_curve[..25].iter().sum::<f64>() / 25.0;
        let tail: f64 = out.reward_curve[out.reward_curve.len() - 25..].iter().sum::<f64>() / 25.0;
        assert!(tail > head, "reward did not improve: {head} -> {tail}");

        // shared-seed evaluation: the learned embedding beats phi
        let eval_phi = evaluate(
            &w.net, &w.encoder, &w.schedule, &w.reward, None, &w.prompts, 16, 7.5, 55,
        )
        .unwrap();
        let eval_n = evaluate(
            &w.net, &w.encoder, &w.schedule, &w.reward, Some(&out.embedding), &w.prompts, 16, 7.5, 55,
        )
        .unwrap();
        assert!(
            eval_n.overall_mean > eval_phi.overall_mean,
            "learned {} vs phi {}",
            eval_n.overall_mean,
            eval_phi.overall_mean
        );
    }

    #[test]
    fn learnable_gamma_variant_runs_and_moves_gamma() {
        let w = trained_world(104);
        let mut cfg = small_config(30, 5e-3);
        cfg.learnable_gamma = true;
        let out = train_global(&w.net, &w.encoder, &w.schedule, &w.reward, &w.prompts, &cfg).unwrap();
        assert!(out.final_gamma.is_finite());
        assert!(out.final_gamma >= 0.0);
        let out2 = train_global(&w.net, &w.encoder, &w.schedule, &w.reward, &w.prompts, &cfg).unwrap();
        assert_eq!(out.final_gamma.to_bits(), out2.final_gamma.to_bits());
    }

    #[test]
    fn taped_gamma_cfg_matches_plain_and_finite_differences() {
        let neg = Tensor::vector(vec![0.2, -0.5, 1.0]);
        let cond = Tensor::vector(vec![-1.0, 0.4, 2.0]);
        let g = 3.7;
        let taped = cfg_combine_taped(&neg, &cond, &Tensor::scalar(g)).unwrap();
        let plain = cfg_combine(&neg, &cond, g).unwrap();
        for (a, b) in taped.data().iter().zip(plain.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        let err = grad_check(
            |ps: &[Tensor]| cfg_combine_taped(&neg, &cond, &ps[0])
                .map_err(|_| crate::TensorError::InvalidValue { op: "cfg_combine_taped", msg: "forward failed".into() })?
                .square()?
                .sum(),
            &[Tensor::scalar(g)],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn patience_counts_non_improving_iterations_exactly() {
        // lr = 0 with fixed noise: iteration 1 improves over -inf, every later
        // iteration ties, so the run stops after exactly P non-improving steps
        let w = trained_world(105);
        let global = NegativeEmbedding::null_init(&w.encoder).unwrap();
        let cfg = PerSampleConfig { learning_rate: 0.0, ..Default::default() };
        let (emb, state) = train_per_sample(
            &w.net, &w.encoder, &w.schedule, &w.reward, w.prompts[0], &global, &cfg,
        )
        .unwrap();
        assert!(state.early_stopped);
        assert_eq!(state.iterations.len(), 1 + cfg.patience);
        assert!(state.iterations[0].improved);
        for it in &state.iterations[1..] {
            assert!(!it.improved);
        }
        assert_eq!(state.iterations.last().unwrap().p_ctr, cfg.patience);
        assert_eq!(emb.vector, global.vector, "snapshot must be the iteration-1 embedding");
        assert_eq!(emb.provenance, Provenance::PerSample);
    }

    #[test]
    fn single_step_budget_returns_the_global_snapshot() {
        let w = trained_world(106);
        let global = NegativeEmbedding::null_init(&w.encoder).unwrap();
        let cfg = PerSampleConfig { max_steps: 1, ..Default::default() };
        let (emb, state) = train_per_sample(
            &w.net, &w.encoder, &w.schedule, &w.reward, w.prompts[1], &global, &cfg,
        )
        .unwrap();
        assert_eq!(state.iterations.len(), 1);
        assert_eq!(emb.vector, global.vector);
    }

    #[test]
    fn per_sample_best_dominates_global_on_shared_noise() {
        let w = trained_world(107);
        let global = NegativeEmbedding::null_init(&w.encoder).unwrap();
        let cfg = PerSampleConfig { seed: 31, ..Default::default() };
        for &prompt in &w.prompts {
            let (emb, state) = train_per_sample(
                &w.net, &w.encoder, &w.schedule, &w.reward, prompt, &global, &cfg,
            )
            .unwrap();
            // iteration 1 evaluates the global embedding on the shared noise
            let global_reward = state.iterations[0].reward;
            assert!(state.j_best >= global_reward, "{prompt:?}");
            // the returned snapshot reproduces j_best on the same noise
            let x0hat = crate::sampling::sample_to_t_then_x0hat(
                &w.net, &w.encoder, &w.schedule, prompt, &emb.tensor(), cfg.gamma,
                Solver::Ddim, 0, mix_seed(cfg.seed, &[0]), None,
            )
            .unwrap();
            let r = w.reward.reward(prompt, &x0hat).unwrap().item();
            assert!((r - state.j_best).abs() < 1e-12, "{prompt:?}: {r} vs {}", state.j_best);
        }
    }

    #[test]
    fn compat_mode_mishandles_negative_rewards_as_listed() {
        // verbatim semantics: J_best starts at 0, so strictly negative rewards
        // never register as improvements and the run stops after exactly P
        // iterations, returning the final (updated) embedding
        let w = trained_world(108);
        let global = NegativeEmbedding::null_init(&w.encoder).unwrap();
        let cfg = PerSampleConfig { compat_paper_alg1: true, ..Default::default() };
        let (_, probe) = train_per_sample(
            &w.net, &w.encoder, &w.schedule, &w.reward, w.prompts[0], &global,
            &PerSampleConfig { learning_rate: 0.0, ..Default::default() },
        )
        .unwrap();
        if probe.iterations[0].reward >= 0.0 {
            // reward happens to be non-negative on this world; nothing to check
            return;
        }
        let (emb, state) = train_per_sample(
            &w.net, &w.encoder, &w.schedule, &w.reward, w.prompts[0], &global, &cfg,
        )
        .unwrap();
        assert_eq!(state.j_best, 0.0);
        assert!(state.early_stopped);
        assert_eq!(state.iterations.len(), cfg.patience);
        assert!(state.iterations.iter().all(|it| !it.improved));
        // final-n return: updates happened on non-terminated iterations
        if cfg.patience > 1 {
            assert_ne!(emb.vector, global.vector);
        }
    }

    #[test]
    fn fingerprint_mismatch_is_rejected_at_use() {
        let w = trained_world(109);
        let other = ConditionEncoder::random(vec!["x".into()], 6, 999).unwrap();
        let foreign = NegativeEmbedding::null_init(&other).unwrap();
        let err = train_per_sample(
            &w.net, &w.encoder, &w.schedule, &w.reward, w.prompts[0], &foreign,
            &PerSampleConfig::default(),
        );
        assert!(matches!(err, Err(Error::FingerprintMismatch { .. })));
        let err = evaluate(
            &w.net, &w.encoder, &w.schedule, &w.reward, Some(&foreign), &w.prompts, 2, 7.5, 1,
        );
        assert!(matches!(err, Err(Error::FingerprintMismatch { .. })));
    }

    #[test]
    fn evaluation_is_deterministic_and_seed_shared() {
        let w = trained_world(110);
        let a = evaluate(&w.net, &w.encoder, &w.schedule, &w.reward, None, &w.prompts, 8, 7.5, 42).unwrap();
        let b = evaluate(&w.net, &w.encoder, &w.schedule, &w.reward, None, &w.prompts, 8, 7.5, 42).unwrap();
        for ((pa, ra), (pb, rb)) in a.per_prompt.iter().zip(&b.per_prompt) {
            assert_eq!(pa, pb);
            assert_eq!(ra.to_bits(), rb.to_bits());
        }
        // an embedding whose vector is phi sees the exact same noise as phi
        let null_emb = NegativeEmbedding::null_init(&w.encoder).unwrap();
        let c = evaluate(&w.net, &w.encoder, &w.schedule, &w.reward, Some(&null_emb), &w.prompts, 8, 7.5, 42).unwrap();
        for ((_, ra), (_, rc)) in a.per_prompt.iter().zip(&c.per_prompt) {
            assert_eq!(ra.to_bits(), rc.to_bits());
        }
        assert!(evaluate(&w.net, &w.encoder, &w.schedule, &w.reward, None, &w.prompts, 0, 7.5, 1).is_err());
        let single = evaluate(&w.net, &w.encoder, &w.schedule, &w.reward, None, &w.prompts[..1], 1, 7.5, 42).unwrap();
        assert_eq!(single.per_prompt.len(), 1);
    }

    #[test]
    fn win_rate_conventions() {
        assert_eq!(win_rate(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.5);
        assert_eq!(win_rate(&[5.0, 6.0, 7.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(win_rate(&[1.0, 2.0, 3.0], &[2.0, 1.0, 3.0]).unwrap(), 0.5);
        assert!(win_rate(&[1.0], &[1.0, 2.0]).is_err());
        assert!(win_rate(&[], &[]).is_err());
    }

    #[test]
    fn embedding_file_round_trip() {
        let w = trained_world(111);
        let mut emb = NegativeEmbedding::null_init(&w.encoder).unwrap();
        emb.config_hash = "abc".into();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("neg.json");
        emb.save(&path).unwrap();
        let back = NegativeEmbedding::load(&path).unwrap();
        assert_eq!(back.vector, emb.vector);
        assert_eq!(back.encoder_fingerprint, emb.encoder_fingerprint);
        assert_eq!(back.provenance, Provenance::NullInit);
        assert_eq!(back.config_hash, "abc");
        back.check_encoder(&w.encoder).unwrap();
    }

    #[test]
    fn config_validation_rejects_bad_windows() {
        let w = trained_world(112);
        let mut cfg = small_config(1, 1e-3);
        cfg.t_window_max = w.schedule.steps();
        assert!(train_global(&w.net, &w.encoder, &w.schedule, &w.reward, &w.prompts, &cfg).is_err());
        let bad = PerSampleConfig { max_steps: 0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = PerSampleConfig { patience: 0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
