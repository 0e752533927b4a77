//! Differentiable reward models: an analytic clean-mixture log-density and a
//! small trained discriminator, both scoring (prompt, sample) pairs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::diffusion::Prompt;
use crate::error::Error;
use crate::optim::{Adam, AdamConfig};
use crate::util::{derive_rng, standard_normal};
use crate::{Result, Tensor};

/// One Gaussian mixture component with diagonal covariance.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Diagonal of the covariance; positive entries.
    pub cov_diag: Vec<f64>,
}

/// Per-class target mixture.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClassMixture {
    pub components: Vec<MixtureComponent>,
}

impl ClassMixture {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::invalid("mixture needs at least one component"));
        }
        let wsum: f64 = self.components.iter().map(|c| c.weight).sum();
        if (wsum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("mixture weights sum to {wsum}, expected 1")));
        }
        for c in &self.components {
            if c.weight <= 0.0 {
                return Err(Error::invalid("mixture weights must be positive"));
            }
            if c.mean.len() != dim || c.cov_diag.len() != dim {
                return Err(Error::invalid("mixture component dimension mismatch"));
            }
            if c.cov_diag.iter().any(|&v| v <= 0.0) {
                return Err(Error::invalid("covariance diagonal must be positive"));
            }
        }
        Ok(())
    }

    /// Draws one sample; component choice then a diagonal Gaussian draw.
    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut chosen = &self.components[self.components.len() - 1];
        for c in &self.components {
            acc += c.weight;
            if u < acc {
                chosen = c;
                break;
            }
        }
        let z = standard_normal(rng, chosen.mean.len());
        chosen
            .mean
            .iter()
            .zip(chosen.cov_diag.iter().zip(z))
            .map(|(&m, (&v, zi))| m + v.sqrt() * zi)
            .collect()
    }
}

/// Weights of the trained-discriminator reward (2-layer dense classifier;
/// reward = logit of the "clean" class).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DiscriminatorSpec {
    pub dim: usize,
    pub hidden: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub holdout_accuracy: f64,
}

/// Differentiable scorer R(c, x) -> scalar.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardModel {
    /// log Σ_k w_k N(x; μ_k, Σ_k) of the prompt's clean mixture.
    AnalyticLogDensity { dim: usize, classes: Vec<ClassMixture> },
    /// Prompt-independent clean-vs-corrupted logit.
    TrainedDiscriminator(DiscriminatorSpec),
}

impl RewardModel {
    pub fn analytic(dim: usize, classes: Vec<ClassMixture>) -> Result<Self> {
        for c in &classes {
            c.validate(dim)?;
        }
        Ok(RewardModel::AnalyticLogDensity { dim, classes })
    }

    pub fn dim(&self) -> usize {
        match self {
            RewardModel::AnalyticLogDensity { dim, .. } => *dim,
            RewardModel::TrainedDiscriminator(d) => d.dim,
        }
    }

    /// Scalar reward, differentiable w.r.t. x.
    pub fn reward(&self, prompt: Prompt, x: &Tensor) -> Result<Tensor> {
        if x.shape() != [self.dim()] {
            return Err(Error::invalid(format!(
                "sample shape {:?} does not match reward dim {}",
                x.shape(),
                self.dim()
            )));
        }
        match self {
            RewardModel::AnalyticLogDensity { dim, classes } => {
                let class = match prompt {
                    Prompt::Class(id) if id < classes.len() => &classes[id],
                    _ => {
                        return Err(Error::invalid(format!(
                            "prompt {prompt:?} unknown to the reward model ({} classes)",
                            classes.len()
                        )))
                    }
                };
                log_mixture_density(class, *dim, x)
            }
            RewardModel::TrainedDiscriminator(d) => discriminator_logit(d, x),
        }
    }

    /// Mean reward over equal-length prompt/sample lists, plus per-sample
    /// scores. The mean is the plain arithmetic average.
    pub fn batch_reward(&self, prompts: &[Prompt], xs: &[Tensor]) -> Result<(Tensor, Vec<f64>)> {
        if prompts.len() != xs.len() {
            return Err(Error::invalid(format!(
                "batch length mismatch: {} prompts vs {} samples",
                prompts.len(),
                xs.len()
            )));
        }
        if prompts.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let mut acc: Option<Tensor> = None;
        let mut scores = Vec::with_capacity(xs.len());
        for (p, x) in prompts.iter().zip(xs) {
            let r = self.reward(*p, x)?;
            scores.push(r.item());
            acc = Some(match acc {
                Some(a) => a.add(&r)?,
                None => r,
            });
        }
        let mean = acc.unwrap().scale(1.0 / xs.len() as f64)?;
        Ok((mean, scores))
    }
}

/// log Σ_k w_k N(x; μ_k, diag Σ_k) built from tape ops (log-sum-exp with a
/// detached max shift, which leaves the gradient unchanged).
fn log_mixture_density(class: &ClassMixture, dim: usize, x: &Tensor) -> Result<Tensor> {
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln() * dim as f64;
    let mut exponents: Vec<Tensor> = Vec::with_capacity(class.components.len());
    for c in &class.components {
        let mu = Tensor::vector(c.mean.clone());
        let inv_var = Tensor::vector(c.cov_diag.iter().map(|v| 1.0 / v).collect());
        let log_det: f64 = c.cov_diag.iter().map(|v| v.ln()).sum();
        let diff = x.sub(&mu)?;
        let quad = diff.square()?.mul(&inv_var)?.sum()?;
        let log_n = quad
            .scale(-0.5)?
            .add_scalar(c.weight.ln() - 0.5 * log_det - half_log_2pi)?;
        exponents.push(log_n);
    }
    if exponents.len() == 1 {
        return Ok(exponents.pop().unwrap());
    }
    let shift = exponents
        .iter()
        .map(|e| e.item())
        .fold(f64::NEG_INFINITY, f64::max);
    let mut acc: Option<Tensor> = None;
    for e in &exponents {
        let term = e.add_scalar(-shift)?.exp()?;
        acc = Some(match acc {
            Some(a) => a.add(&term)?,
            None => term,
        });
    }
    Ok(acc.unwrap().ln()?.add_scalar(shift)?)
}

fn discriminator_logit(d: &DiscriminatorSpec, x: &Tensor) -> Result<Tensor> {
    let w1 = Tensor::matrix(d.hidden, d.dim, d.w1.clone())?;
    let b1 = Tensor::vector(d.b1.clone());
    let w2 = Tensor::matrix(1, d.hidden, d.w2.clone())?;
    let b2 = Tensor::vector(d.b2.clone());
    let h = w1.matvec(x)?.add(&b1)?.tanh()?;
    Ok(w2.matvec(&h)?.add(&b2)?.sum()?)
}

/// Configuration for the discriminator reward training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub hidden: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Fraction of each set held out for the accuracy report.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            hidden: 16,
            steps: 400,
            learning_rate: 0.02,
            batch_size: 32,
            holdout_fraction: 0.25,
            seed: 0,
        }
    }
}

/// Trains a clean-vs-corrupted logistic classifier; reward = logit(clean).
/// Deterministic given the config seed.
pub fn train_discriminator(
    clean: &[Vec<f64>],
    corrupted: &[Vec<f64>],
    config: &DiscriminatorConfig,
) -> Result<RewardModel> {
    if clean.is_empty() || corrupted.is_empty() {
        return Err(Error::invalid("both sample sets must be non-empty"));
    }
    let dim = clean[0].len();
    let mut rng = derive_rng(config.seed, 0);

    let split = |set: &[Vec<f64>]| -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let holdout = ((set.len() as f64) * config.holdout_fraction).floor() as usize;
        let train = set[..set.len() - holdout].to_vec();
        let held = set[set.len() - holdout..].to_vec();
        (train, held)
    };
    let (clean_train, clean_held) = split(clean);
    let (corr_train, corr_held) = split(corrupted);

    let scale = 1.0 / (dim as f64).sqrt();
    let mut params: Vec<Vec<f64>> = vec![
        standard_normal(&mut rng, config.hidden * dim)
            .into_iter()
            .map(|v| v * scale)
            .collect(),
        vec![0.0; config.hidden],
        standard_normal(&mut rng, config.hidden)
            .into_iter()
            .map(|v| v * scale)
            .collect(),
        vec![0.0; 1],
    ];
    let sizes: Vec<usize> = params.iter().map(|p| p.len()).collect();
    let mut opt = Adam::new(AdamConfig::adam(config.learning_rate), &sizes);

    for _ in 0..config.steps {
        let tape = Tape::new();
        let w1 = tape.leaf(&Tensor::matrix(config.hidden, dim, params[0].clone())?);
        let b1 = tape.leaf(&Tensor::vector(params[1].clone()));
        let w2 = tape.leaf(&Tensor::matrix(1, config.hidden, params[2].clone())?);
        let b2 = tape.leaf(&Tensor::vector(params[3].clone()));
        let leaves = [&w1, &b1, &w2, &b2];

        let mut acc: Option<Tensor> = None;
        for _ in 0..config.batch_size {
            let is_clean = rng.gen::<bool>();
            let set = if is_clean { &clean_train } else { &corr_train };
            let x = Tensor::vector(set[rng.gen_range(0..set.len())].clone());
            let h = w1.matvec(&x)?.add(&b1)?.tanh()?;
            let logit = w2.matvec(&h)?.add(&b2)?.sum()?;
            // softplus(-y * logit), y in {+1 clean, -1 corrupted}
            let y = if is_clean { 1.0 } else { -1.0 };
            let loss = logit
                .scale(-y)?
                .exp()?
                .add_scalar(1.0)?
                .ln()?;
            acc = Some(match acc {
                Some(a) => a.add(&loss)?,
                None => loss,
            });
        }
        let loss = acc.unwrap().scale(1.0 / config.batch_size as f64)?;
        let grads_map = tape.backward(&loss)?;
        let grads: Vec<Vec<f64>> = leaves
            .iter()
            .map(|l| grads_map.wrt(l).expect("leaf gradient").data().to_vec())
            .collect();
        opt.step(&mut params, &grads);
    }

    let spec = DiscriminatorSpec {
        dim,
        hidden: config.hidden,
        w1: params[0].clone(),
        b1: params[1].clone(),
        w2: params[2].clone(),
        b2: params[3].clone(),
        holdout_accuracy: 0.0,
    };
    let mut correct = 0usize;
    let mut total = 0usize;
    for (set, positive) in [(&clean_held, true), (&corr_held, false)] {
        for x in set.iter() {
            let logit = discriminator_logit(&spec, &Tensor::vector(x.clone()))?.item();
            total += 1;
            if (logit > 0.0) == positive {
                correct += 1;
            }
        }
    }
    let mut spec = spec;
    spec.holdout_accuracy = if total == 0 {
        f64::NAN
    } else {
        correct as f64 / total as f64
    };
    Ok(RewardModel::TrainedDiscriminator(spec))
}
