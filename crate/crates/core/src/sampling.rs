//! Forward noising, DDPM/DDIM reverse steps, CFG combination, one-step x̂0
//! prediction, and the full guided sampling loops.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor as GenericTensor;
use crate::diffusion::{ConditionEncoder, Prompt, ScoreNetwork};
use crate::error::{Error, TensorError};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;
use crate::util::{derive_rng, standard_normal};
use crate::{Result, Tensor};

/// x_t = √ᾱ_t · x_0 + √(1−ᾱ_t) · ε. Differentiable w.r.t. x_0 and ε.
pub fn add_noise<F: Scalar>(
    x0: &GenericTensor<F>,
    eps: &GenericTensor<F>,
    t: usize,
    schedule: &NoiseSchedule<F>,
) -> Result<GenericTensor<F>, TensorError> {
    if x0.shape() != eps.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "add_noise",
            lhs: x0.shape().to_vec(),
            rhs: eps.shape().to_vec(),
        });
    }
    assert!(t >= 1 && t <= schedule.steps(), "add_noise timestep {t} out of range");
    let ab = schedule.alpha_bar(t);
    x0.scale(ab.sqrt())?.add(&eps.scale((F::one() - ab).sqrt())?)
}

/// CFG combination ε̃ = ε_n + γ·(ε_c − ε_n).
///
/// γ=1 returns ε_c and γ=0 returns ε_n bit-exactly (the affine form would
/// introduce rounding).
pub fn cfg_combine<F: Scalar>(
    eps_neg: &GenericTensor<F>,
    eps_cond: &GenericTensor<F>,
    gamma: F,
) -> Result<GenericTensor<F>, TensorError> {
    if eps_neg.shape() != eps_cond.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "cfg_combine",
            lhs: eps_neg.shape().to_vec(),
            rhs: eps_cond.shape().to_vec(),
        });
    }
    if gamma == F::one() {
        return Ok(eps_cond.clone());
    }
    if gamma == F::zero() {
        return Ok(eps_neg.clone());
    }
    eps_neg.add(&eps_cond.sub(eps_neg)?.scale(gamma)?)
}

/// One-step prediction x̂_0 = (x_t − √(1−ᾱ_t)·ε̂) / √ᾱ_t. Defined for
/// t in 0..=T (ᾱ_0 = 1 makes t=0 the identity).
pub fn predict_x0<F: Scalar>(
    x_t: &GenericTensor<F>,
    eps_hat: &GenericTensor<F>,
    t: usize,
    schedule: &NoiseSchedule<F>,
) -> Result<GenericTensor<F>, TensorError> {
    if x_t.shape() != eps_hat.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "predict_x0",
            lhs: x_t.shape().to_vec(),
            rhs: eps_hat.shape().to_vec(),
        });
    }
    let ab = schedule.alpha_bar(t);
    if ab == F::zero() {
        return Err(TensorError::InvalidValue {
            op: "predict_x0",
            msg: format!("alpha_bar({t}) is zero"),
        });
    }
    x_t.sub(&eps_hat.scale((F::one() - ab).sqrt())?)?
        .scale(F::one() / ab.sqrt())
}

/// Ancestral DDPM step: posterior mean under the ε̂ parameterization plus
/// σ_t·noise with σ_t² = β_t·(1−ᾱ_{t−1})/(1−ᾱ_t). The noise input is
/// ignored at t=1.
pub fn ddpm_step<F: Scalar>(
    x_t: &GenericTensor<F>,
    eps_hat: &GenericTensor<F>,
    t: usize,
    schedule: &NoiseSchedule<F>,
    noise: &GenericTensor<F>,
) -> Result<GenericTensor<F>, TensorError> {
    if t < 1 || t > schedule.steps() {
        return Err(TensorError::InvalidValue {
            op: "ddpm_step",
            msg: format!("timestep {t} out of range 1..={}", schedule.steps()),
        });
    }
    let beta = schedule.beta(t);
    let alpha = schedule.alpha(t);
    let ab_t = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t - 1);
    let mean = x_t
        .sub(&eps_hat.scale(beta / (F::one() - ab_t).sqrt())?)?
        .scale(F::one() / alpha.sqrt())?;
    if t == 1 {
        return Ok(mean);
    }
    let sigma = (beta * (F::one() - ab_prev) / (F::one() - ab_t)).sqrt();
    mean.add(&noise.scale(sigma)?)
}

/// Deterministic DDIM step (η = 0):
/// x_{t_prev} = √ᾱ_{t_prev}·x̂_0 + √(1−ᾱ_{t_prev})·ε̂.
pub fn ddim_step<F: Scalar>(
    x_t: &GenericTensor<F>,
    eps_hat: &GenericTensor<F>,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule<F>,
) -> Result<GenericTensor<F>, TensorError> {
    if t_prev >= t || t > schedule.steps() {
        return Err(TensorError::InvalidValue {
            op: "ddim_step",
            msg: format!("need 0 <= t_prev < t <= T, got t_prev={t_prev}, t={t}"),
        });
    }
    let x0_hat = predict_x0(x_t, eps_hat, t, schedule)?;
    let ab_prev = schedule.alpha_bar(t_prev);
    x0_hat
        .scale(ab_prev.sqrt())?
        .add(&eps_hat.scale((F::one() - ab_prev).sqrt())?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Ddpm,
    Ddim,
}

impl std::fmt::Display for Solver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Solver::Ddpm => write!(f, "ddpm"),
            Solver::Ddim => write!(f, "ddim"),
        }
    }
}

/// How the per-step noise prediction is formed inside the sampling loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum GuidanceMode {
    /// ε̃ = ε_n + γ(ε_c − ε_n)
    Guided,
    /// ε̃ = ε_c, negative branch never evaluated
    ConditionalOnly,
    /// ε̃ = ε_n, conditional branch never evaluated
    NegativeOnly,
}

/// Guidance configuration for full sampling runs.
#[derive(Debug, Clone)]
pub struct GuidanceConfig {
    pub gamma: f64,
    /// Negative embedding; `None` means the encoder's φ.
    pub negative: Option<Tensor>,
    pub solver: Solver,
    /// Inference step count; must not exceed the schedule T.
    pub steps: usize,
}

impl GuidanceConfig {
    pub fn validate(&self, schedule: &NoiseSchedule<f64>) -> Result<()> {
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(Error::invalid(format!(
                "guidance scale must be finite and non-negative, got {}",
                self.gamma
            )));
        }
        if self.steps == 0 || self.steps > schedule.steps() {
            return Err(Error::invalid(format!(
                "steps {} out of range 1..={}",
                self.steps,
                schedule.steps()
            )));
        }
        Ok(())
    }
}

/// Descending timestep sequence for `steps` inference steps over a T-step
/// schedule: T, ..., down to 1. With steps == T this is every integer.
pub fn timestep_sequence(t_max: usize, steps: usize) -> Vec<usize> {
    (1..=steps)
        .rev()
        .map(|k| (k * t_max).div_ceil(steps))
        .collect()
}

/// One full guided sample and its trajectory (t, x_t) from x_T down to x_0.
pub struct SampleRun {
    pub x0: Tensor,
    pub trajectory: Vec<(usize, Vec<f64>)>,
}

fn run_sampler(
    net: &ScoreNetwork,
    encoder: &ConditionEncoder,
    schedule: &NoiseSchedule<f64>,
    prompt: Prompt,
    guidance: &GuidanceConfig,
    mode: GuidanceMode,
    seed: u64,
    stop_at: Option<usize>,
) -> Result<SampleRun> {
    guidance.validate(schedule)?;
    if guidance.solver == Solver::Ddpm && guidance.steps != schedule.steps() {
        return Err(Error::invalid(
            "the ancestral DDPM solver requires steps == schedule T",
        ));
    }
    let cond = encoder.encode(prompt)?;
    let negative = match &guidance.negative {
        Some(n) => {
            if n.shape() != [encoder.d_e()] {
                return Err(Error::invalid(format!(
                    "negative embedding length {} does not match d_e {}",
                    n.numel(),
                    encoder.d_e()
                )));
            }
            n.detach()
        }
        None => encoder.encode(Prompt::Null)?,
    };

    let mut rng = derive_rng(seed, 0);
    let mut x = Tensor::vector(standard_normal(&mut rng, net.d_x));
    let ts = timestep_sequence(schedule.steps(), guidance.steps);
    let mut trajectory = vec![(ts[0], x.data().to_vec())];

    for (i, &t) in ts.iter().enumerate() {
        if let Some(stop) = stop_at {
            if t <= stop {
                break;
            }
        }
        let t_prev = if i + 1 < ts.len() { ts[i + 1] } else { 0 };
        let eps = match mode {
            GuidanceMode::ConditionalOnly => net.predict_noise(&x, &cond, t, schedule)?,
            GuidanceMode::NegativeOnly => net.predict_noise(&x, &negative, t, schedule)?,
            GuidanceMode::Guided => {
                let eps_c = net.predict_noise(&x, &cond, t, schedule)?;
                let eps_n = net.predict_noise(&x, &negative, t, schedule)?;
                cfg_combine(&eps_n, &eps_c, guidance.gamma)?
            }
        };
        x = match guidance.solver {
            Solver::Ddim => ddim_step(&x, &eps, t, t_prev, schedule)?,
            Solver::Ddpm => {
                let noise = Tensor::vector(standard_normal(&mut rng, net.d_x));
                ddpm_step(&x, &eps, t, schedule, &noise)?
            }
        };
        trajectory.push((t_prev, x.data().to_vec()));
    }
    Ok(SampleRun { x0: x, trajectory })
}

/// Full guided sampling from seeded x_T ~ N(0, I): at every step combines
/// ε_c and ε_n via CFG and advances with the configured solver.
pub fn sample(
    net: &ScoreNetwork,
    encoder: &ConditionEncoder,
    schedule: &NoiseSchedule<f64>,
    prompt: Prompt,
    guidance: &GuidanceConfig,
    seed: u64,
) -> Result<SampleRun> {
    run_sampler(net, encoder, schedule, prompt, guidance, GuidanceMode::Guided, seed, None)
}

/// Sampling that only ever evaluates the conditional branch. With γ=1 the
/// guided sampler must match this bit-exactly.
pub fn sample_conditional(
    net: &ScoreNetwork,
    encoder: &ConditionEncoder,
    schedule: &NoiseSchedule<f64>,
    prompt: Prompt,
    guidance: &GuidanceConfig,
    seed: u64,
) -> Result<SampleRun> {
    run_sampler(
        net,
        encoder,
        schedule,
        prompt,
        guidance,
        GuidanceMode::ConditionalOnly,
        seed,
        None,
    )
}

/// Sampling that only ever evaluates the negative branch (γ=0 reference).
pub fn sample_negative_only(
    net: &ScoreNetwork,
    encoder: &ConditionEncoder,
    schedule: &NoiseSchedule<f64>,
    prompt: Prompt,
    guidance: &GuidanceConfig,
    seed: u64,
) -> Result<SampleRun> {
    run_sampler(
        net,
        encoder,
        schedule,
        prompt,
        guidance,
        GuidanceMode::NegativeOnly,
        seed,
        None,
    )
}

/// The one differentiable stage of reward training: given a (constant) x_t
/// at timestep t, form ε̃ with the possibly-taped negative embedding and
/// apply the one-step prediction. The only gradient path to the negative
/// embedding runs through this call.
pub fn guided_x0hat(
    net: &ScoreNetwork,
    encoder: &ConditionEncoder,
    schedule: &NoiseSchedule<f64>,
    prompt: Prompt,
    x_t: &Tensor,
    negative: &Tensor,
    gamma: f64,
    t: usize,
) -> Result<Tensor> {
    let cond = encoder.encode(prompt)?;
    let eps_c = net.predict_noise(&x_t.detach(), &cond, t, schedule)?;
    let eps_n = net.predict_noise(x_t, negative, t, schedule)?;
    let eps = cfg_combine(&eps_n, &eps_c, gamma)?;
    Ok(predict_x0(x_t, &eps, t, schedule)?)
}

/// Runs the guided sampler from x_T down to x_{t_stop+1} with gradients
/// severed at every step (the prefix is computed on detached values), then
/// applies one differentiable guided prediction at t = t_stop+1.
///
/// `prefix_negative` overrides the embedding used inside the severed prefix;
/// by default the prefix uses a detached copy of `negative`. The override
/// exists so tests can show the prefix contributes no gradient.
pub fn sample_to_t_then_x0hat(
    net: &ScoreNetwork,
    encoder: &ConditionEncoder,
    schedule: &NoiseSchedule<f64>,
    prompt: Prompt,
    negative: &Tensor,
    gamma: f64,
    solver: Solver,
    t_stop: usize,
    seed: u64,
    prefix_negative: Option<&Tensor>,
) -> Result<Tensor> {
    if t_stop >= schedule.steps() {
        return Err(Error::invalid(format!(
            "t_stop {t_stop} out of range 0..{}",
            schedule.steps()
        )));
    }
    let t_pred = t_stop + 1;
    let prefix_neg = prefix_negative.unwrap_or(negative).detach();
    let guidance = GuidanceConfig {
        gamma,
        negative: Some(prefix_neg),
        solver,
        steps: schedule.steps(),
    };
    let run = run_sampler(
        net,
        encoder,
        schedule,
        prompt,
        &guidance,
        GuidanceMode::Guided,
        seed,
        Some(t_pred),
    )?;
    // run stopped once the current timestep reached t_pred.
    let x_t = run.x0.detach();
    guided_x0hat(net, encoder, schedule, prompt, &x_t, negative, gamma, t_pred)
}

/// CFG combination with a taped scalar γ (shape [1]); used by the learnable-γ
/// training variant. Built from slice/mul/concat so γ stays on the tape.
pub fn cfg_combine_taped(eps_neg: &Tensor, eps_cond: &Tensor, gamma: &Tensor) -> Result<Tensor> {
    if gamma.shape() != [1] {
        return Err(Error::invalid("taped gamma must have shape [1]"));
    }
    let diff = eps_cond.sub(eps_neg)?;
    let d = diff.numel();
    let scaled_parts: Vec<Tensor> = (0..d)
        .map(|i| diff.slice(i, i + 1)?.mul(gamma))
        .collect::<Result<_, _>>()?;
    let refs: Vec<&Tensor> = scaled_parts.iter().collect();
    Ok(eps_neg.add(&Tensor::concat(&refs)?)?)
}

/// Learnable-γ counterpart of `sample_to_t_then_x0hat`: the severed prefix
/// uses γ's current value, the final differentiable prediction keeps γ on
/// the tape alongside the negative embedding.
#[allow(clippy::too_many_arguments)]
pub fn sample_to_t_then_x0hat_taped_gamma(
    net: &ScoreNetwork,
    encoder: &ConditionEncoder,
    schedule: &NoiseSchedule<f64>,
    prompt: Prompt,
    negative: &Tensor,
    gamma: &Tensor,
    solver: Solver,
    t_stop: usize,
    seed: u64,
) -> Result<Tensor> {
    if t_stop >= schedule.steps() {
        return Err(Error::invalid(format!(
            "t_stop {t_stop} out of range 0..{}",
            schedule.steps()
        )));
    }
    let t_pred = t_stop + 1;
    let gamma_value = gamma.data()[0];
    let guidance = GuidanceConfig {
        gamma: gamma_value,
        negative: Some(negative.detach()),
        solver,
        steps: schedule.steps(),
    };
    let run = run_sampler(
        net,
        encoder,
        schedule,
        prompt,
        &guidance,
        GuidanceMode::Guided,
        seed,
        Some(t_pred),
    )?;
    let x_t = run.x0.detach();
    let cond = encoder.encode(prompt)?;
    let eps_c = net.predict_noise(&x_t, &cond, t_pred, schedule)?;
    let eps_n = net.predict_noise(&x_t, negative, t_pred, schedule)?;
    let eps = cfg_combine_taped(&eps_n, &eps_c, gamma)?;
    Ok(predict_x0(&x_t, &eps, t_pred, schedule)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, Tape};
    use crate::diffusion::PretrainConfig;
    use rand::seq::SliceRandom;
    use statrs::distribution::{ContinuousCDF, Normal};

    fn sched(t: usize) -> NoiseSchedule<f64> {
        NoiseSchedule::linear(t, 1e-3, 0.05).unwrap()
    }

    /// T=1 schedule with beta=0.75 so alpha_bar(1) = 0.25 exactly.
    fn quarter() -> NoiseSchedule<f64> {
        NoiseSchedule::linear(1, 0.75, 0.75).unwrap()
    }

    fn world(seed: u64) -> (ConditionEncoder, NoiseSchedule<f64>, ScoreNetwork) {
        let names = (0..3).map(|i| format!("class{i}")).collect();
        let encoder = ConditionEncoder::random(names, 5, seed).unwrap();
        let schedule = sched(12);
        let phi = encoder.encode(Prompt::Null).unwrap().data().to_vec();
        let mut net = ScoreNetwork::new(2, 5, 16, seed + 1, phi).unwrap();
        // randomize so conditional and negative branches actually differ
        let mut rng = derive_rng(seed + 2, 0);
        let params: Vec<Tensor> = net
            .base_params()
            .iter()
            .map(|p| {
                Tensor::new(
                    p.shape().to_vec(),
                    standard_normal(&mut rng, p.numel()).into_iter().map(|v| v * 0.2).collect(),
                )
                .unwrap()
            })
            .collect();
        net = net.with_base_params(&params).unwrap();
        (encoder, schedule, net)
    }

    #[test]
    fn add_noise_hand_value() {
        let s = quarter();
        let x0 = Tensor::vector(vec![1.0, 0.0]);
        let eps = Tensor::vector(vec![0.0, 1.0]);
        let xt = add_noise(&x0, &eps, 1, &s).unwrap();
        assert!((xt.data()[0] - 0.5).abs() < 1e-12);
        assert!((xt.data()[1] - 0.866025).abs() < 1e-6);
    }

    #[test]
    fn add_noise_rejects_shape_mismatch() {
        let s = quarter();
        let x0 = Tensor::vector(vec![1.0, 0.0]);
        let eps = Tensor::vector(vec![0.0, 1.0, 2.0]);
        assert!(add_noise(&x0, &eps, 1, &s).is_err());
    }

    #[test]
    fn predict_x0_hand_value_inverts_add_noise() {
        let s = quarter();
        let xt = Tensor::vector(vec![0.5, 0.8660254037844386]);
        let eps = Tensor::vector(vec![0.0, 1.0]);
        let x0 = predict_x0(&xt, &eps, 1, &s).unwrap();
        assert!((x0.data()[0] - 1.0).abs() < 1e-12);
        assert!(x0.data()[1].abs() < 1e-12);
    }

    #[test]
    fn predict_x0_is_identity_at_t0() {
        let s = sched(10);
        let xt = Tensor::vector(vec![0.3, -1.7]);
        let x0 = predict_x0(&xt, &Tensor::vector(vec![2.0, -3.0]), 0, &s).unwrap();
        assert_eq!(x0.data(), xt.data());
    }

    #[test]
    fn noise_round_trip_recovers_x0_at_every_t() {
        let s = sched(25);
        let mut rng = derive_rng(40, 0);
        for t in 1..=25 {
            let x0 = Tensor::vector(standard_normal(&mut rng, 3));
            let eps = Tensor::vector(standard_normal(&mut rng, 3));
            let back = predict_x0(&add_noise(&x0, &eps, t, &s).unwrap(), &eps, t, &s).unwrap();
            for (a, b) in back.data().iter().zip(x0.data()) {
                assert!((a - b).abs() < 1e-12, "t={t}");
            }
        }
    }

    #[test]
    fn cfg_identities_are_bit_exact() {
        let neg = Tensor::vector(vec![0.1, -0.2, 0.3]);
        let cond = Tensor::vector(vec![1.0, 2.0, -3.0]);
        assert_eq!(cfg_combine(&neg, &cond, 1.0).unwrap().data(), cond.data());
        assert_eq!(cfg_combine(&neg, &cond, 0.0).unwrap().data(), neg.data());
        // affine identity: equal inputs pass through for any gamma
        for gamma in [0.3, 2.0, 7.5, 100.0] {
            assert_eq!(cfg_combine(&cond, &cond, gamma).unwrap().data(), cond.data());
        }
    }

    #[test]
    fn cfg_hand_value_at_paper_scale() {
        let neg = Tensor::vector(vec![0.0, 0.0]);
        let cond = Tensor::vector(vec![1.0, -2.0]);
        let out = cfg_combine(&neg, &cond, 7.5).unwrap();
        assert_eq!(out.data(), &[7.5, -15.0]);
    }

    #[test]
    fn ddpm_ignores_noise_at_t1_and_is_deterministic() {
        let s = sched(10);
        let xt = Tensor::vector(vec![0.4, -0.9]);
        let eps = Tensor::vector(vec![0.2, 0.1]);
        let a = ddpm_step(&xt, &eps, 1, &s, &Tensor::vector(vec![5.0, -5.0])).unwrap();
        let b = ddpm_step(&xt, &eps, 1, &s, &Tensor::vector(vec![0.0, 0.0])).unwrap();
        assert_eq!(a.data(), b.data());
        let n = Tensor::vector(vec![1.0, 2.0]);
        let c = ddpm_step(&xt, &eps, 5, &s, &n).unwrap();
        let d = ddpm_step(&xt, &eps, 5, &s, &n).unwrap();
        for (x, y) in c.data().iter().zip(d.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert!(ddpm_step(&xt, &eps, 0, &s, &n).is_err());
        assert!(ddpm_step(&xt, &eps, 11, &s, &n).is_err());
    }

    #[test]
    fn ddim_returns_x0hat_when_alpha_bar_prev_is_one() {
        let s = sched(10);
        let xt = Tensor::vector(vec![0.4, -0.9]);
        let eps = Tensor::vector(vec![0.2, 0.1]);
        let stepped = ddim_step(&xt, &eps, 3, 0, &s).unwrap();
        let x0 = predict_x0(&xt, &eps, 3, &s).unwrap();
        for (a, b) in stepped.data().iter().zip(x0.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(ddim_step(&xt, &eps, 3, 3, &s).is_err());
        assert!(ddim_step(&xt, &eps, 3, 5, &s).is_err());
    }

    /// For x0 ~ N(0, 1) the exact posterior-mean noise predictor is
    /// ε̂(x_t, t) = √(1−ᾱ_t)·x_t; the DDIM recursion then has the closed form
    /// x_{t'} = (√(ᾱ_{t'}ᾱ_t) + √((1−ᾱ_{t'})(1−ᾱ_t)))·x_t.
    fn gaussian_eps(x: &Tensor, t: usize, s: &NoiseSchedule<f64>) -> Tensor {
        x.scale((1.0 - s.alpha_bar(t)).sqrt()).unwrap()
    }

    #[test]
    fn ddim_matches_closed_form_on_linear_gaussian_world() {
        let s = sched(20);
        for &steps in &[20usize, 5] {
            let ts = timestep_sequence(20, steps);
            let mut x = Tensor::vector(vec![1.3, -0.4]);
            let x_start = x.clone();
            let mut factor = 1.0;
            for (i, &t) in ts.iter().enumerate() {
                let t_prev = if i + 1 < ts.len() { ts[i + 1] } else { 0 };
                let eps = gaussian_eps(&x, t, &s);
                x = ddim_step(&x, &eps, t, t_prev, &s).unwrap();
                let (ab, abp) = (s.alpha_bar(t), s.alpha_bar(t_prev));
                factor *= (abp * ab).sqrt() + ((1.0 - abp) * (1.0 - ab)).sqrt();
            }
            for (got, x0) in x.data().iter().zip(x_start.data()) {
                assert!((got - factor * x0).abs() < 1e-6, "steps={steps}");
            }
        }
    }

    fn ks_p_value(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
        samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = samples.len() as f64;
        let mut d: f64 = 0.0;
        for (i, &x) in samples.iter().enumerate() {
            let c = cdf(x);
            d = d.max((c - i as f64 / n).abs()).max(((i + 1) as f64 / n - c).abs());
        }
        let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
        let mut p = 0.0;
        for k in 1..=100 {
            let k = k as f64;
            p += 2.0 * (-1.0f64).powi(k as i32 - 1) * (-2.0 * k * k * lambda * lambda).exp();
        }
        p.clamp(0.0, 1.0)
    }

    #[test]
    fn ddpm_preserves_standard_normal_marginals() {
        // exact score of x0 ~ N(0,1): full ancestral chain should leave the
        // sample standard normal
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let mut rng = derive_rng(123, 0);
        let mut samples = Vec::with_capacity(5000);
        for _ in 0..5000 {
            let mut x = Tensor::scalar(standard_normal(&mut rng, 1)[0]);
            for t in (1..=100).rev() {
                let eps = gaussian_eps(&x, t, &s);
                let noise = Tensor::scalar(standard_normal(&mut rng, 1)[0]);
                x = ddpm_step(&x, &eps, t, &s, &noise).unwrap();
            }
            samples.push(x.item());
        }
        let normal = Normal::new(0.0, 1.0).unwrap();
        let p = ks_p_value(&mut samples, |x| normal.cdf(x));
        assert!(p > 0.01, "KS p-value {p}");
    }

    fn energy_statistic(a: &[f64], b: &[f64]) -> f64 {
        let cross: f64 = a
            .iter()
            .flat_map(|x| b.iter().map(move |y| (x - y).abs()))
            .sum::<f64>()
            / (a.len() * b.len()) as f64;
        let within = |v: &[f64]| {
            let mut s = 0.0;
            for i in 0..v.len() {
                for j in 0..v.len() {
                    s += (v[i] - v[j]).abs();
                }
            }
            s / (v.len() * v.len()) as f64
        };
        2.0 * cross - within(a) - within(b)
    }

    #[test]
    fn ddim_and_ddpm_agree_in_distribution_on_gaussian_world() {
        let s = NoiseSchedule::linear(60, 1e-4, 0.03).unwrap();
        let t_max = 60;
        let mut rng = derive_rng(321, 0);
        let n = 256;
        let mut ddim_out = Vec::with_capacity(n);
        let mut ddpm_out = Vec::with_capacity(n);
        for _ in 0..n {
            let mut x = Tensor::scalar(standard_normal(&mut rng, 1)[0]);
            for t in (1..=t_max).rev() {
                let eps = gaussian_eps(&x, t, &s);
                x = ddim_step(&x, &eps, t, t - 1, &s).unwrap();
            }
            ddim_out.push(x.item());
        }
        for _ in 0..n {
            let mut x = Tensor::scalar(standard_normal(&mut rng, 1)[0]);
            for t in (1..=t_max).rev() {
                let eps = gaussian_eps(&x, t, &s);
                let noise = Tensor::scalar(standard_normal(&mut rng, 1)[0]);
                x = ddpm_step(&x, &eps, t, &s, &noise).unwrap();
            }
            ddpm_out.push(x.item());
        }
        let observed = energy_statistic(&ddim_out, &ddpm_out);
        let mut pooled: Vec<f64> = ddim_out.iter().chain(&ddpm_out).copied().collect();
        let mut at_least = 0usize;
        let perms = 199;
        for _ in 0..perms {
            pooled.shuffle(&mut rng);
            if energy_statistic(&pooled[..n], &pooled[n..]) >= observed {
                at_least += 1;
            }
        }
        let p = (at_least + 1) as f64 / (perms + 1) as f64;
        assert!(p > 0.01, "energy-distance permutation p-value {p}");
    }

    #[test]
    fn timestep_sequence_shapes() {
        assert_eq!(timestep_sequence(30, 30), (1..=30).rev().collect::<Vec<_>>());
        assert_eq!(timestep_sequence(30, 5), vec![30, 24, 18, 12, 6]);
        for &(t_max, steps) in &[(30usize, 7usize), (100, 13), (12, 12), (5, 1)] {
            let ts = timestep_sequence(t_max, steps);
            assert_eq!(ts.len(), steps);
            assert_eq!(ts[0], t_max);
            assert!(ts.windows(2).all(|w| w[0] > w[1]));
            assert!(*ts.last().unwrap() >= 1);
        }
    }

    #[test]
    fn guidance_config_validation() {
        let s = sched(12);
        let mut g = GuidanceConfig { gamma: 7.5, negative: None, solver: Solver::Ddim, steps: 12 };
        assert!(g.validate(&s).is_ok());
        g.gamma = -1.0;
        assert!(g.validate(&s).is_err());
        g.gamma = f64::NAN;
        assert!(g.validate(&s).is_err());
        g.gamma = 1.0;
        g.steps = 0;
        assert!(g.validate(&s).is_err());
        g.steps = 13;
        assert!(g.validate(&s).is_err());
    }

    #[test]
    fn ddpm_full_sampling_requires_all_steps() {
        let (encoder, schedule, net) = world(50);
        let g = GuidanceConfig { gamma: 2.0, negative: None, solver: Solver::Ddpm, steps: 6 };
        assert!(sample(&net, &encoder, &schedule, Prompt::Class(0), &g, 1).is_err());
    }

    #[test]
    fn gamma_one_matches_conditional_only_bit_exactly() {
        let (encoder, schedule, net) = world(51);
        for solver in [Solver::Ddim, Solver::Ddpm] {
            let g = GuidanceConfig { gamma: 1.0, negative: None, solver, steps: 12 };
            let guided = sample(&net, &encoder, &schedule, Prompt::Class(1), &g, 7).unwrap();
            let cond = sample_conditional(&net, &encoder, &schedule, Prompt::Class(1), &g, 7).unwrap();
            for (a, b) in guided.x0.data().iter().zip(cond.x0.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
            assert_eq!(guided.trajectory.len(), cond.trajectory.len());
        }
    }

    #[test]
    fn gamma_zero_matches_negative_only_bit_exactly() {
        let (encoder, schedule, net) = world(52);
        let g = GuidanceConfig { gamma: 0.0, negative: None, solver: Solver::Ddim, steps: 12 };
        let guided = sample(&net, &encoder, &schedule, Prompt::Class(2), &g, 9).unwrap();
        let neg = sample_negative_only(&net, &encoder, &schedule, Prompt::Class(2), &g, 9).unwrap();
        for (a, b) in guided.x0.data().iter().zip(neg.x0.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn ddim_trajectories_are_bit_identical_across_runs() {
        let (encoder, schedule, net) = world(53);
        let g = GuidanceConfig { gamma: 7.5, negative: None, solver: Solver::Ddim, steps: 12 };
        let a = sample(&net, &encoder, &schedule, Prompt::Class(0), &g, 33).unwrap();
        let b = sample(&net, &encoder, &schedule, Prompt::Class(0), &g, 33).unwrap();
        assert_eq!(a.trajectory.len(), b.trajectory.len());
        for ((ta, xa), (tb, xb)) in a.trajectory.iter().zip(&b.trajectory) {
            assert_eq!(ta, tb);
            for (u, v) in xa.iter().zip(xb) {
                assert_eq!(u.to_bits(), v.to_bits());
            }
        }
        assert_eq!(a.trajectory[0].0, 12);
        assert_eq!(a.trajectory.last().unwrap().0, 0);
    }

    #[test]
    fn degenerate_chain_equals_single_guided_prediction_from_x_t() {
        let (encoder, schedule, net) = world(54);
        let t_max = schedule.steps();
        let n = encoder.encode(Prompt::Null).unwrap();
        let out = sample_to_t_then_x0hat(
            &net, &encoder, &schedule, Prompt::Class(1), &n, 7.5, Solver::Ddim,
            t_max - 1, 77, None,
        )
        .unwrap();
        // chain length one: the prediction point is x_T itself
        let mut rng = derive_rng(77, 0);
        let x_t = Tensor::vector(standard_normal(&mut rng, net.d_x));
        let direct =
            guided_x0hat(&net, &encoder, &schedule, Prompt::Class(1), &x_t, &n, 7.5, t_max).unwrap();
        for (a, b) in out.data().iter().zip(direct.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn x0hat_gradient_wrt_negative_matches_finite_differences() {
        let (encoder, schedule, net) = world(55);
        let n0 = encoder.encode(Prompt::Class(2)).unwrap();
        for t_stop in [0usize, 4, 11] {
            let err = grad_check(
                |ps: &[Tensor]| {
                    sample_to_t_then_x0hat(
                        &net, &encoder, &schedule, Prompt::Class(0), &ps[0], 7.5,
                        Solver::Ddim, t_stop, 5, Some(&n0),
                    )
                    .map_err(|_| crate::TensorError::InvalidValue {
                        op: "sample_to_t_then_x0hat",
                        msg: "forward failed".into(),
                    })?
                    .square()?
                    .sum()
                },
                &[n0.clone()],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "t_stop={t_stop}, rel err {err}");
        }
    }

    #[test]
    fn prefix_contributes_exactly_zero_gradient() {
        let (encoder, schedule, net) = world(56);
        let tape = Tape::new();
        let n_leaf = tape.leaf(&encoder.encode(Prompt::Class(1)).unwrap());
        // the leaf is used only inside the severed prefix; the final
        // differentiable step uses a constant embedding
        let n_final = encoder.encode(Prompt::Null).unwrap();
        let out = sample_to_t_then_x0hat(
            &net, &encoder, &schedule, Prompt::Class(0), &n_final, 7.5, Solver::Ddim,
            4, 13, Some(&n_leaf),
        )
        .unwrap();
        let root = out.square().unwrap().sum().unwrap();
        let grads = tape.backward(&root).unwrap();
        // the severed prefix leaves the root off the tape entirely, so the
        // leaf either gets an explicit zero gradient or no entry at all
        match grads.wrt(&n_leaf) {
            Some(g) => assert!(g.data().iter().all(|&v| v == 0.0)),
            None => {}
        }
        assert!(root.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn sample_to_t_rejects_t_stop_out_of_range() {
        let (encoder, schedule, net) = world(57);
        let n = encoder.encode(Prompt::Null).unwrap();
        assert!(sample_to_t_then_x0hat(
            &net, &encoder, &schedule, Prompt::Class(0), &n, 7.5, Solver::Ddim,
            schedule.steps(), 1, None,
        )
        .is_err());
    }

    #[test]
    fn trained_model_sampling_lands_near_class_center() {
        // end-to-end smoke: pretrain on a 1-class world, then a guided sample
        // should land much closer to the class center than x_T did
        let names = vec!["only".to_string()];
        let encoder = ConditionEncoder::random(names, 4, 9).unwrap();
        let schedule = sched(12);
        let phi = encoder.encode(Prompt::Null).unwrap().data().to_vec();
        let net = ScoreNetwork::new(2, 4, 24, 10, phi).unwrap();
        let mut rng = derive_rng(11, 0);
        let center = [2.0, -1.0];
        let dataset: Vec<(Prompt, Vec<f64>)> = (0..64)
            .map(|_| {
                let z = standard_normal(&mut rng, 2);
                (Prompt::Class(0), vec![center[0] + 0.2 * z[0], center[1] + 0.2 * z[1]])
            })
            .collect();
        let cfg = PretrainConfig { steps: 300, learning_rate: 4e-3, batch_size: 16, p_drop: 0.1, seed: 3 };
        let (trained, _) = crate::diffusion::pretrain(&net, &encoder, &schedule, &dataset, &cfg).unwrap();
        let g = GuidanceConfig { gamma: 1.0, negative: None, solver: Solver::Ddim, steps: 12 };
        let mut mean_dist = 0.0;
        for seed in 0..16 {
            let run = sample(&trained, &encoder, &schedule, Prompt::Class(0), &g, seed).unwrap();
            let d = run.x0.data();
            mean_dist += ((d[0] - center[0]).powi(2) + (d[1] - center[1]).powi(2)).sqrt();
        }
        mean_dist /= 16.0;
        assert!(mean_dist < 1.5, "mean distance to center {mean_dist}");
    }
}
