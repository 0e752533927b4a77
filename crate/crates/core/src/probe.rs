//! Parameter-efficiency probe: exact Jacobians of fully differentiated
//! guided DDIM sampling with respect to a chosen parameter group, and the
//! normalized Frobenius efficiency E(θ) = ‖𝒥‖_F / (N·D·d_θ).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{ConditionEncoder, Prompt, ScoreNetwork};
use crate::error::Error;
use crate::sampling::{cfg_combine, ddim_step, timestep_sequence};
use crate::schedule::NoiseSchedule;
use crate::util::{derive_rng, mix_seed, standard_normal};
use crate::{Result, Tape, Tensor};

/// Probe operating point: sampling at the shipped configuration.
pub const PROBE_GAMMA: f64 = 7.5;

/// Middle (width × width) layer carries the probe adapters.
pub const ADAPTER_LAYER: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    FullTheta,
    NegEmbedding,
    Adapter { rank: usize },
}

impl std::fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParamGroup::FullTheta => write!(f, "full_theta"),
            ParamGroup::NegEmbedding => write!(f, "neg_embedding"),
            ParamGroup::Adapter { rank } => write!(f, "adapter_r{rank}"),
        }
    }
}

/// Exact Jacobian of the sampler outputs w.r.t. one parameter group:
/// `columns[i*D + j][k]` = ∂(output j of prompt i)/∂(group parameter k).
#[derive(Debug, Clone)]
pub struct Jacobian {
    pub d_theta: usize,
    pub n_prompts: usize,
    pub d_latent: usize,
    pub columns: Vec<Vec<f64>>,
}

impl Jacobian {
    pub fn frobenius_norm(&self) -> f64 {
        self.columns
            .iter()
            .flat_map(|c| c.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub group: String,
    pub d_theta: usize,
    pub n_prompts: usize,
    pub d_latent: usize,
    pub frobenius_norm: f64,
    pub efficiency: f64,
}

/// Ordering booleans for the acceptance verdict.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EfficiencyVerdict {
    pub neg_embedding_beats_full_theta: bool,
    pub small_rank_beats_large_rank: bool,
    /// Factor-of-two margins required by the acceptance gate.
    pub neg_vs_theta_ratio: f64,
    pub rank_ratio: f64,
}

/// The probe's sampler: full guided DDIM from a seeded x_T, every step on the
/// tape (nothing severed). The starting noise depends on the prompt identity,
/// not its list position, so duplicated prompts yield identical columns.
fn full_chain(
    net: &ScoreNetwork,
    encoder: &ConditionEncoder,
    schedule: &NoiseSchedule<f64>,
    prompt: Prompt,
    negative: &Tensor,
    gamma: f64,
    seed: u64,
) -> Result<Tensor> {
    let prompt_tag = match prompt {
        Prompt::Null => u64::MAX,
        Prompt::Class(id) => id as u64,
    };
    let mut rng = derive_rng(mix_seed(seed, &[prompt_tag]), 0);
    let mut x = Tensor::vector(standard_normal(&mut rng, net.d_x));
    let cond = encoder.encode(prompt)?;
    let ts = timestep_sequence(schedule.steps(), schedule.steps());
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = if i + 1 < ts.len() { ts[i + 1] } else { 0 };
        let eps_c = net.predict_noise(&x, &cond, t, schedule)?;
        let eps_n = net.predict_noise(&x, negative, t, schedule)?;
        let eps = cfg_combine(&eps_n, &eps_c, gamma)?;
        x = ddim_step(&x, &eps, t, t_prev, schedule)?;
    }
    Ok(x)
}

/// Instantiates the group as tape leaves and returns (taped net, taped
/// negative, ordered leaf list).
fn build_taped(
    net: &ScoreNetwork,
    encoder: &ConditionEncoder,
    group: ParamGroup,
    tape: &Tape,
    adapter_seed: u64,
) -> Result<(ScoreNetwork, Tensor, Vec<Tensor>)> {
    let phi = encoder.encode(Prompt::Null)?;
    match group {
        ParamGroup::FullTheta => {
            let leaves: Vec<Tensor> = net.base_params().iter().map(|p| tape.leaf(p)).collect();
            let taped = net.with_base_params(&leaves)?;
            Ok((taped, phi, leaves))
        }
        ParamGroup::NegEmbedding => {
            let leaf = tape.leaf(&phi);
            Ok((net.clone(), leaf.clone(), vec![leaf]))
        }
        ParamGroup::Adapter { rank } => {
            let mut adapted = net.clone();
            adapted.attach_adapter(ADAPTER_LAYER, rank, adapter_seed)?;
            let leaves: Vec<Tensor> = adapted.adapter_params().iter().map(|p| tape.leaf(p)).collect();
            let taped = adapted.with_adapter_params(&leaves)?;
            Ok((taped, phi, leaves))
        }
    }
}

fn group_param_count(net: &ScoreNetwork, encoder: &ConditionEncoder, group: ParamGroup) -> Result<usize> {
    Ok(match group {
        ParamGroup::FullTheta => net.base_params().iter().map(|p| p.numel()).sum(),
        ParamGroup::NegEmbedding => encoder.d_e(),
        ParamGroup::Adapter { rank } => {
            let (out, inp) = net
                .layer_dims(ADAPTER_LAYER)
                .ok_or_else(|| Error::invalid("adapter layer missing"))?;
            rank * (out + inp)
        }
    })
}

/// Exact Jacobian via one backward pass per output coordinate. Prompts run
/// in parallel; each holds its own tape.
pub fn sampling_jacobian(
    net: &ScoreNetwork,
    encoder: &ConditionEncoder,
    schedule: &NoiseSchedule<f64>,
    prompts: &[Prompt],
    group: ParamGroup,
    gamma: f64,
    seed: u64,
) -> Result<Jacobian> {
    sampling_jacobian_with(net, encoder, schedule, prompts, group, gamma, seed, seed)
}

/// As `sampling_jacobian`, but with separate seeds for the starting noise
/// and the adapter draw, so averaging over adapter draws can hold the
/// sampling chain fixed.
#[allow(clippy::too_many_arguments)]
fn sampling_jacobian_with(
    net: &ScoreNetwork,
    encoder: &ConditionEncoder,
    schedule: &NoiseSchedule<f64>,
    prompts: &[Prompt],
    group: ParamGroup,
    gamma: f64,
    chain_seed: u64,
    adapter_seed: u64,
) -> Result<Jacobian> {
    if prompts.is_empty() {
        return Err(Error::invalid("probe needs at least one prompt"));
    }
    let d_theta = group_param_count(net, encoder, group)?;
    if d_theta == 0 {
        return Err(Error::invalid("parameter group is empty"));
    }
    let d_latent = net.d_x;
    let per_prompt: Vec<Vec<Vec<f64>>> = prompts
        .par_iter()
        .map(|&prompt| -> Result<Vec<Vec<f64>>> {
            let tape = Tape::new();
            let (taped_net, negative, leaves) = build_taped(net, encoder, group, &tape, adapter_seed)?;
            let x0 = full_chain(&taped_net, encoder, schedule, prompt, &negative, gamma, chain_seed)?;
            let mut cols = Vec::with_capacity(d_latent);
            for j in 0..d_latent {
                let root = x0.slice(j, j + 1)?;
                let grads = tape.backward(&root)?;
                let mut col = Vec::with_capacity(d_theta);
                for leaf in &leaves {
                    match grads.wrt(leaf) {
                        Some(g) => col.extend_from_slice(g.data()),
                        None => col.extend(std::iter::repeat(0.0).take(leaf.numel())),
                    }
                }
                cols.push(col);
            }
            Ok(cols)
        })
        .collect::<Result<_>>()?;
    Ok(Jacobian {
        d_theta,
        n_prompts: prompts.len(),
        d_latent,
        columns: per_prompt.into_iter().flatten().collect(),
    })
}

/// E(θ) = ‖𝒥‖_F / (N·D·d_θ).
pub fn parameter_efficiency(frobenius_norm: f64, n: usize, d: usize, d_theta: usize) -> Result<f64> {
    if n == 0 || d == 0 || d_theta == 0 {
        return Err(Error::invalid("efficiency dimensions must be positive"));
    }
    Ok(frobenius_norm / (n as f64 * d as f64 * d_theta as f64))
}

/// Adapter efficiencies are averaged over this many A-matrix draws: a single
/// draw's squared norm is roughly chi-square with only ~rank·D degrees of
/// freedom, far too noisy for an ordering verdict.
pub const ADAPTER_PROBE_DRAWS: usize = 64;

pub fn report_for(
    net: &ScoreNetwork,
    encoder: &ConditionEncoder,
    schedule: &NoiseSchedule<f64>,
    prompts: &[Prompt],
    group: ParamGroup,
    gamma: f64,
    seed: u64,
) -> Result<EfficiencyReport> {
    let draws = match group {
        ParamGroup::Adapter { .. } => ADAPTER_PROBE_DRAWS,
        _ => 1,
    };
    let mut sum_sq = 0.0;
    let mut shape = None;
    for draw in 0..draws {
        let adapter_seed = if draws == 1 { seed } else { mix_seed(seed, &[draw as u64]) };
        let jac = sampling_jacobian_with(
            net, encoder, schedule, prompts, group, gamma, seed, adapter_seed,
        )?;
        sum_sq += jac.frobenius_norm().powi(2);
        shape = Some((jac.d_theta, jac.n_prompts, jac.d_latent));
    }
    let (d_theta, n_prompts, d_latent) = shape.expect("at least one draw");
    // RMS over draws: E‖J‖² is the quantity that is linear in the draw
    let frob = (sum_sq / draws as f64).sqrt();
    Ok(EfficiencyReport {
        group: group.to_string(),
        d_theta,
        n_prompts,
        d_latent,
        frobenius_norm: frob,
        efficiency: parameter_efficiency(frob, n_prompts, d_latent, d_theta)?,
    })
}

/// Runs the probe for {neg_embedding, full_theta, adapter(r)…} and emits the
/// ordering verdict.
pub fn compare_groups(
    net: &ScoreNetwork,
    encoder: &ConditionEncoder,
    schedule: &NoiseSchedule<f64>,
    prompts: &[Prompt],
    adapter_ranks: &[usize],
    gamma: f64,
    seed: u64,
) -> Result<(Vec<EfficiencyReport>, EfficiencyVerdict)> {
    let mut groups = vec![ParamGroup::NegEmbedding, ParamGroup::FullTheta];
    groups.extend(adapter_ranks.iter().map(|&rank| ParamGroup::Adapter { rank }));
    let reports: Vec<EfficiencyReport> = groups
        .iter()
        .map(|&g| report_for(net, encoder, schedule, prompts, g, gamma, seed))
        .collect::<Result<_>>()?;

    let eff = |name: &str| -> f64 {
        reports
            .iter()
            .find(|r| r.group == name)
            .map(|r| r.efficiency)
            .unwrap_or(f64::NAN)
    };
    let e_neg = eff("neg_embedding");
    let e_theta = eff("full_theta");
    let mut sorted_ranks: Vec<usize> = adapter_ranks.to_vec();
    sorted_ranks.sort_unstable();
    sorted_ranks.dedup();
    let (rank_ratio, small_beats_large) = if sorted_ranks.len() >= 2 {
        let e_small = eff(&format!("adapter_r{}", sorted_ranks[0]));
        let e_large = eff(&format!("adapter_r{}", sorted_ranks[sorted_ranks.len() - 1]));
        (e_small / e_large, e_small > e_large)
    } else {
        (f64::NAN, false)
    };
    let verdict = EfficiencyVerdict {
        neg_embedding_beats_full_theta: e_neg > e_theta,
        small_rank_beats_large_rank: small_beats_large,
        neg_vs_theta_ratio: e_neg / e_theta,
        rank_ratio,
    };
    Ok((reports, verdict))
}

/// Untaped sampler value for finite differencing: identical code path with
/// constant parameters substituted for the group.
pub fn chain_value(
    net: &ScoreNetwork,
    encoder: &ConditionEncoder,
    schedule: &NoiseSchedule<f64>,
    prompt: Prompt,
    group: ParamGroup,
    group_values: &[f64],
    gamma: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let phi = encoder.encode(Prompt::Null)?;
    let (eval_net, negative) = match group {
        ParamGroup::FullTheta => {
            let mut offset = 0;
            let params: Vec<Tensor> = net
                .base_params()
                .iter()
                .map(|p| {
                    let chunk = group_values[offset..offset + p.numel()].to_vec();
                    offset += p.numel();
                    Tensor::new(p.shape().to_vec(), chunk).map_err(Error::from)
                })
                .collect::<Result<_>>()?;
            (net.with_base_params(&params)?, phi)
        }
        ParamGroup::NegEmbedding => (net.clone(), Tensor::vector(group_values.to_vec())),
        ParamGroup::Adapter { rank } => {
            let mut adapted = net.clone();
            adapted.attach_adapter(ADAPTER_LAYER, rank, seed)?;
            let mut offset = 0;
            let params: Vec<Tensor> = adapted
                .adapter_params()
                .iter()
                .map(|p| {
                    let chunk = group_values[offset..offset + p.numel()].to_vec();
                    offset += p.numel();
                    Tensor::new(p.shape().to_vec(), chunk).map_err(Error::from)
                })
                .collect::<Result<_>>()?;
            (adapted.with_adapter_params(&params)?, phi)
        }
    };
    Ok(full_chain(&eval_net, encoder, schedule, prompt, &negative, gamma, seed)?
        .data()
        .to_vec())
}

/// Current flat values of a group (the probe's expansion point).
pub fn group_values(
    net: &ScoreNetwork,
    encoder: &ConditionEncoder,
    group: ParamGroup,
    seed: u64,
) -> Result<Vec<f64>> {
    Ok(match group {
        ParamGroup::FullTheta => net
            .base_params()
            .iter()
            .flat_map(|p| p.data().to_vec())
            .collect(),
        ParamGroup::NegEmbedding => encoder.encode(Prompt::Null)?.data().to_vec(),
        ParamGroup::Adapter { rank } => {
            let mut adapted = net.clone();
            adapted.attach_adapter(ADAPTER_LAYER, rank, seed)?;
            adapted
                .adapter_params()
                .iter()
                .flat_map(|p| p.data().to_vec())
                .collect()
        }
    })
}
