//! Pipeline stages behind the CLI subcommands: world generation, pretraining,
//! negative-embedding training, and the canned experiments.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    pretrain, Checkpoint, ConditionEncoder, PretrainConfig, Prompt, ScoreNetwork,
    CHECKPOINT_FORMAT_VERSION,
};
use crate::error::Error;
use crate::harness::artifacts::{
    csv_config_hash, expect_hash, json_config_hash, read_json, ArtifactWriter, RunManifest,
};
use crate::harness::config::{streams, ExperimentConfig};
use crate::harness::world::{generate_world, World};
use crate::probe::{compare_groups, EfficiencyReport, EfficiencyVerdict};
use crate::sampling::{sample, sample_to_t_then_x0hat, GuidanceConfig, Solver};
use crate::schedule::NoiseSchedule;
use crate::trainer::{train_global, train_per_sample, NegativeEmbedding, TuningState};
use crate::util::mix_seed;
use crate::{Result, Tensor};

pub const WORLD_FILE: &str = "world.json";
pub const CHECKPOINT_A_FILE: &str = "checkpoint_a.json";
pub const CHECKPOINT_B_FILE: &str = "checkpoint_b.json";
pub const NEG_GLOBAL_FILE: &str = "neg_global.json";
pub const REWARD_CURVE_FILE: &str = "reward_curve.csv";
pub const PER_SAMPLE_FILE: &str = "per_sample.json";
pub const EVAL_REPORT_FILE: &str = "eval_report.json";
pub const PER_PROMPT_CSV: &str = "per_prompt.csv";
pub const EFFICIENCY_CSV: &str = "efficiency.csv";
pub const EFFICIENCY_VERDICT_FILE: &str = "efficiency_verdict.json";
pub const X0_SIMILARITY_CSV: &str = "x0_similarity.csv";
pub const TRANSFER_FILE: &str = "transfer.json";
pub const REPORT_FILE: &str = "report.json";

fn fmt(v: f64) -> String {
    format!("{v:.17e}")
}

// --- world -------------------------------------------------------------------

pub fn cmd_gen_world(config: &ExperimentConfig, out: &Path) -> Result<RunManifest> {
    let world = generate_world(config)?;
    let mut w = ArtifactWriter::new(out, &world.config_hash)?;
    w.write_json(WORLD_FILE, &world)?;
    for c in 0..config.world.classes {
        let rows: Vec<Vec<String>> = world
            .dataset
            .iter()
            .filter(|r| r.class == c)
            .enumerate()
            .map(|(i, r)| {
                let mut row = vec![i.to_string(), (r.corrupted as u8).to_string()];
                row.extend(r.x.iter().map(|v| fmt(*v)));
                row
            })
            .collect();
        let coords: Vec<String> = (0..config.world.d_x).map(|i| format!("x{i}")).collect();
        w.write_csv(
            &format!("class_{c}.csv"),
            &format!("index,corrupted,{}", coords.join(",")),
            &rows,
        )?;
    }
    w.finish("gen-world")
}

pub fn load_world(config: &ExperimentConfig, out: &Path) -> Result<World> {
    let path = out.join(WORLD_FILE);
    let world: World = read_json(&path)?;
    expect_hash(&path, &world.config_hash, &config.hash())?;
    if !world.encoder.verify_fingerprint() {
        return Err(Error::invalid("world encoder fingerprint does not verify"));
    }
    Ok(world)
}

// --- pretraining -------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointFile {
    pub config_hash: String,
    pub checkpoint: Checkpoint,
    pub final_losses_mean: f64,
}

fn pretrain_model(
    config: &ExperimentConfig,
    world: &World,
    width: usize,
    network_stream: u64,
    pretrain_stream: u64,
) -> Result<(ScoreNetwork, NoiseSchedule<f64>, f64)> {
    let schedule = World::schedule(config)?;
    let phi = world.encoder.encode(Prompt::Null)?.data().to_vec();
    let net = ScoreNetwork::new(
        config.world.d_x,
        config.world.d_e,
        width,
        config.seed(network_stream),
        phi,
    )?;
    let pre_cfg = PretrainConfig {
        steps: config.pretrain.steps,
        learning_rate: config.pretrain.learning_rate,
        batch_size: config.pretrain.batch_size,
        p_drop: config.pretrain.p_drop,
        seed: config.seed(pretrain_stream),
    };
    let (trained, losses) = pretrain(&net, &world.encoder, &schedule, &world.training_pairs(), &pre_cfg)?;
    let tail = losses.len().min(20);
    let mean_tail = losses[losses.len() - tail..].iter().sum::<f64>() / tail as f64;
    Ok((trained, schedule, mean_tail))
}

fn checkpoint_file(
    config: &ExperimentConfig,
    world: &World,
    net: &ScoreNetwork,
    schedule: &NoiseSchedule<f64>,
    pretrain_stream: u64,
    loss: f64,
) -> CheckpointFile {
    CheckpointFile {
        config_hash: config.hash(),
        checkpoint: Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            schedule: schedule.clone(),
            encoder: world.encoder.clone(),
            network: net.to_spec(),
            adapters: net.adapter_specs(),
            pretrain: PretrainConfig {
                steps: config.pretrain.steps,
                learning_rate: config.pretrain.learning_rate,
                batch_size: config.pretrain.batch_size,
                p_drop: config.pretrain.p_drop,
                seed: config.seed(pretrain_stream),
            },
            seed: config.master_seed,
        },
        final_losses_mean: loss,
    }
}

pub fn cmd_pretrain(config: &ExperimentConfig, out: &Path) -> Result<RunManifest> {
    let world = load_world(config, out)?;
    let (net, schedule, loss) =
        pretrain_model(config, &world, config.pretrain.width, streams::NETWORK_A, streams::PRETRAIN_A)?;
    let file = checkpoint_file(config, &world, &net, &schedule, streams::PRETRAIN_A, loss);
    let mut w = ArtifactWriter::new(out, &world.config_hash)?;
    w.write_json(CHECKPOINT_A_FILE, &file)?;
    w.finish("pretrain")
}

pub fn load_checkpoint(
    config: &ExperimentConfig,
    out: &Path,
    name: &str,
) -> Result<(ScoreNetwork, ConditionEncoder, NoiseSchedule<f64>)> {
    let path = out.join(name);
    let file: CheckpointFile = read_json(&path)?;
    expect_hash(&path, &file.config_hash, &config.hash())?;
    if file.checkpoint.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::invalid(format!(
            "unsupported checkpoint format version {}",
            file.checkpoint.format_version
        )));
    }
    if !file.checkpoint.encoder.verify_fingerprint() {
        return Err(Error::invalid("checkpoint encoder fingerprint does not verify"));
    }
    let net = ScoreNetwork::from_spec(&file.checkpoint.network, &file.checkpoint.adapters)?;
    Ok((net, file.checkpoint.encoder, file.checkpoint.schedule))
}

// --- global training ---------------------------------------------------------

pub fn cmd_train_neg(config: &ExperimentConfig, out: &Path) -> Result<RunManifest> {
    let (net, encoder, schedule) = load_checkpoint(config, out, CHECKPOINT_A_FILE)?;
    let result = train_global(
        &net,
        &encoder,
        &schedule,
        &load_world(config, out)?.reward,
        &config.eval_prompts(),
        &config.global_train_config(),
    )?;
    let mut embedding = result.embedding;
    // artifacts are stamped with the experiment config hash
    embedding.config_hash = config.hash();
    embedding.reward_curve_path = Some(REWARD_CURVE_FILE.to_string());
    let mut w = ArtifactWriter::new(out, &config.hash())?;
    w.write_json(NEG_GLOBAL_FILE, &embedding)?;
    let rows: Vec<Vec<String>> = result
        .reward_curve
        .iter()
        .enumerate()
        .map(|(i, r)| vec![i.to_string(), fmt(*r)])
        .collect();
    w.write_csv(REWARD_CURVE_FILE, "step,mean_reward", &rows)?;
    w.finish("train-neg")
}

fn load_embedding(config: &ExperimentConfig, out: &Path) -> Result<NegativeEmbedding> {
    let path = out.join(NEG_GLOBAL_FILE);
    let emb = NegativeEmbedding::load(&path)?;
    expect_hash(&path, &emb.config_hash, &config.hash())?;
    Ok(emb)
}

// --- per-sample tuning -------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerSampleEntry {
    pub class: usize,
    pub embedding: NegativeEmbedding,
    pub state: TuningState,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerSampleFile {
    pub config_hash: String,
    pub compat_paper_alg1: bool,
    pub entries: Vec<PerSampleEntry>,
}

pub fn cmd_tune_per_sample(
    config: &ExperimentConfig,
    out: &Path,
    compat_paper_alg1: bool,
) -> Result<RunManifest> {
    let world = load_world(config, out)?;
    let (net, encoder, schedule) = load_checkpoint(config, out, CHECKPOINT_A_FILE)?;
    let global = load_embedding(config, out)?;
    let ps_cfg = config.per_sample_config(compat_paper_alg1);
    let entries: Vec<PerSampleEntry> = config
        .eval_prompts()
        .par_iter()
        .map(|&prompt| -> Result<PerSampleEntry> {
            let class = match prompt {
                Prompt::Class(c) => c,
                Prompt::Null => unreachable!("eval prompts are classes"),
            };
            // per-prompt noise stream
            let mut cfg = ps_cfg.clone();
            cfg.seed = mix_seed(ps_cfg.seed, &[class as u64]);
            let (mut embedding, state) =
                train_per_sample(&net, &encoder, &schedule, &world.reward, prompt, &global, &cfg)?;
            embedding.config_hash = config.hash();
            Ok(PerSampleEntry { class, embedding, state })
        })
        .collect::<Result<_>>()?;
    let file = PerSampleFile { config_hash: config.hash(), compat_paper_alg1, entries };
    let mut w = ArtifactWriter::new(out, &config.hash())?;
    w.write_json(PER_SAMPLE_FILE, &file)?;
    w.finish("tune-per-sample")
}

// --- main evaluation (win rates) ----------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRow {
    pub name: String,
    pub per_prompt: Vec<(usize, f64)>,
    pub overall_mean: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReportFile {
    pub config_hash: String,
    pub n_seeds: usize,
    pub gamma: f64,
    pub rows: Vec<EvalRow>,
    /// win_rate[i][j] = win rate of rows[i] against rows[j].
    pub win_rate: Vec<Vec<f64>>,
}

/// Mean reward per prompt for one negative-embedding choice, with seeds a
/// pure function of (eval stream, prompt index, seed index) so every row
/// shares noise.
pub fn eval_rewards(
    net: &ScoreNetwork,
    encoder: &ConditionEncoder,
    schedule: &NoiseSchedule<f64>,
    world: &World,
    prompts: &[Prompt],
    negative_for: &(dyn Fn(usize) -> Option<Vec<f64>> + Sync),
    n_seeds: usize,
    gamma: f64,
    eval_seed: u64,
) -> Result<Vec<(usize, f64)>> {
    prompts
        .par_iter()
        .enumerate()
        .map(|(pi, &prompt)| -> Result<(usize, f64)> {
            let class = match prompt {
                Prompt::Class(c) => c,
                Prompt::Null => unreachable!("eval prompts are classes"),
            };
            let guidance = GuidanceConfig {
                gamma,
                negative: negative_for(class).map(Tensor::vector),
                solver: Solver::Ddim,
                steps: schedule.steps(),
            };
            let mut total = 0.0;
            for si in 0..n_seeds {
                let seed = mix_seed(eval_seed, &[pi as u64, si as u64]);
                let run = sample(net, encoder, schedule, prompt, &guidance, seed)?;
                total += world.reward.reward(prompt, &run.x0)?.item();
            }
            Ok((class, total / n_seeds as f64))
        })
        .collect()
}

pub fn cmd_eval(config: &ExperimentConfig, out: &Path) -> Result<RunManifest> {
    let world = load_world(config, out)?;
    let (net, encoder, schedule) = load_checkpoint(config, out, CHECKPOINT_A_FILE)?;
    let global = load_embedding(config, out)?;
    global.check_encoder(&encoder)?;
    let per_sample_path = out.join(PER_SAMPLE_FILE);
    let per_sample: PerSampleFile = read_json(&per_sample_path)?;
    expect_hash(&per_sample_path, &per_sample.config_hash, &config.hash())?;
    let handcrafted = world.handcrafted_negative()?;

    let prompts = config.eval_prompts();
    let eval_seed = config.seed(streams::EVAL);
    let gamma = config.train_global.gamma;
    let n_seeds = config.eval.n_seeds;

    let per_sample_lookup = |class: usize| -> Option<Vec<f64>> {
        per_sample
            .entries
            .iter()
            .find(|e| e.class == class)
            .map(|e| e.embedding.vector.clone())
    };
    let global_vec = global.vector.clone();
    let hand_vec = handcrafted.vector.clone();

    let kinds: Vec<(&str, Box<dyn Fn(usize) -> Option<Vec<f64>> + Sync>)> = vec![
        ("phi", Box::new(|_| None)),
        ("handcrafted", Box::new(move |_| Some(hand_vec.clone()))),
        ("global", Box::new(move |_| Some(global_vec.clone()))),
        ("per_sample", Box::new(per_sample_lookup)),
    ];

    let mut rows = Vec::with_capacity(kinds.len());
    for (name, lookup) in &kinds {
        let per_prompt = eval_rewards(
            &net, &encoder, &schedule, &world, &prompts, lookup.as_ref(), n_seeds, gamma, eval_seed,
        )?;
        let overall = per_prompt.iter().map(|(_, r)| r).sum::<f64>() / per_prompt.len() as f64;
        rows.push(EvalRow { name: name.to_string(), per_prompt, overall_mean: overall });
    }

    let win_rate: Vec<Vec<f64>> = rows
        .iter()
        .map(|a| {
            rows.iter()
                .map(|b| {
                    let ra: Vec<f64> = a.per_prompt.iter().map(|(_, r)| *r).collect();
                    let rb: Vec<f64> = b.per_prompt.iter().map(|(_, r)| *r).collect();
                    crate::trainer::win_rate(&ra, &rb).expect("equal lengths")
                })
                .collect()
        })
        .collect();

    let report = EvalReportFile {
        config_hash: config.hash(),
        n_seeds,
        gamma,
        rows: rows.clone(),
        win_rate,
    };
    let mut w = ArtifactWriter::new(out, &config.hash())?;
    w.write_json(EVAL_REPORT_FILE, &report)?;
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .flat_map(|row| {
            row.per_prompt
                .iter()
                .map(|(class, r)| vec![row.name.clone(), class.to_string(), fmt(*r)])
                .collect::<Vec<_>>()
        })
        .collect();
    w.write_csv(PER_PROMPT_CSV, "embedding,class,mean_reward", &csv_rows)?;
    w.finish("eval")
}

// --- efficiency probe ----------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EfficiencyVerdictFile {
    pub config_hash: String,
    pub reports: Vec<EfficiencyReport>,
    pub verdict: EfficiencyVerdict,
}

pub fn cmd_efficiency(config: &ExperimentConfig, out: &Path) -> Result<RunManifest> {
    let (net, encoder, schedule) = load_checkpoint(config, out, CHECKPOINT_A_FILE)?;
    let prompts: Vec<Prompt> = config
        .eval_prompts()
        .into_iter()
        .take(config.eval.probe_prompts)
        .collect();
    let (reports, verdict) = compare_groups(
        &net,
        &encoder,
        &schedule,
        &prompts,
        &config.eval.adapter_ranks,
        config.train_global.gamma,
        config.seed(streams::PROBE),
    )?;
    let mut w = ArtifactWriter::new(out, &config.hash())?;
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.group.clone(),
                r.d_theta.to_string(),
                r.n_prompts.to_string(),
                r.d_latent.to_string(),
                fmt(r.frobenius_norm),
                fmt(r.efficiency),
            ]
        })
        .collect();
    w.write_csv(EFFICIENCY_CSV, "group,d_theta,N,D,frobenius,efficiency", &rows)?;
    w.write_json(
        EFFICIENCY_VERDICT_FILE,
        &EfficiencyVerdictFile { config_hash: config.hash(), reports, verdict },
    )?;
    w.finish("efficiency")
}

// --- x̂0 similarity study --------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimilarityRow {
    pub t: usize,
    pub solver: Solver,
    pub mean_mse: f64,
    pub mean_cosine: f64,
}

/// For each t and solver: run to t, one-step predict x̂_0, compare against the
/// full same-seed DDIM sample. The t = 0 row is the complete chain itself.
pub fn experiment_x0_similarity(
    config: &ExperimentConfig,
    net: &ScoreNetwork,
    encoder: &ConditionEncoder,
    schedule: &NoiseSchedule<f64>,
    solvers: &[Solver],
) -> Result<Vec<SimilarityRow>> {
    let prompts = config.eval_prompts();
    let n_seeds = config.eval.similarity_seeds;
    let gamma = config.train_global.gamma;
    let sim_seed = config.seed(streams::SIMILARITY);
    let t_max = schedule.steps();
    let phi = encoder.encode(Prompt::Null)?;

    // reference endpoints, one per seed
    let refs: Vec<(Prompt, u64, Vec<f64>)> = (0..n_seeds)
        .into_par_iter()
        .map(|s| -> Result<(Prompt, u64, Vec<f64>)> {
            let prompt = prompts[s % prompts.len()];
            let seed = mix_seed(sim_seed, &[s as u64]);
            let guidance = GuidanceConfig {
                gamma,
                negative: None,
                solver: Solver::Ddim,
                steps: t_max,
            };
            let run = sample(net, encoder, schedule, prompt, &guidance, seed)?;
            Ok((prompt, seed, run.x0.data().to_vec()))
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(solvers.len() * (t_max + 1));
    for &solver in solvers {
        let per_t: Vec<SimilarityRow> = (0..=t_max)
            .into_par_iter()
            .map(|t| -> Result<SimilarityRow> {
                let mut mse_sum = 0.0;
                let mut cos_sum = 0.0;
                for (prompt, seed, x0_ref) in &refs {
                    let x0hat: Vec<f64> = if t == 0 {
                        let guidance =
                            GuidanceConfig { gamma, negative: None, solver, steps: t_max };
                        sample(net, encoder, schedule, *prompt, &guidance, *seed)?
                            .x0
                            .data()
                            .to_vec()
                    } else {
                        sample_to_t_then_x0hat(
                            net, encoder, schedule, *prompt, &phi, gamma, solver, t - 1, *seed,
                            None,
                        )?
                        .data()
                        .to_vec()
                    };
                    let mse: f64 = x0hat
                        .iter()
                        .zip(x0_ref)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        / x0hat.len() as f64;
                    let dot: f64 = x0hat.iter().zip(x0_ref).map(|(a, b)| a * b).sum();
                    let na: f64 = x0hat.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let nb: f64 = x0_ref.iter().map(|v| v * v).sum::<f64>().sqrt();
                    mse_sum += mse;
                    cos_sum += if na > 0.0 && nb > 0.0 { dot / (na * nb) } else { 1.0 };
                }
                Ok(SimilarityRow {
                    t,
                    solver,
                    mean_mse: mse_sum / refs.len() as f64,
                    mean_cosine: cos_sum / refs.len() as f64,
                })
            })
            .collect::<Result<_>>()?;
        rows.extend(per_t);
    }
    Ok(rows)
}

pub fn cmd_x0_similarity(
    config: &ExperimentConfig,
    out: &Path,
    solver: Option<Solver>,
) -> Result<RunManifest> {
    let (net, encoder, schedule) = load_checkpoint(config, out, CHECKPOINT_A_FILE)?;
    let solvers: Vec<Solver> = match solver {
        Some(s) => vec![s],
        None => vec![Solver::Ddim, Solver::Ddpm],
    };
    let rows = experiment_x0_similarity(config, &net, &encoder, &schedule, &solvers)?;
    let mut w = ArtifactWriter::new(out, &config.hash())?;
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![r.t.to_string(), r.solver.to_string(), fmt(r.mean_mse), fmt(r.mean_cosine)]
        })
        .collect();
    w.write_csv(X0_SIMILARITY_CSV, "t,solver,mean_mse,mean_cosine", &csv_rows)?;
    w.finish("x0-similarity")
}

// --- transfer ------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferFile {
    pub config_hash: String,
    pub model_b_width: usize,
    pub rows: Vec<EvalRow>,
    pub win_rate_n_vs_phi: f64,
    pub win_rate_n_vs_handcrafted: f64,
}

pub fn cmd_transfer(config: &ExperimentConfig, out: &Path) -> Result<RunManifest> {
    let world = load_world(config, out)?;
    let global = load_embedding(config, out)?;
    // model B: same world and encoder, independent seed and width
    let (net_b, schedule, loss_b) = pretrain_model(
        config,
        &world,
        config.transfer.model_b_width,
        streams::NETWORK_B,
        streams::PRETRAIN_B,
    )?;
    // the transfer contract: the embedding must belong to B's encoder
    global.check_encoder(&world.encoder)?;
    let handcrafted = world.handcrafted_negative()?;

    let prompts = config.eval_prompts();
    let eval_seed = config.seed(streams::EVAL);
    let gamma = config.train_global.gamma;
    let n_seeds = config.eval.n_seeds;
    let global_vec = global.vector.clone();
    let hand_vec = handcrafted.vector.clone();
    let kinds: Vec<(&str, Box<dyn Fn(usize) -> Option<Vec<f64>> + Sync>)> = vec![
        ("phi", Box::new(|_| None)),
        ("handcrafted", Box::new(move |_| Some(hand_vec.clone()))),
        ("global", Box::new(move |_| Some(global_vec.clone()))),
    ];
    let mut rows = Vec::new();
    for (name, lookup) in &kinds {
        let per_prompt = eval_rewards(
            &net_b, &world.encoder, &schedule, &world, &prompts, lookup.as_ref(), n_seeds, gamma,
            eval_seed,
        )?;
        let overall = per_prompt.iter().map(|(_, r)| r).sum::<f64>() / per_prompt.len() as f64;
        rows.push(EvalRow { name: name.to_string(), per_prompt, overall_mean: overall });
    }
    let rewards_of = |name: &str| -> Vec<f64> {
        rows.iter()
            .find(|r| r.name == name)
            .map(|r| r.per_prompt.iter().map(|(_, v)| *v).collect())
            .unwrap_or_default()
    };
    let transfer = TransferFile {
        config_hash: config.hash(),
        model_b_width: config.transfer.model_b_width,
        win_rate_n_vs_phi: crate::trainer::win_rate(&rewards_of("global"), &rewards_of("phi"))?,
        win_rate_n_vs_handcrafted: crate::trainer::win_rate(
            &rewards_of("global"),
            &rewards_of("handcrafted"),
        )?,
        rows,
    };
    let mut w = ArtifactWriter::new(out, &config.hash())?;
    let ckpt_b = checkpoint_file(config, &world, &net_b, &schedule, streams::PRETRAIN_B, loss_b);
    w.write_json(CHECKPOINT_B_FILE, &ckpt_b)?;
    w.write_json(TRANSFER_FILE, &transfer)?;
    w.finish("transfer")
}

// --- report --------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportFile {
    pub config_hash: String,
    pub artifacts: Vec<String>,
    pub eval: Option<EvalReportFile>,
    pub efficiency: Option<EfficiencyVerdictFile>,
    pub transfer: Option<TransferFile>,
}

/// Aggregates whatever stamped artifacts exist in the output directory,
/// refusing to combine files produced under a different config.
pub fn cmd_report(config: &ExperimentConfig, out: &Path) -> Result<RunManifest> {
    let expected = config.hash();
    let mut artifacts = Vec::new();

    let json_files = [
        WORLD_FILE,
        CHECKPOINT_A_FILE,
        CHECKPOINT_B_FILE,
        NEG_GLOBAL_FILE,
        PER_SAMPLE_FILE,
        EVAL_REPORT_FILE,
        EFFICIENCY_VERDICT_FILE,
        TRANSFER_FILE,
    ];
    for name in json_files {
        let path = out.join(name);
        if path.exists() {
            let found = json_config_hash(&path)?;
            expect_hash(&path, &found, &expected)?;
            artifacts.push(name.to_string());
        }
    }
    let csv_files = [REWARD_CURVE_FILE, PER_PROMPT_CSV, EFFICIENCY_CSV, X0_SIMILARITY_CSV];
    for name in csv_files {
        let path = out.join(name);
        if path.exists() {
            let found = csv_config_hash(&path)?;
            expect_hash(&path, &found, &expected)?;
            artifacts.push(name.to_string());
        }
    }
    if artifacts.is_empty() {
        return Err(Error::invalid(format!(
            "no stamped artifacts found in {}",
            out.display()
        )));
    }

    let maybe = |name: &str| out.join(name).exists();
    let report = ReportFile {
        config_hash: expected.clone(),
        artifacts,
        eval: if maybe(EVAL_REPORT_FILE) {
            Some(read_json(&out.join(EVAL_REPORT_FILE))?)
        } else {
            None
        },
        efficiency: if maybe(EFFICIENCY_VERDICT_FILE) {
            Some(read_json(&out.join(EFFICIENCY_VERDICT_FILE))?)
        } else {
            None
        },
        transfer: if maybe(TRANSFER_FILE) {
            Some(read_json(&out.join(TRANSFER_FILE))?)
        } else {
            None
        },
    };
    let mut w = ArtifactWriter::new(out, &expected)?;
    w.write_json(REPORT_FILE, &report)?;
    w.finish("report")
}
