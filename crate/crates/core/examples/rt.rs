use reneg::harness::config::ExperimentConfig;
use reneg::harness::world::{generate_world, World};
use reneg::harness::config::streams;
use reneg::diffusion::{pretrain, PretrainConfig, Prompt, ScoreNetwork};
use reneg::sampling::{sample, GuidanceConfig, Solver};
use reneg::util::mix_seed;

fn main() {
    let mut cfg = ExperimentConfig::default();
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args[1].parse().unwrap();
    let width: usize = args[2].parse().unwrap();
    let gamma: f64 = args[3].parse().unwrap();
    cfg.pretrain.steps = steps;
    cfg.pretrain.width = width;
    let world = generate_world(&cfg).unwrap();
    let schedule = World::schedule(&cfg).unwrap();
    let phi = world.encoder.encode(Prompt::Null).unwrap().data().to_vec();
    let net = ScoreNetwork::new(cfg.world.d_x, cfg.world.d_e, cfg.pretrain.width, cfg.seed(streams::NETWORK_A), phi).unwrap();
    let pc = PretrainConfig { steps: cfg.pretrain.steps, learning_rate: cfg.pretrain.learning_rate, batch_size: cfg.pretrain.batch_size, p_drop: cfg.pretrain.p_drop, seed: cfg.seed(streams::PRETRAIN_A) };
    let t0 = std::time::Instant::now();
    let (net, losses) = pretrain(&net, &world.encoder, &schedule, &world.training_pairs(), &pc).unwrap();
    println!("pretrain {:?}, final loss {:.4}", t0.elapsed(), losses[losses.len()-20..].iter().sum::<f64>()/20.0);
    let guidance = GuidanceConfig { gamma, negative: None, solver: Solver::Ddim, steps: schedule.steps() };
    let mut total = 0.0; let mut n = 0;
    for prompt in cfg.eval_prompts() {
        for si in 0..64u64 {
            let run = sample(&net, &world.encoder, &schedule, prompt, &guidance, mix_seed(1, &[si])).unwrap();
            total += world.reward.reward(prompt, &run.x0).unwrap().item();
            n += 1;
        }
    }
    println!("gamma {gamma}: mean reward {:.2}", total / n as f64);
}
