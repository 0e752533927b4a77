use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use reneg::harness::config::ExperimentConfig;
use reneg::harness::experiments as exp;
use reneg::sampling::Solver;
use reneg::Error;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SolverArg {
    Ddim,
    Ddpm,
}

impl From<SolverArg> for Solver {
    fn from(s: SolverArg) -> Solver {
        match s {
            SolverArg::Ddim => Solver::Ddim,
            SolverArg::Ddpm => Solver::Ddpm,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "reneg", version, about = "Negative-embedding experiments on synthetic diffusion worlds")]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory for artifacts and manifests.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Overrides master_seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the frozen world: mixtures, encoder, reward, dataset.
    GenWorld,
    /// Pretrain the score network on the world's dataset.
    Pretrain,
    /// Learn the global negative embedding by reward ascent.
    TrainNeg,
    /// Refine the global embedding per evaluation prompt.
    TunePerSample {
        /// Follow the published listing verbatim (J_best = 0, resampled
        /// noise, final iterate returned).
        #[arg(long)]
        compat_paper_alg1: bool,
    },
    /// Evaluate all embedding variants and compute win rates.
    Eval,
    /// Parameter-efficiency probe over embedding / full-theta / adapters.
    Efficiency,
    /// Predicted-endpoint similarity sweep over t and solver.
    X0Similarity {
        /// Restrict the sweep to one solver.
        #[arg(long, value_enum)]
        solver: Option<SolverArg>,
    },
    /// Re-evaluate the learned embedding on an independently trained model.
    Transfer,
    /// Aggregate all stamped artifacts into a single report.
    Report,
}

fn run(cli: &Cli) -> reneg::Result<()> {
    if let Ok(threads) = std::env::var("RENEG_THREADS") {
        let n: usize = threads
            .parse()
            .map_err(|_| Error::invalid(format!("RENEG_THREADS must be an integer, got {threads:?}")))?;
        if n > 0 {
            // ignore failure: the global pool may already exist in tests
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let config_path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::config("config", "missing required --config PATH"))?;
    let mut config = ExperimentConfig::load(config_path)?;
    if let Some(seed) = cli.seed {
        config.master_seed = seed;
    }
    let out = cli.out.as_path();
    let manifest = match &cli.command {
        Command::GenWorld => exp::cmd_gen_world(&config, out)?,
        Command::Pretrain => exp::cmd_pretrain(&config, out)?,
        Command::TrainNeg => exp::cmd_train_neg(&config, out)?,
        Command::TunePerSample { compat_paper_alg1 } => {
            exp::cmd_tune_per_sample(&config, out, *compat_paper_alg1)?
        }
        Command::Eval => exp::cmd_eval(&config, out)?,
        Command::Efficiency => exp::cmd_efficiency(&config, out)?,
        Command::X0Similarity { solver } => {
            exp::cmd_x0_similarity(&config, out, solver.map(Solver::from))?
        }
        Command::Transfer => exp::cmd_transfer(&config, out)?,
        Command::Report => exp::cmd_report(&config, out)?,
    };
    println!(
        "{}: wrote {} file(s) to {} in {} ms (config {})",
        manifest.subcommand,
        manifest.files.len(),
        out.display(),
        manifest.wall_ms,
        &manifest.config_hash[..12],
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse(); // clap exits with code 2 on usage errors
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Config { field, msg }) => {
            eprintln!("config error: field={field} msg={msg}");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
