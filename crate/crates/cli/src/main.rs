//! `lipbc`: train experts, collect demonstrations, clone them into certified
//! policies, train attacks, run noise sweeps and print certificates.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lipbc_core::Error;

#[derive(Parser, Debug)]
#[command(name = "lipbc", version, about = "Lipschitz-certified behavior cloning")]
struct Cli {
    /// Worker threads for parallel subcommands (collect, attack-train, evaluate).
    #[arg(long, global = true, env = "LIPBC_JOBS")]
    jobs: Option<usize>,

    /// Config file; the section named after the subcommand supplies defaults
    /// for flags that are not given.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train (CartPole) or instantiate (Pendulum) the demonstrator.
    TrainExpert(TrainExpertArgs),
    /// Record expert trajectories.
    Collect(CollectArgs),
    /// Behavior cloning with vanilla, LipsNet or SR2L training.
    TrainBc(TrainBcArgs),
    /// Train learned attack models against a policy.
    AttackTrain(AttackTrainArgs),
    /// Run a noise sweep and write report.csv plus worst-case plots.
    Evaluate(EvaluateArgs),
    /// Print the certified worst-case value drop of a policy.
    Certify(CertifyArgs),
}

#[derive(Args, Debug)]
pub struct TrainExpertArgs {
    #[arg(long)]
    pub env: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Environment-step budget of the CartPole trainer.
    #[arg(long)]
    pub max_env_steps: Option<usize>,
    #[arg(long)]
    pub eval_episodes: Option<usize>,
}

#[derive(Args, Debug)]
pub struct CollectArgs {
    #[arg(long)]
    pub env: Option<String>,
    #[arg(long)]
    pub expert_weights: Option<PathBuf>,
    #[arg(long)]
    pub n_traj: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainBcArgs {
    /// vanilla, lipsnet or sr2l.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub target_lipschitz: Option<f64>,
    /// Weight of the LipsNet auxiliary loss.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub sr2l_eps: Option<f64>,
    #[arg(long)]
    pub sr2l_weight: Option<f64>,
    /// Perturbation norm of the SR2L adversary.
    #[arg(long)]
    pub norm: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Comma-separated hidden widths.
    #[arg(long)]
    pub hidden: Option<String>,
    #[arg(long)]
    pub eval_interval: Option<usize>,
    #[arg(long)]
    pub eval_episodes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_weights: Option<PathBuf>,
    /// Training log (CSV: step, train_loss, aux_loss, eval_score).
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AttackTrainArgs {
    /// Victim policy weights.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// adversarial or rs.
    #[arg(long)]
    pub kind: Option<String>,
    /// Comma-separated budgets.
    #[arg(long)]
    pub eps: Option<String>,
    #[arg(long)]
    pub norm: Option<String>,
    /// Attack models per budget.
    #[arg(long)]
    pub models: Option<usize>,
    /// Method label used in artifact names.
    #[arg(long)]
    pub method: Option<String>,
    /// Victim training seed used in artifact names.
    #[arg(long)]
    pub victim_seed: Option<u64>,
    /// Adversary optimization steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Robust Sarsa rounds.
    #[arg(long)]
    pub rs_updates: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for report.csv and plots.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Load attack models from this directory instead of training them.
    #[arg(long)]
    pub attack_dir: Option<PathBuf>,
    #[arg(long)]
    pub episodes: Option<usize>,
}

#[derive(Args, Debug)]
pub struct CertifyArgs {
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub rmax: Option<f64>,
    #[arg(long)]
    pub eps: Option<f64>,
    /// categorical or deterministic; must match the weights.
    #[arg(long)]
    pub head: Option<String>,
    /// Reward Lipschitz constant (deterministic heads).
    #[arg(long)]
    pub lr: Option<f64>,
    /// Transition Lipschitz constant (deterministic heads).
    #[arg(long)]
    pub lp: Option<f64>,
    #[arg(long)]
    pub norm: Option<String>,
}

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_MISSING: u8 = 3;
pub const EXIT_SCHEMA: u8 = 4;
pub const EXIT_NUMERICAL: u8 = 5;

fn exit_code(e: &Error) -> (u8, &'static str) {
    match e {
        Error::MissingArtifact(_) => (EXIT_MISSING, "missing-artifact"),
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => (EXIT_MISSING, "missing-artifact"),
        Error::Schema(_) | Error::BudgetMismatch(_) => (EXIT_SCHEMA, "schema"),
        Error::Numerical(_) | Error::TrainingFailure(_) | Error::DegenerateLayer { .. } => (EXIT_NUMERICAL, "numerical"),
        Error::Io(_) => (1, "io"),
        Error::Dimension(_) | Error::Contract(_) | Error::Domain(_) | Error::UnsupportedHead(_) => (EXIT_USAGE, "usage"),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("lipbc: error kind=usage: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    let result = commands::Context::new(cli.config.as_deref()).and_then(|ctx| match &cli.command {
        Command::TrainExpert(a) => commands::train_expert(&ctx, a),
        Command::Collect(a) => commands::collect(&ctx, a),
        Command::TrainBc(a) => commands::train_bc(&ctx, a),
        Command::AttackTrain(a) => commands::attack_train(&ctx, a),
        Command::Evaluate(a) => commands::evaluate(&ctx, a),
        Command::Certify(a) => commands::certify(&ctx, a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = exit_code(&e);
            eprintln!("lipbc: error kind={kind}: {e}");
            ExitCode::from(code)
        }
    }
}
