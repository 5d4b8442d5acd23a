//! `persona`: generate scenarios, train the dialogue policy, and write
//! evaluation and matcher-benchmark reports.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{EXIT_USAGE, EXIT_VALIDATION};

#[derive(Debug, Parser)]
#[command(name = "persona", version, about = "Personalized dialogue alignment simulator and PPO trainer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write seeded synthetic user scenarios.
    GenScenarios(GenArgs),
    /// Train the policy with PPO and save a checkpoint and reward curve.
    Train(TrainArgs),
    /// Run a checkpoint on scenarios and write alignment reports.
    Eval(EvalArgs),
    /// Score slot matchers on the profile-overlap benchmark.
    JudgeBench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 74)]
    pub count: usize,
    /// Mix in slots outside the standard ten.
    #[arg(long)]
    pub open_schema: bool,
    #[arg(long, default_value_t = 10)]
    pub horizon: usize,
    /// Change the first revealed attribute at this turn.
    #[arg(long)]
    pub conflict_turn: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Scenario files or directories.
    #[arg(long, num_args = 1..)]
    pub scenarios: Vec<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Reward weights `wp,wr`.
    #[arg(long)]
    pub weights: Option<String>,
    /// `exact` or `token:<threshold>`.
    #[arg(long)]
    pub matcher: Option<String>,
    /// Override every scenario's horizon.
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub rounds: Option<usize>,
    /// Continue from a checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Also save a checkpoint every this many rounds.
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Standard,
    Conflict,
    Longterm,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, num_args = 1..)]
    pub scenarios: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = Mode::Standard)]
    pub mode: Mode,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub weights: Option<String>,
    #[arg(long)]
    pub matcher: Option<String>,
    /// Defaults to 10, or 70 in long-term mode.
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Swap turn for scenarios without a configured conflict.
    #[arg(long, default_value_t = 6)]
    pub conflict_turn: usize,
    /// Episodes per scenario.
    #[arg(long, default_value_t = 1)]
    pub samples: usize,
    /// Take the most probable action instead of sampling.
    #[arg(long)]
    pub greedy: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Distribution {
    /// Random paraphrased and altered counts per case.
    Mixed,
    /// Unchanged copies of a random subset.
    Identity,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 300)]
    pub count: usize,
    #[arg(long, value_enum, default_value_t = Distribution::Mixed)]
    pub distribution: Distribution,
    /// Matchers to score; defaults to `exact` and `token:0.5`.
    #[arg(long)]
    pub matcher: Vec<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let result = match cli.command {
        Command::GenScenarios(args) => commands::gen_scenarios(&args),
        Command::Train(args) => commands::train(&args),
        Command::Eval(args) => commands::eval(&args),
        Command::JudgeBench(args) => commands::judge_bench(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {failure}");
            debug_assert!(failure.code >= EXIT_VALIDATION);
            ExitCode::from(failure.code)
        }
    }
}
