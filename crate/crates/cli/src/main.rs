mod commands;
mod config;

use clap::{Parser, Subcommand};

use config::Flags;

#[derive(Parser, Debug)]
#[command(name = "dglight", version, about = "Critic-guided traffic signal control lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Generate a grid network and synthetic flow
    GenNet,
    /// Convert CityFlow roadnet and flow files to the native format
    ImportCityflow,
    /// Run a fixed-time, max-pressure or random controller
    Baseline,
    /// Train the graph-attention critic
    TrainCritic,
    /// Collect critic-scored rollout records
    Rollout,
    /// Train the mock policy on rollout records
    GrpoTrain,
    /// Collect records scored by forked joint rollouts
    JsgrpoRollout,
    /// Evaluate any controller
    Eval,
}

fn main() -> std::process::ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = config::RunConfig::resolve(cli.flags).and_then(|cfg| match cli.command {
        Command::GenNet => commands::gen_net(&cfg),
        Command::ImportCityflow => commands::import_cityflow(&cfg),
        Command::Baseline => commands::baseline(&cfg),
        Command::TrainCritic => commands::train_critic(&cfg),
        Command::Rollout => commands::rollout(&cfg),
        Command::GrpoTrain => commands::grpo_train(&cfg),
        Command::JsgrpoRollout => commands::jsgrpo_rollout(&cfg),
        Command::Eval => commands::eval(&cfg),
    });
    match result {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}
