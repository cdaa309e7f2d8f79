use anyhow::Result;
use clap::{Parser, Subcommand};

use touchwalker_cli::commands::{self, AblateArgs, EvalArgs, PreprocessArgs, ReplayArgs, ServeArgs, SynthArgs, TrainCommand};

/// Touch-driven avatar locomotion: data preparation, training, evaluation
/// and the live session service.
#[derive(Debug, Parser)]
#[command(name = "touchwalker", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Turn a directory of BVH clips into a training dataset
    Preprocess(PreprocessArgs),
    /// Train a model on a preprocessed dataset
    Train(TrainCommand),
    /// Score checkpoints on held-out clips
    Eval(EvalArgs),
    /// Train and score the ablation variants
    Ablate(AblateArgs),
    /// Drive a checkpoint with the inputs of a clip and write the result
    Replay(ReplayArgs),
    /// Run the WebSocket session service
    Serve(ServeArgs),
    /// Write a procedural walking clip
    SynthWalk(SynthArgs),
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Preprocess(a) => commands::preprocess(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a).map(|_| ()),
        Command::Ablate(a) => commands::ablate(&a),
        Command::Replay(a) => commands::replay_clip(&a).map(|_| ()),
        Command::Serve(a) => commands::serve(&a),
        Command::SynthWalk(a) => commands::synth_walk(&a),
    }
}
