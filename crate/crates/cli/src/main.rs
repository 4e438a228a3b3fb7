use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use layerprobe_cli::config::parse_seed_override;
use layerprobe_cli::{run, CliError, Command, RunOptions};
use serde_json::json;

#[derive(Parser)]
#[command(name = "layerprobe", version, about = "Layer-wise knowledge probing for masked language models")]
struct Cli {
    /// Worker threads: 1 runs sequentially, 0 uses every core.
    #[arg(short, long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct ConfigArg {
    /// JSON run config; relative paths inside it resolve against its directory.
    config: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic corpus, vocabulary and probe sets.
    ToyData(ConfigArg),
    /// Pretrain an encoder and its MLM head on a corpus.
    Pretrain(ConfigArg),
    /// Fine-tune a checkpoint with MLM, span QA or pointwise ranking.
    Finetune(ConfigArg),
    /// Train one decoder head per layer on a frozen encoder.
    TrainHeads(ConfigArg),
    /// Rank every probe at every layer and compute metrics.
    Probe(ConfigArg),
    /// Recompute metrics from a rank table.
    Metrics(ConfigArg),
    /// Measure probe coverage of a corpus.
    Overlap(ConfigArg),
    /// Sequential memorisation over probe sets.
    Capacity(ConfigArg),
    /// Write CSV tables and the layer curve from metrics or capacity JSON.
    Report(ConfigArg),
}

impl Cmd {
    fn split(self) -> (Command, PathBuf) {
        match self {
            Cmd::ToyData(a) => (Command::ToyData, a.config),
            Cmd::Pretrain(a) => (Command::Pretrain, a.config),
            Cmd::Finetune(a) => (Command::Finetune, a.config),
            Cmd::TrainHeads(a) => (Command::TrainHeads, a.config),
            Cmd::Probe(a) => (Command::Probe, a.config),
            Cmd::Metrics(a) => (Command::Metrics, a.config),
            Cmd::Overlap(a) => (Command::Overlap, a.config),
            Cmd::Capacity(a) => (Command::Capacity, a.config),
            Cmd::Report(a) => (Command::Report, a.config),
        }
    }
}

fn fail(e: CliError) -> ExitCode {
    eprintln!("{}", e.to_json());
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let seed_override = match parse_seed_override(std::env::var("LAYERPROBE_SEED").ok()) {
        Ok(s) => s,
        Err(e) => return fail(e),
    };
    #[cfg(feature = "parallel")]
    if cli.jobs > 1 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    let opts = RunOptions { jobs: cli.jobs, seed_override };
    let (command, config) = cli.command.split();
    match run(command, &config, &opts) {
        Ok(out) => {
            let outputs: Vec<&str> = out.manifest.outputs.iter().map(|o| o.path.as_str()).collect();
            println!(
                "{}",
                json!({
                    "status": "ok",
                    "command": command.name(),
                    "output_dir": out.output_dir,
                    "outputs": outputs,
                    "summary": out.summary,
                })
            );
            ExitCode::SUCCESS
        }
        Err(e) => fail(e),
    }
}
