//! Config-driven pipelines over the `layerprobe` library. Each command
//! reads one JSON config, writes its artifacts and a manifest into the
//! configured output directory, and reports failures as JSON.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod report;

use std::path::{Path, PathBuf};
use std::time::Instant;

use layerprobe::Execution;
use serde_json::Value;

pub use config::Command;
pub use error::{CliError, CliResult};
pub use manifest::{Manifest, MANIFEST_FILE};

use config::{load, RunConfig};
use manifest::RunContext;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// 1 runs sequentially; anything else uses the parallel path.
    pub jobs: usize,
    /// Replaces the config's top-level seed.
    pub seed_override: Option<u64>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { jobs: 1, seed_override: None }
    }
}

impl RunOptions {
    pub fn execution(&self) -> Execution {
        if self.jobs == 1 {
            Execution::Sequential
        } else {
            Execution::Parallel
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub output_dir: PathBuf,
    pub manifest: Manifest,
    pub summary: Value,
}

pub fn run(command: Command, config_path: &Path, opts: &RunOptions) -> CliResult<RunOutcome> {
    use commands as c;
    match command {
        Command::ToyData => execute(command, config_path, opts, c::toy_data),
        Command::Pretrain => execute(command, config_path, opts, c::pretrain),
        Command::Finetune => execute(command, config_path, opts, c::finetune),
        Command::TrainHeads => execute(command, config_path, opts, c::train_heads),
        Command::Probe => execute(command, config_path, opts, c::probe),
        Command::Metrics => execute(command, config_path, opts, c::metrics),
        Command::Overlap => execute(command, config_path, opts, c::overlap),
        Command::Capacity => execute(command, config_path, opts, c::capacity),
        Command::Report => execute(command, config_path, opts, c::report),
    }
}

fn execute<C, F>(command: Command, config_path: &Path, opts: &RunOptions, body: F) -> CliResult<RunOutcome>
where
    C: RunConfig,
    F: FnOnce(&mut RunContext, &C) -> CliResult<Value>,
{
    let start = Instant::now();
    let loaded = load::<C>(config_path, command, opts.seed_override)?;
    let output_dir = loaded.resolve(loaded.config.output_dir());
    let mut config = serde_json::to_value(&loaded.config).map_err(|e| CliError::schema("config", e.to_string()))?;
    let seed = config.get("seed").and_then(Value::as_u64).unwrap_or(0);
    if let Some(obj) = config.as_object_mut() {
        obj.insert("command".into(), command.name().into());
    }
    log::info!("{} -> {}", command.name(), output_dir.display());
    let mut ctx = RunContext::new(loaded.base_dir.clone(), &output_dir, opts.execution())?;
    let summary = body(&mut ctx, &loaded.config)?;
    let manifest = Manifest {
        tool: manifest::TOOL.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.name().into(),
        config,
        seed,
        jobs: opts.jobs,
        inputs: Vec::new(),
        outputs: Vec::new(),
        wall_time_seconds: start.elapsed().as_secs_f64(),
    };
    let manifest = ctx.commit(&output_dir, manifest)?;
    Ok(RunOutcome { output_dir, manifest, summary })
}
