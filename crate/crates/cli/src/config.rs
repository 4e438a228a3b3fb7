//! Run configs: one JSON file per invocation. Paths are relative to the
//! config file. The top-level `seed` is the only seed; nested `seed` fields
//! are overwritten with it.

use std::path::{Path, PathBuf};

use layerprobe::capacity::CapacityPlan;
use layerprobe::data::{MaskingConfig, RenderMode};
use layerprobe::heads::HeadTrainingConfig;
use layerprobe::metrics::MetricsOptions;
use layerprobe::overlap::MatchMode;
use layerprobe::toy::ToyConfig;
use layerprobe::training::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    ToyData,
    Pretrain,
    Finetune,
    TrainHeads,
    Probe,
    Metrics,
    Overlap,
    Capacity,
    Report,
}

impl Command {
    pub const ALL: [Command; 9] = [
        Command::ToyData,
        Command::Pretrain,
        Command::Finetune,
        Command::TrainHeads,
        Command::Probe,
        Command::Metrics,
        Command::Overlap,
        Command::Capacity,
        Command::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::ToyData => "toy-data",
            Command::Pretrain => "pretrain",
            Command::Finetune => "finetune",
            Command::TrainHeads => "train-heads",
            Command::Probe => "probe",
            Command::Metrics => "metrics",
            Command::Overlap => "overlap",
            Command::Capacity => "capacity",
            Command::Report => "report",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }
}

/// Common shape of every command config.
pub trait RunConfig: DeserializeOwned + Serialize {
    fn output_dir(&self) -> &Path;
    /// `(field, path)` for every file or directory the run reads.
    fn inputs(&self) -> Vec<(&'static str, &Path)>;
    /// Cross-field checks serde cannot express.
    fn validate(&self) -> CliResult<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyDataConfig {
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub toy: ToyConfig,
}

/// Encoder shape; the vocabulary size comes from the vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelShape {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub max_seq_len: usize,
    pub layernorm_epsilon: f64,
}

impl Default for ModelShape {
    fn default() -> Self {
        let t = layerprobe::nn::EncoderConfig::toy(1);
        Self {
            num_layers: t.num_layers,
            hidden_dim: t.hidden_dim,
            num_heads: t.num_heads,
            ff_dim: t.ff_dim,
            max_seq_len: t.max_seq_len,
            layernorm_epsilon: t.layernorm_epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    pub corpus: PathBuf,
    /// Built from the corpus when absent.
    #[serde(default)]
    pub vocab: Option<PathBuf>,
    #[serde(default = "one")]
    pub min_count: usize,
    #[serde(default)]
    pub model: ModelShape,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneTask {
    Mlm,
    SpanQa,
    PointwiseRank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    pub checkpoint: PathBuf,
    /// The pretrained MLM head. Trained along with the encoder for `mlm`,
    /// carried over unchanged otherwise.
    pub head: PathBuf,
    pub vocab: PathBuf,
    pub task: FinetuneTask,
    /// Text lines for `mlm`; JSON lines of examples for the pair tasks.
    pub data: PathBuf,
    #[serde(default)]
    pub allow_no_answer: bool,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainHeadsConfig {
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    pub checkpoint: PathBuf,
    pub vocab: PathBuf,
    pub corpus: PathBuf,
    /// Required when heads start from the pretrained head.
    #[serde(default)]
    pub pretrained_head: Option<PathBuf>,
    #[serde(default)]
    pub include_embedding: bool,
    /// Overrides the default 1..=L (or 0..=L) selection.
    #[serde(default)]
    pub layers: Option<Vec<usize>>,
    #[serde(default)]
    pub head: HeadTrainingConfig,
    #[serde(default)]
    pub masking: MaskingConfig,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    pub probes: PathBuf,
    /// Required with `checkpoint`; taken from the archive otherwise.
    #[serde(default)]
    pub vocab: Option<PathBuf>,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub archive: Option<PathBuf>,
    /// Directory of per-layer heads written by `train-heads`.
    #[serde(default)]
    pub heads_dir: Option<PathBuf>,
    /// Used for every layer without its own head.
    #[serde(default)]
    pub pretrained_head: Option<PathBuf>,
    #[serde(default)]
    pub include_embedding: bool,
    #[serde(default)]
    pub layers: Option<Vec<usize>>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_render_mode")]
    pub render_mode: RenderMode,
    #[serde(default)]
    pub metrics: MetricsOptions,
    /// Metrics JSON of the base model, for learned/forgotten.
    #[serde(default)]
    pub base_metrics: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Rank table written by `probe`.
    pub ranks: PathBuf,
    #[serde(default = "default_probe_set")]
    pub probe_set: String,
    #[serde(default)]
    pub metrics: MetricsOptions,
    #[serde(default)]
    pub base_metrics: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverlapConfig {
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    pub corpus: PathBuf,
    pub probes: Vec<PathBuf>,
    pub vocab: PathBuf,
    #[serde(default)]
    pub match_mode: MatchMode,
    /// Denominator of the information density; defaults to the document count.
    #[serde(default)]
    pub passages: Option<usize>,
    #[serde(default = "default_shard")]
    pub shard_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapacityConfig {
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    pub checkpoint: PathBuf,
    pub head: PathBuf,
    pub vocab: PathBuf,
    /// Probe files; each set is named by its file stem.
    pub probes: Vec<PathBuf>,
    pub heldout: PathBuf,
    #[serde(default)]
    pub plan: CapacityPlan,
    /// Run template and evidence variants from the same checkpoint.
    #[serde(default)]
    pub compare_modes: bool,
    #[serde(default)]
    pub include_random: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub metrics: Option<PathBuf>,
    #[serde(default)]
    pub capacity: Option<PathBuf>,
    /// Also draw the layer curve as SVG (best-effort).
    #[serde(default = "yes")]
    pub svg: bool,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

fn default_val_fraction() -> f64 {
    0.1
}

fn default_k() -> usize {
    100
}

fn default_render_mode() -> RenderMode {
    RenderMode::Template
}

fn default_probe_set() -> String {
    "probes".into()
}

fn default_shard() -> usize {
    1024
}

fn opt<'a>(field: &'static str, p: &'a Option<PathBuf>) -> Option<(&'static str, &'a Path)> {
    p.as_deref().map(|p| (field, p))
}

impl RunConfig for ToyDataConfig {
    fn output_dir(&self) -> &Path {
        &self.output_dir
    }

    fn inputs(&self) -> Vec<(&'static str, &Path)> {
        Vec::new()
    }
}

impl RunConfig for PretrainConfig {
    fn output_dir(&self) -> &Path {
        &self.output_dir
    }

    fn inputs(&self) -> Vec<(&'static str, &Path)> {
        let mut v = vec![("corpus", self.corpus.as_path())];
        v.extend(opt("vocab", &self.vocab));
        v
    }
}

impl RunConfig for FinetuneConfig {
    fn output_dir(&self) -> &Path {
        &self.output_dir
    }

    fn inputs(&self) -> Vec<(&'static str, &Path)> {
        vec![
            ("checkpoint", self.checkpoint.as_path()),
            ("head", self.head.as_path()),
            ("vocab", self.vocab.as_path()),
            ("data", self.data.as_path()),
        ]
    }
}

impl RunConfig for TrainHeadsConfig {
    fn output_dir(&self) -> &Path {
        &self.output_dir
    }

    fn inputs(&self) -> Vec<(&'static str, &Path)> {
        let mut v = vec![
            ("checkpoint", self.checkpoint.as_path()),
            ("vocab", self.vocab.as_path()),
            ("corpus", self.corpus.as_path()),
        ];
        v.extend(opt("pretrained_head", &self.pretrained_head));
        v
    }

    fn validate(&self) -> CliResult<()> {
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(CliError::schema("val_fraction", "must be in [0, 1)"));
        }
        Ok(())
    }
}

impl RunConfig for ProbeConfig {
    fn output_dir(&self) -> &Path {
        &self.output_dir
    }

    fn inputs(&self) -> Vec<(&'static str, &Path)> {
        let mut v = vec![("probes", self.probes.as_path())];
        v.extend(opt("vocab", &self.vocab));
        v.extend(opt("checkpoint", &self.checkpoint));
        v.extend(opt("archive", &self.archive));
        v.extend(opt("heads_dir", &self.heads_dir));
        v.extend(opt("pretrained_head", &self.pretrained_head));
        v.extend(opt("base_metrics", &self.base_metrics));
        v
    }

    fn validate(&self) -> CliResult<()> {
        match (&self.checkpoint, &self.archive) {
            (Some(_), Some(_)) | (None, None) => {
                return Err(CliError::schema("checkpoint", "exactly one of `checkpoint` and `archive` is required"))
            }
            (Some(_), None) if self.vocab.is_none() => {
                return Err(CliError::schema("vocab", "missing field `vocab` (required with `checkpoint`)"))
            }
            _ => {}
        }
        if self.checkpoint.is_some() && self.heads_dir.is_none() && self.pretrained_head.is_none() {
            return Err(CliError::schema("heads_dir", "a checkpoint needs `heads_dir` or `pretrained_head`"));
        }
        if self.k == 0 {
            return Err(CliError::schema("k", "must be at least 1"));
        }
        validate_ks(&self.metrics)
    }
}

fn validate_ks(m: &MetricsOptions) -> CliResult<()> {
    if m.ks.is_empty() || m.ks.contains(&0) {
        return Err(CliError::schema("metrics.ks", "needs at least one k, each at least 1"));
    }
    Ok(())
}

impl RunConfig for MetricsConfig {
    fn output_dir(&self) -> &Path {
        &self.output_dir
    }

    fn inputs(&self) -> Vec<(&'static str, &Path)> {
        let mut v = vec![("ranks", self.ranks.as_path())];
        v.extend(opt("base_metrics", &self.base_metrics));
        v
    }

    fn validate(&self) -> CliResult<()> {
        validate_ks(&self.metrics)
    }
}

impl RunConfig for OverlapConfig {
    fn output_dir(&self) -> &Path {
        &self.output_dir
    }

    fn inputs(&self) -> Vec<(&'static str, &Path)> {
        let mut v = vec![("corpus", self.corpus.as_path()), ("vocab", self.vocab.as_path())];
        v.extend(self.probes.iter().map(|p| ("probes", p.as_path())));
        v
    }

    fn validate(&self) -> CliResult<()> {
        if self.probes.is_empty() {
            return Err(CliError::schema("probes", "needs at least one probe file"));
        }
        if self.shard_size == 0 {
            return Err(CliError::schema("shard_size", "must be at least 1"));
        }
        Ok(())
    }
}

impl RunConfig for CapacityConfig {
    fn output_dir(&self) -> &Path {
        &self.output_dir
    }

    fn inputs(&self) -> Vec<(&'static str, &Path)> {
        let mut v = vec![
            ("checkpoint", self.checkpoint.as_path()),
            ("head", self.head.as_path()),
            ("vocab", self.vocab.as_path()),
            ("heldout", self.heldout.as_path()),
        ];
        v.extend(self.probes.iter().map(|p| ("probes", p.as_path())));
        v
    }

    fn validate(&self) -> CliResult<()> {
        if self.probes.is_empty() {
            return Err(CliError::schema("probes", "needs at least one probe file"));
        }
        Ok(())
    }
}

impl RunConfig for ReportConfig {
    fn output_dir(&self) -> &Path {
        &self.output_dir
    }

    fn inputs(&self) -> Vec<(&'static str, &Path)> {
        let mut v = Vec::new();
        v.extend(opt("metrics", &self.metrics));
        v.extend(opt("capacity", &self.capacity));
        v
    }

    fn validate(&self) -> CliResult<()> {
        if self.metrics.is_none() && self.capacity.is_none() {
            return Err(CliError::schema("metrics", "missing field `metrics` (or `capacity`)"));
        }
        Ok(())
    }
}

/// A parsed config with the seed override applied.
#[derive(Debug, Clone)]
pub struct Loaded<C> {
    pub config: C,
    /// Directory that relative paths are resolved against.
    pub base_dir: PathBuf,
}

impl<C> Loaded<C> {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }
}

/// Reads, checks and deserializes a config for `command`.
///
/// An optional top-level `"command"` key must match. `seed_override`
/// replaces the top-level seed. Every referenced path must exist.
pub fn load<C: RunConfig>(path: &Path, command: Command, seed_override: Option<u64>) -> CliResult<Loaded<C>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::schema("config", format!("cannot read {}: {e}", path.display())))?;
    let mut value: Value =
        serde_json::from_str(&text).map_err(|e| CliError::schema("config", format!("not valid JSON: {e}")))?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| CliError::schema("config", "top level must be a JSON object"))?;
    if let Some(c) = obj.remove("command") {
        if c.as_str() != Some(command.name()) {
            return Err(CliError::schema("command", format!("config is for {c}, not {:?}", command.name())));
        }
    }
    if let Some(seed) = seed_override {
        obj.insert("seed".into(), Value::from(seed));
    }
    let config: C = parse(value)?;
    config.validate()?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let loaded = Loaded { config, base_dir };
    for (field, p) in loaded.config.inputs() {
        let full = loaded.resolve(p);
        if !full.exists() {
            return Err(CliError::schema(field, format!("no such file or directory: {}", full.display())));
        }
    }
    Ok(loaded)
}

fn parse<C: DeserializeOwned>(value: Value) -> CliResult<C> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let message = e.inner().to_string();
        CliError::schema(field_name(&path, &message), message)
    })
}

/// Dotted field path of a serde error: the error path, extended by the
/// backquoted name in "missing field" and "unknown field" messages.
fn field_name(path: &str, message: &str) -> String {
    let named = ["missing field `", "unknown field `"]
        .iter()
        .find_map(|p| message.strip_prefix(p))
        .and_then(|rest| rest.split('`').next());
    let root = path == "." || path.is_empty();
    match named {
        Some(name) if root => name.to_string(),
        Some(name) if !path.ends_with(name) => format!("{path}.{name}"),
        _ if root => "config".into(),
        _ => path.to_string(),
    }
}

/// Parses the `LAYERPROBE_SEED` value.
pub fn parse_seed_override(raw: Option<String>) -> CliResult<Option<u64>> {
    raw.map(|s| {
        s.trim()
            .parse::<u64>()
            .map_err(|e| CliError::schema("LAYERPROBE_SEED", format!("not an unsigned integer: {e}")))
    })
    .transpose()
}
