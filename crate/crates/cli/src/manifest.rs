//! Run manifests and the staging directory that keeps artifact directories
//! free of orphans: outputs are written aside and moved in, followed by the
//! manifest, only when the command succeeds.

use std::fs;
use std::path::{Path, PathBuf};

use layerprobe::Execution;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{module, CliError, CliResult, Tag};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TOOL: &str = "layerprobe";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    /// Inputs: as written in the config. Outputs: relative to the output dir.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// The effective config, defaults filled in.
    pub config: serde_json::Value,
    pub seed: u64,
    pub jobs: usize,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub wall_time_seconds: f64,
}

impl Manifest {
    pub fn load(dir: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE)).tag(module::CLI_REPORT)?;
        serde_json::from_str(&text).tag(module::CLI_REPORT)
    }

    pub fn output(&self, path: &str) -> Option<&FileDigest> {
        self.outputs.iter().find(|d| d.path == path)
    }
}

pub fn digest_file(path: &Path) -> CliResult<(String, u64)> {
    let bytes = fs::read(path).map_err(|e| CliError::runtime(module::CLI_REPORT, format!("{}: {e}", path.display())))?;
    Ok((hex::encode(Sha256::digest(&bytes)), bytes.len() as u64))
}

/// Per-run state shared by the command implementations.
pub struct RunContext {
    pub base_dir: PathBuf,
    pub exec: Execution,
    staging: PathBuf,
    inputs: Vec<FileDigest>,
    outputs: Vec<String>,
}

impl RunContext {
    pub(crate) fn new(base_dir: PathBuf, output_dir: &Path, exec: Execution) -> CliResult<Self> {
        let name = output_dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
        let parent = output_dir.parent().map(Path::to_path_buf).unwrap_or_default();
        let staging = parent.join(format!(".{name}.partial-{}", std::process::id()));
        if staging.exists() {
            fs::remove_dir_all(&staging).tag(module::CLI_REPORT)?;
        }
        fs::create_dir_all(&staging).map_err(|e| io_err(&staging, e))?;
        Ok(Self { base_dir, exec, staging, inputs: Vec::new(), outputs: Vec::new() })
    }

    /// Resolves a config path and records its digest as an input.
    pub fn input(&mut self, configured: &Path) -> CliResult<PathBuf> {
        let full = self.base_dir.join(configured);
        let (sha256, bytes) = digest_file(&full)?;
        self.inputs.push(FileDigest { path: configured.display().to_string(), sha256, bytes });
        Ok(full)
    }

    /// Resolves a config path to a directory without recording it.
    pub fn resolve(&self, configured: &Path) -> PathBuf {
        self.base_dir.join(configured)
    }

    /// Records a file inside an input directory.
    pub fn input_in(&mut self, dir: &Path, file: &str) -> CliResult<PathBuf> {
        self.input(&dir.join(file))
    }

    /// Staging path for an output, relative to the output directory.
    pub fn output(&mut self, rel: &str) -> CliResult<PathBuf> {
        let p = self.staging.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
        if !self.outputs.iter().any(|o| o == rel) {
            self.outputs.push(rel.to_string());
        }
        Ok(p)
    }

    pub fn write_text(&mut self, rel: &str, text: &str) -> CliResult<()> {
        let p = self.output(rel)?;
        fs::write(&p, text).map_err(|e| io_err(&p, e))
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(value).tag(module::CLI_REPORT)?;
        text.push('\n');
        self.write_text(rel, &text)
    }

    /// Moves staged outputs into `output_dir` and writes the manifest last.
    pub(crate) fn commit(mut self, output_dir: &Path, mut manifest: Manifest) -> CliResult<Manifest> {
        fs::create_dir_all(output_dir).map_err(|e| io_err(output_dir, e))?;
        // Outputs of an earlier run that this run does not rewrite would be orphans.
        if let Ok(old) = Manifest::load(output_dir) {
            for o in &old.outputs {
                let _ = fs::remove_file(output_dir.join(&o.path));
            }
        }
        self.outputs.sort();
        let mut digests = Vec::with_capacity(self.outputs.len());
        for rel in &self.outputs {
            let from = self.staging.join(rel);
            let (sha256, bytes) = digest_file(&from)?;
            let to = output_dir.join(rel);
            if let Some(parent) = to.parent() {
                fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
            }
            fs::rename(&from, &to).map_err(|e| io_err(&to, e))?;
            digests.push(FileDigest { path: rel.clone(), sha256, bytes });
        }
        manifest.inputs = std::mem::take(&mut self.inputs);
        manifest.outputs = digests;
        let mut text = serde_json::to_string_pretty(&manifest).tag(module::CLI_REPORT)?;
        text.push('\n');
        let path = output_dir.join(MANIFEST_FILE);
        fs::write(&path, text).map_err(|e| io_err(&path, e))?;
        Ok(manifest)
    }
}

impl Drop for RunContext {
    fn drop(&mut self) {
        let _ = fs::remove_dir_all(&self.staging);
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::runtime(module::CLI_REPORT, format!("{}: {e}", path.display()))
}
