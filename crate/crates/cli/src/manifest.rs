//! Run manifests: enough to re-derive any output directory byte-for-byte
//! given the same build.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use chronorisk_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub build: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub input_digests: BTreeMap<String, String>,
    pub artifacts: Vec<String>,
    pub timings_ms: BTreeMap<String, u128>,
}

/// Builder that accumulates inputs/outputs/timings over a command run and
/// writes the manifest last.
pub struct RunRecorder {
    run_dir: PathBuf,
    manifest: RunManifest,
    started: Instant,
}

impl RunRecorder {
    /// Prepare a run directory. Refuses to reuse a directory that already
    /// holds a manifest unless `force` is set.
    pub fn create(run_dir: &Path, command: &str, force: bool) -> Result<Self> {
        let manifest_path = run_dir.join(MANIFEST_NAME);
        if manifest_path.exists() && !force {
            return Err(Error::Config(format!(
                "run directory {} already contains {MANIFEST_NAME}; pass --force to overwrite",
                run_dir.display()
            )));
        }
        std::fs::create_dir_all(run_dir)?;
        Ok(RunRecorder {
            run_dir: run_dir.to_path_buf(),
            manifest: RunManifest {
                command: command.to_string(),
                argv: std::env::args().collect(),
                build: format!("chronorisk {}", env!("CARGO_PKG_VERSION")),
                config: serde_json::Value::Null,
                seed: None,
                input_digests: BTreeMap::new(),
                artifacts: Vec::new(),
                timings_ms: BTreeMap::new(),
            },
            started: Instant::now(),
        })
    }

    pub fn run_dir(&self) -> &Path {
        &self.run_dir
    }

    pub fn set_config<T: Serialize>(&mut self, config: &T) -> Result<()> {
        self.manifest.config = serde_json::to_value(config)?;
        Ok(())
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.manifest.seed = Some(seed);
    }

    pub fn record_input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| {
            Error::Config(format!("missing input {}: {e}", path.display()))
        })?;
        self.manifest.input_digests.insert(
            path.display().to_string(),
            hex::encode(Sha256::digest(&bytes)),
        );
        Ok(())
    }

    pub fn record_artifact(&mut self, path: &Path) {
        self.manifest.artifacts.push(path.display().to_string());
    }

    pub fn record_timing(&mut self, stage: &str) {
        self.manifest
            .timings_ms
            .insert(stage.to_string(), self.started.elapsed().as_millis());
    }

    /// Write the manifest; call once, after all artifacts are on disk.
    pub fn finish(mut self) -> Result<()> {
        self.record_timing("total");
        let json = serde_json::to_string_pretty(&self.manifest)?;
        let path = self.run_dir.join(MANIFEST_NAME);
        std::fs::File::create(&path)?.write_all(json.as_bytes())?;
        Ok(())
    }
}

/// Write text to `run_dir/name` and record it as an artifact.
pub fn write_artifact(recorder: &mut RunRecorder, name: &str, content: &str) -> Result<PathBuf> {
    let path = recorder.run_dir().join(name);
    std::fs::File::create(&path)?.write_all(content.as_bytes())?;
    recorder.record_artifact(&path);
    Ok(path)
}
