//! Run directory bookkeeping.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use idsf::Result;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const CONFIG_SNAPSHOT: &str = "config.json";
pub const RUN_MANIFEST: &str = "run.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: PathBuf,
    pub bytes: u64,
    pub sha256: String,
}

/// What was run, on which inputs, with which configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// First 12 hex digits of a hash over command, config and input digests.
    pub run_id: String,
    pub command: String,
    pub config_snapshot: PathBuf,
    pub config: RunConfig,
    pub inputs: Vec<InputFile>,
    pub split_manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub engine_version: String,
    pub parallel: bool,
}

pub fn sha256_file(path: &Path) -> Result<(u64, String)> {
    let mut f = fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    let mut total = 0u64;
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        total += n as u64;
        hasher.update(&buf[..n]);
    }
    Ok((total, hex::encode(hasher.finalize())))
}

/// An output directory with its config snapshot already written.
pub struct RunDir {
    pub path: PathBuf,
    command: String,
    config: RunConfig,
    inputs: Vec<InputFile>,
    split_manifest: Option<PathBuf>,
}

impl RunDir {
    pub fn create(path: &Path, command: &str, config: &RunConfig, files: &[PathBuf]) -> Result<Self> {
        fs::create_dir_all(path)?;
        fs::write(path.join(CONFIG_SNAPSHOT), config.snapshot()?)?;
        let inputs = files
            .iter()
            .map(|p| {
                let (bytes, sha256) = sha256_file(p)?;
                Ok(InputFile {
                    path: p.clone(),
                    bytes,
                    sha256,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RunDir {
            path: path.to_path_buf(),
            command: command.to_string(),
            config: config.clone(),
            inputs,
            split_manifest: config.data.split_manifest.as_ref().map(|p| config.data.resolve(p)),
        })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn run_id(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.command.as_bytes());
        h.update([0]);
        h.update(self.config.snapshot()?.as_bytes());
        for f in &self.inputs {
            h.update(f.sha256.as_bytes());
        }
        Ok(hex::encode(h.finalize())[..12].to_string())
    }

    /// Writes `run.json`; call last so it only exists for finished runs.
    pub fn finish(&self) -> Result<RunManifest> {
        let manifest = RunManifest {
            run_id: self.run_id()?,
            command: self.command.clone(),
            config_snapshot: PathBuf::from(CONFIG_SNAPSHOT),
            config: self.config.clone(),
            inputs: self.inputs.clone(),
            split_manifest: self.split_manifest.clone(),
            out_dir: self.path.clone(),
            engine_version: env!("CARGO_PKG_VERSION").to_string(),
            parallel: idsf::par::is_parallel(),
        };
        fs::write(self.file(RUN_MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(manifest)
    }
}
