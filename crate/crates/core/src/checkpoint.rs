//! Checkpoint directories: `params.bin` holds one feature-format section per
//! tensor, back to back; `manifest.json` names them and echoes the config.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Seek, SeekFrom, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tensor};
use crate::data::{read_matrix, write_matrix, HEADER_LEN};
use crate::error::{Error, Result};
use crate::model::ModelConfig;

pub const PARAMS_FILE: &str = "params.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Byte offset of the section header in `params.bin`.
    pub offset: u64,
}

/// Enough to rebuild a ChaCha8 stream at the exact position it was saved.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Word position as a decimal string (it is a `u128`).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Format(format!("bad rng word position `{}`", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    pub rng: Option<RngState>,
    /// Epoch the parameters were taken after, if from training.
    pub epoch: Option<usize>,
    /// Validation Recall@20 at that epoch.
    pub valid_recall20: Option<f64>,
}

/// A loaded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub params: ParamStore<f32>,
}

/// Writes `params` and the manifest into `dir` (created if missing).
pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    config: &ModelConfig,
    params: &ParamStore<f32>,
    rng: Option<&ChaCha8Rng>,
    epoch: Option<usize>,
    valid_recall20: Option<f64>,
) -> Result<CheckpointManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut out = BufWriter::new(File::create(dir.join(PARAMS_FILE))?);
    let mut offset = 0u64;
    let mut tensors = Vec::with_capacity(params.len());
    for (_, name, t) in params.iter() {
        write_matrix(&mut out, t)?;
        tensors.push(TensorEntry {
            name: name.to_string(),
            rows: t.rows(),
            cols: t.cols(),
            offset,
        });
        offset += (HEADER_LEN + 4 * t.len()) as u64;
    }
    out.flush()?;
    let manifest = CheckpointManifest {
        config: config.clone(),
        tensors,
        rng: rng.map(RngState::capture),
        epoch,
        valid_recall20,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let manifest: CheckpointManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    let file = File::open(dir.join(PARAMS_FILE))?;
    let total = file.metadata()?.len();
    let mut input = BufReader::new(file);
    let mut params = ParamStore::new();
    let mut expected_offset = 0u64;
    for entry in &manifest.tensors {
        if entry.offset != expected_offset {
            return Err(Error::Format(format!(
                "tensor `{}` at offset {} is not contiguous",
                entry.name, entry.offset
            )));
        }
        input.seek(SeekFrom::Start(entry.offset))?;
        let t: Tensor<f32> = read_matrix(&mut input)?;
        if t.shape() != [entry.rows, entry.cols] {
            return Err(Error::Format(format!(
                "tensor `{}` stored as {:?}, manifest says {}x{}",
                entry.name,
                t.shape(),
                entry.rows,
                entry.cols
            )));
        }
        expected_offset += (HEADER_LEN + 4 * t.len()) as u64;
        params.add(entry.name.clone(), t);
    }
    if expected_offset != total {
        return Err(Error::Format(format!(
            "{PARAMS_FILE} size differs from the manifest by {} bytes",
            total.abs_diff(expected_offset)
        )));
    }
    Ok(Checkpoint { manifest, params })
}
