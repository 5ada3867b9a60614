//! Binary feature-matrix format.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "IDSF"
//! 4       4     format version, u32 LE (= 1)
//! 8       4     rows, u32 LE
//! 12      4     dim, u32 LE
//! 16      4·r·d row-major f32 LE payload
//! ```
//!
//! A UTF-8 sidecar lists one raw item id per line; line `k` names row `k`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::split::IdMap;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"IDSF";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;

/// Which salient modality a feature table carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Visual,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Text, Modality::Visual];

    pub fn tag(self) -> char {
        match self {
            Modality::Text => 't',
            Modality::Visual => 'v',
        }
    }
}

/// Frozen raw feature matrix for one modality, rows aligned to dense item
/// indices.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalFeatureTable {
    pub modality: Modality,
    pub matrix: Tensor<f32>,
}

impl ModalFeatureTable {
    pub fn raw_dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn item_count(&self) -> usize {
        self.matrix.rows()
    }
}

/// Serializes one matrix section.
pub fn write_matrix(mut w: impl Write, m: &Tensor<f32>) -> Result<()> {
    let rows = u32::try_from(m.rows()).map_err(|_| Error::Format("too many rows".into()))?;
    let dim = u32::try_from(m.cols()).map_err(|_| Error::Format("dimension too large".into()))?;
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&rows.to_le_bytes())?;
    w.write_all(&dim.to_le_bytes())?;
    let mut payload = Vec::with_capacity(m.len() * 4);
    for v in m.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&payload)?;
    Ok(())
}

/// Reads one matrix section from `r`, consuming exactly its bytes.
pub fn read_matrix(mut r: impl Read) -> Result<Tensor<f32>> {
    let mut header = [0u8; HEADER_LEN];
    read_exact_or_format(&mut r, &mut header, "header")?;
    if &header[0..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &header[0..4])));
    }
    let word = |k: usize| u32::from_le_bytes(header[k..k + 4].try_into().unwrap());
    let version = word(4);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let (rows, dim) = (word(8) as usize, word(12) as usize);
    let mut payload = vec![0u8; rows * dim * 4];
    read_exact_or_format(&mut r, &mut payload, "payload")?;
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("non-finite value in payload".into()));
    }
    Tensor::new(rows, dim, data)
}

fn read_exact_or_format(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("{what} truncated")),
        _ => Error::Io(e),
    })
}

pub fn write_matrix_file(path: impl AsRef<Path>, m: &Tensor<f32>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_matrix(&mut w, m)?;
    w.flush()?;
    Ok(())
}

/// Reads a standalone matrix file; trailing bytes are a format error.
pub fn read_matrix_file(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let mut r = BufReader::new(File::open(path)?);
    let m = read_matrix(&mut r)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("payload longer than rows x dim".into()));
    }
    Ok(m)
}

pub fn write_sidecar(path: impl AsRef<Path>, ids: &[impl AsRef<str>]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for id in ids {
        writeln!(w, "{}", id.as_ref())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sidecar(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let r = BufReader::new(File::open(path)?);
    let mut ids = Vec::new();
    for line in r.lines() {
        let line = line?;
        let id = line.trim_end_matches('\r');
        if !id.is_empty() {
            ids.push(id.to_string());
        }
    }
    Ok(ids)
}

/// Default sidecar location: the matrix path with `.ids` appended.
pub fn sidecar_path(matrix: &Path) -> PathBuf {
    let mut s = matrix.as_os_str().to_owned();
    s.push(".ids");
    PathBuf::from(s)
}

/// Loads a feature file and reorders it to the dense item index.
///
/// Sidecar ids absent from `items` are a mapping error; catalogue items the
/// file does not cover get zero rows.
pub fn load_features(
    matrix_path: impl AsRef<Path>,
    sidecar: impl AsRef<Path>,
    modality: Modality,
    items: &IdMap,
) -> Result<ModalFeatureTable> {
    let matrix_path = matrix_path.as_ref();
    let raw = read_matrix_file(matrix_path)?;
    let ids = read_sidecar(sidecar.as_ref())?;
    align_features(raw, &ids, modality, items, sidecar.as_ref())
}

pub fn align_features(
    raw: Tensor<f32>,
    ids: &[String],
    modality: Modality,
    items: &IdMap,
    source: &Path,
) -> Result<ModalFeatureTable> {
    if ids.len() != raw.rows() {
        return Err(Error::Format(format!(
            "sidecar lists {} ids but matrix has {} rows",
            ids.len(),
            raw.rows()
        )));
    }
    let dim = raw.cols();
    let mut matrix = Tensor::zeros(items.len(), dim);
    let mut covered = vec![false; items.len()];
    for (row, id) in ids.iter().enumerate() {
        let dense = items.get(id).ok_or_else(|| Error::Mapping {
            id: id.clone(),
            path: source.to_path_buf(),
        })?;
        matrix.row_mut(dense).copy_from_slice(raw.row(row));
        covered[dense] = true;
    }
    let missing = covered.iter().filter(|&&c| !c).count();
    if missing > 0 {
        log::warn!(
            "{missing} of {} items have no {:?} features; using zero rows",
            items.len(),
            modality
        );
    }
    Ok(ModalFeatureTable { modality, matrix })
}
