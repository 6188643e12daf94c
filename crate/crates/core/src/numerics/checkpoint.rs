//! Named-tensor checkpoint files.
//!
//! Format (JSON, version 1):
//!
//! ```json
//! {"format": "hatrec-checkpoint", "version": 1,
//!  "tensors": [{"name": "token_embedding", "shape": [V, D], "data": [...]}, ...]}
//! ```
//!
//! Floats are written in shortest round-trip form, so load(save(x)) == x
//! bit for bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Tensor;

pub const FORMAT_NAME: &str = "hatrec-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported checkpoint {0} version {1}")]
    Version(String, u32),
    #[error("bad tensor {0}: {1}")]
    BadTensor(String, String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    tensors: Vec<NamedTensor>,
}

pub fn save<'a>(
    path: &Path,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<(), CheckpointError> {
    let file = CheckpointFile {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        tensors: tensors
            .into_iter()
            .map(|(name, t)| NamedTensor {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect(),
    };
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut out, &file)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let file: CheckpointFile = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    if file.format != FORMAT_NAME || file.version != FORMAT_VERSION {
        return Err(CheckpointError::Version(file.format, file.version));
    }
    file.tensors
        .into_iter()
        .map(|nt| {
            let t = Tensor::new(nt.shape, nt.data)
                .map_err(|e| CheckpointError::BadTensor(nt.name.clone(), e.to_string()))?;
            Ok((nt.name, t))
        })
        .collect()
}
