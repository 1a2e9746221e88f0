//! Checkpoint layout: one line of JSON header, then every parameter as
//! little-endian `f64` values in header order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Architecture, Denoiser};
use crate::diffusion::SequenceSpec;
use crate::error::{Error, Result};
use crate::grad::Array;

const FORMAT: &str = "drakes-checkpoint-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub spec: SequenceSpec,
    pub architecture: Architecture,
    pub shapes: Vec<Vec<usize>>,
    /// Horizon and step count of the schedule the model was trained with.
    pub horizon: f64,
    pub steps: usize,
    /// SHA-256 of the architecture and sequence spec.
    pub config_hash: String,
    /// Free-form metadata (training config, seeds).
    #[serde(default)]
    pub meta: serde_json::Value,
}

fn config_hash(spec: &SequenceSpec, arch: &Architecture) -> Result<String> {
    let text = serde_json::to_string(&(spec, arch))?;
    Ok(Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

pub fn save_checkpoint(
    model: &Denoiser,
    horizon: f64,
    steps: usize,
    meta: serde_json::Value,
    path: impl AsRef<Path>,
) -> Result<()> {
    let header = CheckpointHeader {
        format: FORMAT.into(),
        spec: model.spec,
        architecture: model.arch,
        shapes: model.params.iter().map(|p| p.shape().to_vec()).collect(),
        horizon,
        steps,
        config_hash: config_hash(&model.spec, &model.arch)?,
        meta,
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for p in &model.params {
        for v in p.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Denoiser, CheckpointHeader)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: CheckpointHeader = serde_json::from_str(line.trim_end())?;
    if header.format != FORMAT {
        return Err(Error::Checkpoint(format!("unknown format {:?}", header.format)));
    }
    if header.config_hash != config_hash(&header.spec, &header.architecture)? {
        return Err(Error::Checkpoint("config hash does not match header".into()));
    }
    let template = Denoiser::new(header.spec, header.architecture, 0)?;
    let expected: Vec<Vec<usize>> = template.params.iter().map(|p| p.shape().to_vec()).collect();
    if expected != header.shapes {
        return Err(Error::Checkpoint(
            "parameter shapes do not match the architecture".into(),
        ));
    }
    let mut params = Vec::with_capacity(header.shapes.len());
    let mut buf = [0u8; 8];
    for shape in &header.shapes {
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            r.read_exact(&mut buf)
                .map_err(|_| Error::Checkpoint("truncated parameter data".into()))?;
            data.push(f64::from_le_bytes(buf));
        }
        params.push(Array::new(shape.clone(), data)?);
    }
    if r.read(&mut buf)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after parameter data".into()));
    }
    let mut model = template;
    model.params = params;
    Ok((model, header))
}
