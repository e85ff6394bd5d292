//! Checkpoint files: magic, version, config as JSON, parameters as f32 LE in
//! flatten order.

use super::{param_count, ModelConfig, ModelParams};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"DTCK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("bad config block: {0}")]
    Config(String),
    #[error("parameter section has {got} values, config needs {want}")]
    Truncated { got: usize, want: usize },
}

pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let cfg = serde_json::to_vec(&params.config)
        .map_err(|e| CheckpointError::Config(e.to_string()))?;
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(&cfg)?;
    for v in params.flatten() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let version = u32::from_le_bytes(buf4);
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    r.read_exact(&mut buf4)?;
    let cfg_len = u32::from_le_bytes(buf4) as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_bytes)?;
    let config: ModelConfig = serde_json::from_slice(&cfg_bytes)
        .map_err(|e| CheckpointError::Config(e.to_string()))?;
    config
        .validate()
        .map_err(|e| CheckpointError::Config(e.to_string()))?;
    let want = param_count(&config);
    let mut raw = Vec::new();
    r.read_to_end(&mut raw)?;
    if raw.len() != want * 4 {
        return Err(CheckpointError::Truncated { got: raw.len() / 4, want });
    }
    let flat: Vec<f64> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let mut params =
        ModelParams::zeros(config).map_err(|e| CheckpointError::Config(e.to_string()))?;
    params
        .unflatten(&flat)
        .map_err(|e| CheckpointError::Config(e.to_string()))?;
    Ok(params)
}
