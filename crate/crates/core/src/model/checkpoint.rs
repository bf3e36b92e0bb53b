//! Checkpoint container.
//!
//! ```text
//! 8 bytes   magic "CLVAECKP"
//! u32 LE    format version
//! u64 LE    header length in bytes
//! header    JSON: config, seed, parameter entries, free-form metadata
//! f64 LE    trainable values, then running statistics
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamEntry;
use super::{Clvae, ModelConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CLVAECKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    seed: u64,
    entries: Vec<ParamEntry>,
    trainable: usize,
    state: usize,
    metadata: serde_json::Value,
}

pub fn save_checkpoint(model: &Clvae, path: &Path, metadata: serde_json::Value) -> Result<()> {
    let io = |e| Error::io(path, e);
    let store = model.params();
    let header = Header {
        config: model.config().clone(),
        seed: model.seed(),
        entries: store.entries.clone(),
        trainable: store.values.len(),
        state: store.state.len(),
        metadata,
    };
    let json = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    for v in store.values.iter().chain(&store.state) {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Loads a checkpoint. When `expected` is given, a different stored
/// configuration is rejected.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<(Clvae, serde_json::Value)> {
    let bad = |reason: String| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    let io = |e| Error::io(path, e);
    let mut r = BufReader::new(File::open(path).map_err(io)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("file too short".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(io)?;
    let version = u32::from_le_bytes(b4);
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8).map_err(io)?;
    let len = u64::from_le_bytes(b8) as usize;
    if len > 64 << 20 {
        return Err(bad(format!("implausible header length {len}")));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|_| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| bad(format!("header: {e}")))?;
    if let Some(cfg) = expected {
        if *cfg != header.config {
            return Err(bad(format!(
                "configuration mismatch: file has {:?}, expected {:?}",
                header.config, cfg
            )));
        }
    }
    let mut model = Clvae::new(header.config, header.seed)?;
    let store = model.params_mut();
    if store.entries != header.entries
        || store.values.len() != header.trainable
        || store.state.len() != header.state
    {
        return Err(bad("parameter layout does not match the configuration".into()));
    }
    for v in store.values.iter_mut().chain(store.state.iter_mut()) {
        r.read_exact(&mut b8).map_err(|_| bad("truncated parameter data".into()))?;
        *v = f64::from_le_bytes(b8);
    }
    if r.read(&mut b8).map_err(io)? != 0 {
        return Err(bad("trailing data after parameters".into()));
    }
    Ok((model, header.metadata))
}
