//! Binary checkpoint format.
//!
//! Layout: `b"BDCK"`, a little-endian `u32` version, a `u64` header length,
//! the JSON header, then every array as little-endian `f32` in header order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::{check_parameters, Parameters, Tensor};
use crate::error::{Error, Result};
use crate::schedule::ScheduleSpec;
use crate::vocab::vocab_hash;

const MAGIC: &[u8; 4] = b"BDCK";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    schedule: ScheduleSpec,
    src_vocab_hash: u64,
    tgt_vocab_hash: u64,
    arrays: Vec<ArrayEntry>,
}

pub(crate) fn write_checkpoint(
    path: &Path,
    config: &ModelConfig,
    schedule: &ScheduleSpec,
    params: &Parameters,
) -> Result<()> {
    let header = Header {
        config: config.clone(),
        schedule: *schedule,
        src_vocab_hash: vocab_hash(config.vocab_src),
        tgt_vocab_hash: vocab_hash(config.vocab_tgt),
        arrays: params.tensors.iter().map(|t| ArrayEntry { name: t.name.clone(), shape: t.shape.clone() }).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for t in &params.tensors {
        for v in &t.data {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub(crate) fn read_checkpoint(path: &Path) -> Result<(ModelConfig, ScheduleSpec, Parameters)> {
    let bytes = std::fs::read(path)?;
    let mut r = bytes.as_slice();
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::Checkpoint("file too short".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(|_| Error::Checkpoint("truncated version".into()))?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut long = [0u8; 8];
    r.read_exact(&mut long).map_err(|_| Error::Checkpoint("truncated header length".into()))?;
    let header_len = u64::from_le_bytes(long) as usize;
    if header_len > r.len() {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&r[..header_len])?;
    r = &r[header_len..];
    header.config.validate()?;
    header.schedule.validate()?;
    if header.src_vocab_hash != vocab_hash(header.config.vocab_src)
        || header.tgt_vocab_hash != vocab_hash(header.config.vocab_tgt)
    {
        return Err(Error::Checkpoint("vocabulary hash mismatch".into()));
    }
    let mut tensors = Vec::with_capacity(header.arrays.len());
    for entry in header.arrays {
        let len: usize = entry.shape.iter().product();
        if r.len() < len * 4 {
            return Err(Error::Checkpoint(format!("array '{}' is truncated", entry.name)));
        }
        let (raw, rest) = r.split_at(len * 4);
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        tensors.push(Tensor { name: entry.name, shape: entry.shape, data });
        r = rest;
    }
    if !r.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
    }
    let params = Parameters { tensors };
    check_parameters(&params, &header.config, &header.schedule)?;
    Ok((header.config, header.schedule, params))
}
