//! Binary parameter checkpoints.
//!
//! Layout: 8-byte magic `"BEVDCKPT"`, u32 format version, u32 tensor count,
//! then per tensor: u32 name length + UTF-8 name, u32 rank, u64 extents,
//! little-endian f64 payload. Round trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use indexmap::IndexMap;

use super::ParamSet;

const MAGIC: &[u8; 8] = b"BEVDCKPT";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("checkpoint is corrupt: {0}")]
    Corrupt(String),
}

pub fn save_params(params: &ParamSet, path: &Path) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(params.entries.len() as u32)?;
    for (name, (shape, data)) in &params.entries {
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        w.write_u32::<LittleEndian>(shape.len() as u32)?;
        for &e in shape {
            w.write_u64::<LittleEndian>(e as u64)?;
        }
        for &v in data {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<ParamSet, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| CheckpointError::BadMagic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let count = r.read_u32::<LittleEndian>()?;
    let mut entries = IndexMap::new();
    for i in 0..count {
        let name_len = r.read_u32::<LittleEndian>()? as usize;
        if name_len > 1 << 16 {
            return Err(CheckpointError::Corrupt(format!(
                "tensor {i}: implausible name length {name_len}"
            )));
        }
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)
            .map_err(|_| CheckpointError::Corrupt(format!("tensor {i}: truncated name")))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| CheckpointError::Corrupt(format!("tensor {i}: name is not UTF-8")))?;
        let rank = r.read_u32::<LittleEndian>()? as usize;
        if rank > 8 {
            return Err(CheckpointError::Corrupt(format!(
                "tensor '{name}': implausible rank {rank}"
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut len = 1usize;
        for _ in 0..rank {
            let e = r.read_u64::<LittleEndian>()? as usize;
            len = len
                .checked_mul(e)
                .filter(|&l| l <= 1 << 28)
                .ok_or_else(|| {
                    CheckpointError::Corrupt(format!("tensor '{name}': implausible extents"))
                })?;
            shape.push(e);
        }
        let mut data = vec![0.0f64; len];
        r.read_f64_into::<LittleEndian>(&mut data)
            .map_err(|_| CheckpointError::Corrupt(format!("tensor '{name}': truncated payload")))?;
        entries.insert(name, (shape, data));
    }
    Ok(ParamSet { entries })
}
