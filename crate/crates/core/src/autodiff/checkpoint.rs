//! Parameter checkpoint format.
//!
//! Layout (all integers little-endian):
//!   magic "ECCPARAM" | version u8 | records until EOF
//! where each record is
//!   name_len u16 | name bytes (UTF-8) | rank u8 | shape u32 × rank |
//!   values f64 × prod(shape)
//!
//! Records are written in name order and values bit-exactly, so saving and
//! reloading reproduces tensors to the bit. Optimizer moments are not
//! persisted: resuming from a checkpoint restarts Adam state.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::params::ParamSet;
use super::tensor::Tensor;

const MAGIC: &[u8; 8] = b"ECCPARAM";
const VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u8),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn save_params(path: &Path, params: &ParamSet) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    for (name, tensor) in params.iter() {
        let bytes = name.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(CheckpointError::Corrupt(format!("name too long: {name:?}")));
        }
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        let shape = tensor.shape();
        if shape.len() > u8::MAX as usize {
            return Err(CheckpointError::Corrupt(format!("rank too large for {name:?}")));
        }
        w.write_all(&[shape.len() as u8])?;
        for &dim in shape {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        for &x in tensor.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<ParamSet, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut version = [0u8];
    r.read_exact(&mut version)?;
    if version[0] != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version[0]));
    }
    let mut params = ParamSet::new();
    loop {
        // Records run to EOF; a clean EOF at a record boundary ends the file.
        let mut len_bytes = [0u8; 2];
        match r.read_exact(&mut len_bytes) {
            Ok(()) => {}
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u16::from_le_bytes(len_bytes) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| CheckpointError::Corrupt(format!("name not UTF-8: {e}")))?;
        let mut rank = [0u8];
        r.read_exact(&mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        let mut dim_bytes = [0u8; 4];
        for _ in 0..rank[0] {
            r.read_exact(&mut dim_bytes)?;
            shape.push(u32::from_le_bytes(dim_bytes) as usize);
        }
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        let mut val_bytes = [0u8; 8];
        for _ in 0..count {
            r.read_exact(&mut val_bytes)?;
            data.push(f64::from_le_bytes(val_bytes));
        }
        let tensor = Tensor::new(shape, data)
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        params
            .insert(&name, tensor)
            .map_err(|_| CheckpointError::Corrupt(format!("duplicate record {name:?}")))?;
    }
    Ok(params)
}
