//! Versioned binary checkpoint container.
//!
//! Layout (little endian): magic `JEPADNA\0`, `u32` version, `u64` length of
//! a UTF-8 metadata string followed by the string, `u64` tensor count, then
//! per tensor a `u32` name length, the name, `u64` rows, `u64` cols and the
//! `f32` values in row-major order. The metadata string is kept verbatim so
//! a read followed by a write reproduces the file byte for byte.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::Matrix;

const MAGIC: &[u8; 8] = b"JEPADNA\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Free-form metadata, JSON by convention.
    pub meta: String,
    pub tensors: Vec<(String, Matrix<f32>)>,
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R, len: u64) -> Result<String, CheckpointError> {
    let mut buf = Vec::new();
    r.take(len).read_to_end(&mut buf)?;
    if buf.len() as u64 != len {
        return Err(CheckpointError::Malformed("truncated string".into()));
    }
    String::from_utf8(buf).map_err(|_| CheckpointError::Malformed("string is not UTF-8".into()))
}

impl Checkpoint {
    pub fn write<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.meta.len() as u64).to_le_bytes())?;
        w.write_all(self.meta.as_bytes())?;
        w.write_all(&(self.tensors.len() as u64).to_le_bytes())?;
        for (name, m) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(m.rows() as u64).to_le_bytes())?;
            w.write_all(&(m.cols() as u64).to_le_bytes())?;
            let mut bytes = Vec::with_capacity(m.len() * 4);
            for v in m.as_slice() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&bytes)?;
        }
        w.flush()
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| CheckpointError::BadMagic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let meta_len = read_u64(&mut r)?;
        let meta = read_string(&mut r, meta_len)?;
        let n = read_u64(&mut r)?;
        let mut tensors = Vec::new();
        for _ in 0..n {
            let name_len = read_u32(&mut r)?;
            let name = read_string(&mut r, u64::from(name_len))?;
            let rows = read_u64(&mut r)? as usize;
            let cols = read_u64(&mut r)? as usize;
            let count = rows
                .checked_mul(cols)
                .ok_or_else(|| CheckpointError::Malformed(format!("tensor {name} too large")))?;
            let mut bytes = Vec::new();
            (&mut r).take(count as u64 * 4).read_to_end(&mut bytes)?;
            if bytes.len() != count * 4 {
                return Err(CheckpointError::Malformed(format!("tensor {name} truncated")));
            }
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Matrix::from_vec(rows, cols, data)));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(CheckpointError::Malformed("trailing bytes".into()));
        }
        Ok(Checkpoint { meta, tensors })
    }

    /// Write to `path` through a temporary sibling and a rename, so a crash
    /// never leaves a half-written checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("tmp");
        {
            let f = fs::File::create(&tmp)?;
            self.write(io::BufWriter::new(f))?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let f = fs::File::open(path)?;
        Self::read(io::BufReader::new(f))
    }
}
