//! `"PDCK"` checkpoint files: named parameter blobs with optimizer state,
//! plain buffers (batch-norm running statistics), the RNG seed, and the fold
//! id. All integers and floats are little-endian.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use super::Param;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PDCK";
pub const CHECKPOINT_VERSION: u16 = 1;

const KIND_BUFFER: u8 = 0;
const KIND_PARAM: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: not a PDCK checkpoint")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated checkpoint: needed {expected} bytes at offset {offset}")]
    Truncated { offset: usize, expected: usize },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Non-trainable named state (running statistics).
#[derive(Debug, Clone, PartialEq)]
pub struct NamedBuffer {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub fold_id: u32,
    pub rng_seed: u64,
    pub params: Vec<Param>,
    pub buffers: Vec<NamedBuffer>,
}

impl Checkpoint {
    pub fn find_param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn find_buffer(&self, name: &str) -> Option<&NamedBuffer> {
        self.buffers.iter().find(|b| b.name == name)
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&ckpt.fold_id.to_le_bytes());
    bytes.extend_from_slice(&ckpt.rng_seed.to_le_bytes());
    let n_entries = (ckpt.params.len() + ckpt.buffers.len()) as u32;
    bytes.extend_from_slice(&n_entries.to_le_bytes());

    let write_header = |bytes: &mut Vec<u8>, kind: u8, name: &str, shape: &[usize]| {
        bytes.push(kind);
        let name_bytes = name.as_bytes();
        bytes.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        bytes.extend_from_slice(name_bytes);
        bytes.push(shape.len() as u8);
        for &d in shape {
            bytes.extend_from_slice(&(d as u32).to_le_bytes());
        }
    };
    let write_f64s = |bytes: &mut Vec<u8>, values: &[f64]| {
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    };

    for p in &ckpt.params {
        write_header(&mut bytes, KIND_PARAM, &p.name, &p.shape);
        bytes.extend_from_slice(&p.step.to_le_bytes());
        write_f64s(&mut bytes, &p.data);
        write_f64s(&mut bytes, &p.m);
        write_f64s(&mut bytes, &p.v);
    }
    for b in &ckpt.buffers {
        write_header(&mut bytes, KIND_BUFFER, &b.name, &b.shape);
        write_f64s(&mut bytes, &b.data);
    }
    fs::write(path, bytes)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.offset + n > self.bytes.len() {
            return Err(CheckpointError::Truncated { offset: self.offset, expected: n });
        }
        let slice = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor { bytes: &bytes, offset: 0 };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = cur.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let fold_id = cur.u32()?;
    let rng_seed = cur.u64()?;
    let n_entries = cur.u32()?;

    let mut params = Vec::new();
    let mut buffers = Vec::new();
    for _ in 0..n_entries {
        let kind = cur.u8()?;
        let name_len = cur.u16()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|e| CheckpointError::Malformed(format!("entry name: {e}")))?;
        let ndim = cur.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        match kind {
            KIND_PARAM => {
                let step = cur.u64()?;
                let data = cur.f64s(n)?;
                let m = cur.f64s(n)?;
                let v = cur.f64s(n)?;
                let mut p = Param::new(name, &shape, data);
                p.m = m;
                p.v = v;
                p.step = step;
                params.push(p);
            }
            KIND_BUFFER => {
                let data = cur.f64s(n)?;
                buffers.push(NamedBuffer { name, shape, data });
            }
            other => {
                return Err(CheckpointError::Malformed(format!("unknown entry kind {other}")))
            }
        }
    }
    if cur.offset != bytes.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes",
            bytes.len() - cur.offset
        )));
    }
    Ok(Checkpoint { fold_id, rng_seed, params, buffers })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_checkpoint() -> Checkpoint {
        let mut w = Param::new("td.block0.kernel", &[2, 1, 3, 3], (0..18).map(f64::from).collect());
        w.step = 41;
        w.m[3] = 0.25;
        w.v[7] = 1.5;
        Checkpoint {
            fold_id: 3,
            rng_seed: 0xDEAD_BEEF,
            params: vec![w, Param::zeros("td.head.bias", &[1])],
            buffers: vec![NamedBuffer {
                name: "td.block0.bn.mean".into(),
                shape: vec![2],
                data: vec![0.5, -0.5],
            }],
        }
    }

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fold_3.ckpt");
        let ckpt = sample_checkpoint();
        write_checkpoint(&path, &ckpt).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        write_checkpoint(&path, &sample_checkpoint()).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'?';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_checkpoint(&path), Err(CheckpointError::BadMagic)));

        let good = {
            bytes[0] = b'P';
            bytes.truncate(bytes.len() - 5);
            std::fs::write(&path, &bytes).unwrap();
            read_checkpoint(&path)
        };
        assert!(matches!(good, Err(CheckpointError::Truncated { .. })));
    }
}
