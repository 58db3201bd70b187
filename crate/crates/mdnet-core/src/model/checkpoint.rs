//! Binary checkpoint container. Layout, all integers little-endian:
//! magic "MDNC", u32 version, u32 tensor count, then per tensor:
//! u32 name length + UTF-8 name, u8 dtype tag (0 = f64), u32 rank,
//! u64 per dimension, raw little-endian f64 payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::autodiff::{BnState, Tensor};

use super::{MdNetParams, TeacherParams};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MDNC";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic bytes, not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("unsupported dtype tag {0}")]
    BadDtype(u8),
    #[error("tensor name is not valid UTF-8")]
    BadName,
    #[error("duplicate parameter {0:?}")]
    Duplicate(String),
    #[error("missing parameter {0:?}")]
    Missing(String),
    #[error("unknown parameter {0:?}")]
    Unknown(String),
    #[error("shape mismatch for {name:?}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("invalid checkpoint contents: {0}")]
    Invalid(String),
}

/// Ordered name -> tensor container with a bit-exact binary round trip.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn insert(&mut self, name: String, tensor: Tensor) -> Result<(), CheckpointError> {
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(CheckpointError::Duplicate(name));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Remove and return an entry; loading code consumes entries so that
    /// leftovers can be reported as unknown parameters.
    pub fn take(&mut self, name: &str) -> Result<Tensor, CheckpointError> {
        let idx = self
            .entries
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))?;
        Ok(self.entries.remove(idx).1)
    }

    /// Fails on the first remaining entry; call after consuming everything
    /// expected so typos never pass silently.
    pub fn expect_empty(&self) -> Result<(), CheckpointError> {
        match self.entries.first() {
            Some((name, _)) => Err(CheckpointError::Unknown(name.clone())),
            None => Ok(()),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, tensor) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
            for &d in tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in tensor.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take_bytes(4)? != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.take_u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let count = r.take_u32()? as usize;
        let mut cp = Checkpoint::new();
        for _ in 0..count {
            let name_len = r.take_u32()? as usize;
            let name = std::str::from_utf8(r.take_bytes(name_len)?)
                .map_err(|_| CheckpointError::BadName)?
                .to_string();
            let dtype = r.take_bytes(1)?[0];
            if dtype != DTYPE_F64 {
                return Err(CheckpointError::BadDtype(dtype));
            }
            let rank = r.take_u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.take_u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take_bytes(numel * 8)?;
            let values: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            let tensor =
                Tensor::new(shape, values).map_err(|e| CheckpointError::Invalid(e.to_string()))?;
            cp.insert(name, tensor)?;
        }
        Ok(cp)
    }

    /// Atomic save: write a sibling temp file, then rename over the target.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CheckpointError> {
    let io_err = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    {
        let mut f = fs::File::create(tmp).map_err(io_err)?;
        f.write_all(bytes).map_err(|source| CheckpointError::Io {
            path: tmp.display().to_string(),
            source,
        })?;
    }
    fs::rename(tmp, path).map_err(io_err)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take_bytes(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated);
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn take_u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take_bytes(4)?.try_into().expect("4 bytes")))
    }

    fn take_u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take_bytes(8)?.try_into().expect("8 bytes")))
    }
}

fn take_into(cp: &mut Checkpoint, name: &str, slot: &mut Tensor) -> Result<(), CheckpointError> {
    let loaded = cp.take(name)?;
    if loaded.shape() != slot.shape() {
        return Err(CheckpointError::ShapeMismatch {
            name: name.to_string(),
            expected: slot.shape().to_vec(),
            found: loaded.shape().to_vec(),
        });
    }
    *slot = loaded;
    Ok(())
}

fn take_state(cp: &mut Checkpoint, prefix: &str, bn: &mut BnState) -> Result<(), CheckpointError> {
    for (field, slot) in [
        ("running_mean", &mut bn.running_mean),
        ("running_var", &mut bn.running_var),
    ] {
        let name = format!("{prefix}.bn.{field}");
        let loaded = cp.take(&name)?;
        if loaded.shape() != [slot.len()] {
            return Err(CheckpointError::ShapeMismatch {
                name,
                expected: vec![slot.len()],
                found: loaded.shape().to_vec(),
            });
        }
        *slot = loaded.values().to_vec();
    }
    Ok(())
}

impl MdNetParams {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut cp = Checkpoint::new();
        for (name, t) in self.named_params() {
            cp.insert(name, t.clone()).expect("unique names");
        }
        for (name, t) in self.named_state() {
            cp.insert(name, t).expect("unique names");
        }
        cp
    }

    pub fn from_checkpoint(mut cp: Checkpoint) -> Result<Self, CheckpointError> {
        let mut params = MdNetParams::seeded(0);
        for (name, slot) in params.named_params_mut() {
            take_into(&mut cp, &name, slot)?;
        }
        {
            let mut states: Vec<(String, &mut BnState)> = Vec::new();
            for (i, b) in params.backbone.iter_mut().enumerate() {
                states.push((format!("backbone.{i}"), &mut b.bn));
            }
            states.push(("motion.block".into(), &mut params.motion_block.bn));
            states.push(("desc.block".into(), &mut params.desc_block.bn));
            for (prefix, bn) in states {
                take_state(&mut cp, &prefix, bn)?;
            }
        }
        cp.expect_empty()?;
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}

impl TeacherParams {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut cp = Checkpoint::new();
        for (name, t) in self.named_params() {
            cp.insert(name, t.clone()).expect("unique names");
        }
        cp
    }

    pub fn from_checkpoint(mut cp: Checkpoint) -> Result<Self, CheckpointError> {
        let mut params = TeacherParams::seeded(0);
        for (name, slot) in params.named_params_mut() {
            take_into(&mut cp, &name, slot)?;
        }
        cp.expect_empty()?;
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_round_trip_is_bitwise() {
        let params = MdNetParams::seeded(42);
        let bytes = params.to_checkpoint().to_bytes();
        let loaded = MdNetParams::from_checkpoint(Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert!(loaded == params, "round trip changed parameters");
        assert_eq!(loaded.to_checkpoint().to_bytes(), bytes);
    }

    #[test]
    fn teacher_round_trip() {
        let t = TeacherParams::seeded(5);
        let bytes = t.to_checkpoint().to_bytes();
        let loaded = TeacherParams::from_checkpoint(Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert!(loaded == t);
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let mut bytes = TeacherParams::seeded(1).to_checkpoint().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CheckpointError::BadMagic)
        ));
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = TeacherParams::seeded(1).to_checkpoint().to_bytes();
        let cut = &bytes[..bytes.len() / 2];
        assert!(matches!(
            Checkpoint::from_bytes(cut),
            Err(CheckpointError::Truncated)
        ));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let mut bytes = TeacherParams::seeded(1).to_checkpoint().to_bytes();
        bytes[4] = 99;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CheckpointError::UnsupportedVersion(_))
        ));
    }

    #[test]
    fn unknown_parameter_fails_load() {
        let mut cp = TeacherParams::seeded(1).to_checkpoint();
        cp.insert("teacher.extra".into(), Tensor::zeros(vec![2])).unwrap();
        assert!(matches!(
            TeacherParams::from_checkpoint(cp),
            Err(CheckpointError::Unknown(n)) if n == "teacher.extra"
        ));
    }

    #[test]
    fn missing_parameter_fails_load() {
        let mut cp = TeacherParams::seeded(1).to_checkpoint();
        cp.take("teacher.3.bias").unwrap();
        assert!(matches!(
            TeacherParams::from_checkpoint(cp),
            Err(CheckpointError::Missing(n)) if n == "teacher.3.bias"
        ));
    }

    #[test]
    fn shape_mismatch_fails_load() {
        let mut cp = TeacherParams::seeded(1).to_checkpoint();
        cp.take("teacher.0.bias").unwrap();
        cp.insert("teacher.0.bias".into(), Tensor::zeros(vec![3])).unwrap();
        assert!(matches!(
            TeacherParams::from_checkpoint(cp),
            Err(CheckpointError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.mdnc");
        let params = MdNetParams::seeded(3);
        params.save(&path).unwrap();
        let loaded = MdNetParams::load(&path).unwrap();
        assert!(loaded == params);
    }
}
