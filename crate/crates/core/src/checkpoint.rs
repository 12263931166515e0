//! Checkpoint persistence: a small binary container of named f32 parameter
//! blobs plus the resolved config snapshot, the training step and the run
//! seed. Save -> load -> save is byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::tensor::{Real, Tensor};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"DITOCKP1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    Clip,
    Dop,
    Detector,
}

impl CheckpointKind {
    fn to_byte(self) -> u8 {
        match self {
            CheckpointKind::Clip => 1,
            CheckpointKind::Dop => 2,
            CheckpointKind::Detector => 3,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            1 => Ok(CheckpointKind::Clip),
            2 => Ok(CheckpointKind::Dop),
            3 => Ok(CheckpointKind::Detector),
            other => Err(Error::Checkpoint(format!("unknown checkpoint kind {other}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    /// Resolved config snapshot (TOML).
    pub config_toml: String,
    pub step: u64,
    /// Run seed; together with `step` this pins every derived RNG stream.
    pub seed: u64,
    pub blobs: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.push(self.kind.to_byte());
        let cfg = self.config_toml.as_bytes();
        buf.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        buf.extend_from_slice(cfg);
        buf.extend_from_slice(&self.step.to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.extend_from_slice(&(self.blobs.len() as u64).to_le_bytes());
        for (name, tensor) in &self.blobs {
            let nb = name.as_bytes();
            buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            buf.extend_from_slice(nb);
            buf.push(tensor.shape().len() as u8);
            for &d in tensor.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in tensor.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .map_err(|e| Error::Missing(format!("checkpoint {}: {e}", path.display())))?
            .read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(8)? != MAGIC {
            return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
        }
        let kind = CheckpointKind::from_byte(cur.take(1)?[0])?;
        let cfg_len = cur.u64()? as usize;
        let config_toml = String::from_utf8(cur.take(cfg_len)?.to_vec())
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let step = cur.u64()?;
        let seed = cur.u64()?;
        let count = cur.u64()? as usize;
        let mut blobs = BTreeMap::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            let ndim = cur.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(cur.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = cur.take(numel * 4)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            blobs.insert(name, Tensor::new(shape, data));
        }
        if cur.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes in checkpoint".into()));
        }
        Ok(Checkpoint { kind, config_toml, step, seed, blobs })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Collect named parameters into f32 blobs under the checkpoint.
pub fn blobs_from<T: Real>(pairs: &[(String, &Tensor<T>)]) -> BTreeMap<String, Tensor<f32>> {
    pairs.iter().map(|(n, t)| (n.clone(), t.to_f32())).collect()
}

/// Restore named parameters from blobs; every target must be present with a
/// matching shape.
pub fn load_into<T: Real>(
    blobs: &BTreeMap<String, Tensor<f32>>,
    targets: &mut [(String, &mut Tensor<T>)],
) -> Result<()> {
    for (name, tensor) in targets.iter_mut() {
        let blob = blobs
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter '{name}'")))?;
        if blob.shape() != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter '{name}' has shape {:?}, expected {:?}",
                blob.shape(),
                tensor.shape()
            )));
        }
        **tensor = Tensor::from_f32(blob);
    }
    Ok(())
}
