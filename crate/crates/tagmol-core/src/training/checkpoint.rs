use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::adam::AdamState;
use super::TrainError;
use crate::diffcore::Tensor;
use crate::networks::{ModelParams, NetDims};

const MAGIC: &[u8; 4] = b"TGMC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A full training snapshot: parameters, optimizer state, epoch index, and
/// the hash of the configuration that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub epoch: u64,
    pub dims: NetDims,
    pub params: ModelParams,
    /// One Adam state per parameter group, in group order.
    pub opt: Vec<AdamState>,
}

fn put_tensor(buf: &mut Vec<u8>, t: &Tensor) {
    buf.push(t.shape.len() as u8);
    for &d in &t.shape {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in &t.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Little-endian binary serialization with a trailing SHA-256 checksum.
pub fn save_checkpoint(path: &Path, cp: &Checkpoint) -> Result<(), TrainError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&cp.config_hash);
    buf.extend_from_slice(&cp.epoch.to_le_bytes());
    let dims_json = serde_json::to_vec(&cp.dims).expect("dims serialize");
    buf.extend_from_slice(&(dims_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&dims_json);

    for group in ModelParams::all_groups() {
        let tensors = cp.params.group_tensors(group);
        buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            put_tensor(&mut buf, t);
        }
    }
    for state in &cp.opt {
        buf.extend_from_slice(&state.step.to_le_bytes());
        buf.extend_from_slice(&(state.m.len() as u32).to_le_bytes());
        for t in state.m.iter().chain(&state.v) {
            put_tensor(&mut buf, t);
        }
    }

    let digest: [u8; 32] = Sha256::digest(&buf).into();
    buf.extend_from_slice(&digest);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        if self.at + n > self.bytes.len() {
            return Err(TrainError::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, TrainError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<Tensor, TrainError> {
        let rank = self.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = self.take(numel * 8)?;
        let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Tensor::from_values(shape, values)
            .map_err(|e| TrainError::Checkpoint(format!("bad tensor: {e}")))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 4 + 4 + 32 + 8 + 4 + 32 {
        return Err(TrainError::Checkpoint("file too short".into()));
    }
    let (body, stored_digest) = bytes.split_at(bytes.len() - 32);
    let digest: [u8; 32] = Sha256::digest(body).into();
    if digest != stored_digest {
        return Err(TrainError::Checkpoint("checksum mismatch".into()));
    }

    let mut r = Reader { bytes: body, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(TrainError::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::CheckpointVersion { found: version, supported: CHECKPOINT_VERSION });
    }
    let config_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
    let epoch = r.u64()?;
    let dims_len = r.u32()? as usize;
    let dims: NetDims = serde_json::from_slice(r.take(dims_len)?)
        .map_err(|e| TrainError::Checkpoint(format!("bad dims block: {e}")))?;

    // Rebuild the parameter structure from dims, then fill values in the
    // stable group order, verifying names and shapes.
    let mut params = ModelParams::init(&dims, 0);
    for group in ModelParams::all_groups() {
        let count = r.u32()? as usize;
        let expected: Vec<(String, Vec<usize>)> = params
            .group_tensors(group)
            .iter()
            .map(|(n, t)| (n.clone(), t.shape.clone()))
            .collect();
        if count != expected.len() {
            return Err(TrainError::Checkpoint(format!(
                "group {:?} has {} tensors, expected {}",
                group,
                count,
                expected.len()
            )));
        }
        let mut loaded = Vec::with_capacity(count);
        for (name, shape) in &expected {
            let name_len = r.u16()? as usize;
            let stored_name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| TrainError::Checkpoint("bad tensor name".into()))?;
            if stored_name != name {
                return Err(TrainError::Checkpoint(format!(
                    "tensor name {stored_name}, expected {name}"
                )));
            }
            let t = r.tensor()?;
            if &t.shape != shape {
                return Err(TrainError::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape, shape
                )));
            }
            loaded.push(t);
        }
        for (dst, src) in params.group_tensors_mut(group).into_iter().zip(loaded) {
            *dst = src;
        }
    }

    let mut opt = Vec::with_capacity(5);
    for group in ModelParams::all_groups() {
        let step = r.u64()?;
        let count = r.u32()? as usize;
        if count != params.group_tensors(group).len() {
            return Err(TrainError::Checkpoint("optimizer state count mismatch".into()));
        }
        let mut m = Vec::with_capacity(count);
        for _ in 0..count {
            m.push(r.tensor()?);
        }
        let mut v = Vec::with_capacity(count);
        for _ in 0..count {
            v.push(r.tensor()?);
        }
        opt.push(AdamState { m, v, step });
    }
    if r.at != body.len() {
        return Err(TrainError::Checkpoint("trailing bytes".into()));
    }
    Ok(Checkpoint { config_hash, epoch, dims, params, opt })
}
