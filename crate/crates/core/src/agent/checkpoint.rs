//! Binary checkpoints of a Q-function.
//!
//! Layout, little-endian throughout:
//! `"BBMDPQFN"`, format version `u64`, 32-byte config digest, gradient step
//! `u64`, architecture JSON length `u64` and bytes, parameter count `u64`,
//! then the parameters as `f64`.

use sha2::{Digest, Sha256};

use super::qfn::{Architecture, QFunction};
use super::AgentError;

pub const MAGIC: &[u8; 8] = b"BBMDPQFN";
pub const VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub qfn: QFunction,
    pub config_digest: [u8; 32],
    pub gradient_step: u64,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Shape {
    architecture: Architecture,
    inputs: usize,
    outputs: usize,
}

/// SHA-256 of arbitrary config bytes.
pub fn digest(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let q = &ckpt.qfn;
    let shape = serde_json::to_vec(&Shape {
        architecture: q.architecture.clone(),
        inputs: q.inputs,
        outputs: q.outputs,
    })
    .expect("shape serializes");
    let mut out = Vec::with_capacity(72 + shape.len() + 8 * q.params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&ckpt.config_digest);
    out.extend_from_slice(&ckpt.gradient_step.to_le_bytes());
    out.extend_from_slice(&(shape.len() as u64).to_le_bytes());
    out.extend_from_slice(&shape);
    out.extend_from_slice(&(q.params.len() as u64).to_le_bytes());
    for p in &q.params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], AgentError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| AgentError::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, AgentError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, AgentError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(AgentError::Checkpoint("bad magic".into()));
    }
    let version = r.u64()?;
    if version != VERSION {
        return Err(AgentError::Checkpoint(format!("unsupported version {version}")));
    }
    let config_digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let gradient_step = r.u64()?;
    let shape_len = r.u64()? as usize;
    let shape: Shape = serde_json::from_slice(r.take(shape_len)?)
        .map_err(|e| AgentError::Checkpoint(format!("shape: {e}")))?;
    let count = r.u64()? as usize;
    let raw = r.take(count.checked_mul(8).ok_or_else(|| AgentError::Checkpoint("size".into()))?)?;
    if r.pos != bytes.len() {
        return Err(AgentError::Checkpoint("trailing bytes".into()));
    }
    let qfn = QFunction {
        architecture: shape.architecture,
        inputs: shape.inputs,
        outputs: shape.outputs,
        params: raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    if qfn.param_count() != count {
        return Err(AgentError::Checkpoint(format!(
            "{count} parameters for a model of {}",
            qfn.param_count()
        )));
    }
    Ok(Checkpoint {
        qfn,
        config_digest,
        gradient_step,
    })
}

pub fn save(path: &std::path::Path, ckpt: &Checkpoint) -> Result<(), AgentError> {
    std::fs::write(path, encode(ckpt)).map_err(|e| AgentError::Checkpoint(e.to_string()))
}

pub fn load(path: &std::path::Path) -> Result<Checkpoint, AgentError> {
    decode(&std::fs::read(path).map_err(|e| AgentError::Checkpoint(e.to_string()))?)
}
