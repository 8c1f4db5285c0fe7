//! Versioned binary checkpoints.
//!
//! Layout (little endian): magic, version `u32`, then length-prefixed (`u64`)
//! sections: arch JSON, tensor manifest JSON, config digest, followed by the
//! snapshot step, the parameters as a length-prefixed `f64` array, the
//! optimizer step and moment arrays, and a trailing SHA-256 of everything
//! before it.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::optim::AdamState;
use crate::policy::{ArchConfig, PolicySnapshot, TensorSpec};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GPSOCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub snapshot: PolicySnapshot,
    pub opt_state: AdamState,
    pub config_digest: String,
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u64).to_le_bytes());
    out.extend_from_slice(b);
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    out.extend_from_slice(&(xs.len() as u64).to_le_bytes());
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn save_checkpoint(
    path: &Path,
    snapshot: &PolicySnapshot,
    opt_state: &AdamState,
    config_digest: &str,
) -> crate::Result<()> {
    let mut out = Vec::with_capacity(64 + 24 * snapshot.num_params());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_bytes(&mut out, &serde_json::to_vec(&snapshot.arch)?);
    put_bytes(&mut out, &serde_json::to_vec(&snapshot.layout().manifest)?);
    put_bytes(&mut out, config_digest.as_bytes());
    out.extend_from_slice(&snapshot.step.to_le_bytes());
    put_f64s(&mut out, &snapshot.params);
    out.extend_from_slice(&opt_state.step.to_le_bytes());
    put_f64s(&mut out, &opt_state.m);
    put_f64s(&mut out, &opt_state.v);
    let sum = Sha256::digest(&out);
    out.extend_from_slice(&sum);
    std::fs::write(path, out)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> crate::Result<&'a [u8]> {
        if self.buf.len() - self.at < n {
            return Err(crate::Error::Format(format!("checkpoint truncated at byte {}", self.at)));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u64(&mut self) -> crate::Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, elem: usize) -> crate::Result<usize> {
        let n = self.u64()?;
        let n = usize::try_from(n).map_err(|_| crate::Error::Format("section length overflow".into()))?;
        if n.checked_mul(elem).map_or(true, |b| b > self.buf.len() - self.at) {
            return Err(crate::Error::Format(format!("checkpoint truncated at byte {}", self.at)));
        }
        Ok(n)
    }

    fn bytes(&mut self) -> crate::Result<&'a [u8]> {
        let n = self.len(1)?;
        self.take(n)
    }

    fn f64s(&mut self) -> crate::Result<Vec<f64>> {
        let n = self.len(8)?;
        let raw = self.take(n * 8)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

/// Loads a checkpoint; with `expected_digest`, refuses files written under a
/// different configuration.
pub fn load_checkpoint(path: &Path, expected_digest: Option<&str>) -> crate::Result<Checkpoint> {
    let buf = std::fs::read(path)?;
    if buf.len() < CHECKPOINT_MAGIC.len() + 4 + 32 {
        return Err(crate::Error::Format(format!("{}: checkpoint truncated", path.display())));
    }
    if &buf[..8] != CHECKPOINT_MAGIC {
        return Err(crate::Error::Format(format!("{}: not a checkpoint (bad magic)", path.display())));
    }
    let (body, sum) = buf.split_at(buf.len() - 32);
    if Sha256::digest(body).as_slice() != sum {
        return Err(crate::Error::Format(format!(
            "{}: checksum mismatch (truncated or corrupt)",
            path.display()
        )));
    }
    let mut r = Reader { buf: body, at: 8 };
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(crate::Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let arch: ArchConfig = serde_json::from_slice(r.bytes()?)?;
    let manifest: Vec<TensorSpec> = serde_json::from_slice(r.bytes()?)?;
    let digest = String::from_utf8(r.bytes()?.to_vec())
        .map_err(|_| crate::Error::Format("config digest is not UTF-8".into()))?;
    let step = r.u64()?;
    let params = r.f64s()?;
    let opt_step = r.u64()?;
    let m = r.f64s()?;
    let v = r.f64s()?;
    if r.at != body.len() {
        return Err(crate::Error::Format("trailing bytes after checkpoint payload".into()));
    }
    if let Some(want) = expected_digest {
        if want != digest {
            return Err(crate::Error::Config(format!(
                "checkpoint was written under config digest {digest}, expected {want}"
            )));
        }
    }
    let snapshot =
        PolicySnapshot::from_params(arch, params, step).map_err(|e| crate::Error::Format(e.to_string()))?;
    if snapshot.layout().manifest != manifest {
        return Err(crate::Error::Format("tensor manifest does not match the architecture".into()));
    }
    if (!m.is_empty() || !v.is_empty()) && (m.len() != snapshot.num_params() || v.len() != m.len()) {
        return Err(crate::Error::Format("optimizer moments do not match the parameter count".into()));
    }
    Ok(Checkpoint { snapshot, opt_state: AdamState { step: opt_step, m, v }, config_digest: digest })
}
