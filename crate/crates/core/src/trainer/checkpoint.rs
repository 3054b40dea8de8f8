//! Versioned binary checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "MTAFCKPT" | u32 version | u64 architecture hash | u64 epoch
//! u32 len | architecture JSON
//! f64 beta1 | f64 beta2 | f64 epsilon | u64 step count
//! u32 tensor count | per tensor: u32 name len, name, u32 ndim, u64 dims.., f64 data..
//! u32 param count | u64 per-parameter Adam steps..
//! 32-byte SHA-256 of everything above
//! ```
//!
//! The tensor table holds `param/<name>`, `adam_m/<name>` and `adam_v/<name>`
//! for every parameter in canonical order.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Architecture, Model, Tensor};
use crate::optim::AdamState;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MTAFCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: AdamState,
    pub epoch: usize,
    pub arch_hash: u64,
}

impl Checkpoint {
    pub fn new(model: Model, optimizer: AdamState, epoch: usize) -> Self {
        let arch_hash = model.architecture().hash();
        Checkpoint {
            model,
            optimizer,
            epoch,
            arch_hash,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&self.arch_hash.to_le_bytes());
        buf.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        let arch = serde_json::to_vec(self.model.architecture()).expect("architecture serializes");
        buf.extend_from_slice(&(arch.len() as u32).to_le_bytes());
        buf.extend_from_slice(&arch);
        let opt = &self.optimizer;
        for x in [opt.beta1, opt.beta2, opt.epsilon] {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        buf.extend_from_slice(&opt.step_count.to_le_bytes());

        let params = self.model.params();
        let mut table: Vec<(String, &Tensor)> = Vec::with_capacity(params.len() * 3);
        for p in &params {
            table.push((format!("param/{}", p.name), &p.value));
        }
        for (p, m) in params.iter().zip(&opt.m) {
            table.push((format!("adam_m/{}", p.name), m));
        }
        for (p, v) in params.iter().zip(&opt.v) {
            table.push((format!("adam_v/{}", p.name), v));
        }
        buf.extend_from_slice(&(table.len() as u32).to_le_bytes());
        for (name, t) in table {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        buf.extend_from_slice(&(opt.param_steps.len() as u32).to_le_bytes());
        for &s in &opt.param_steps {
            buf.extend_from_slice(&s.to_le_bytes());
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        buf
    }

    /// Decodes a checkpoint; `expected` rejects files written for a different
    /// architecture.
    pub fn from_bytes(bytes: &[u8], path: &Path, expected: Option<&Architecture>) -> Result<Self> {
        let corrupt = |message: &str| Error::Corrupt {
            path: path.to_path_buf(),
            message: message.to_string(),
        };
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(corrupt("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                path: path.to_path_buf(),
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if bytes.len() < 12 + 32 {
            return Err(corrupt("truncated"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch (truncated or modified)"));
        }

        let mut r = Reader { bytes: body, pos: 12 };
        let malformed = |_| corrupt("malformed body");
        let arch_hash = r.u64().map_err(malformed)?;
        let epoch = r.u64().map_err(malformed)? as usize;
        let arch_len = r.u32().map_err(malformed)? as usize;
        let arch: Architecture =
            serde_json::from_slice(r.take(arch_len).map_err(malformed)?).map_err(|_| corrupt("bad architecture record"))?;
        if arch.hash() != arch_hash {
            return Err(corrupt("architecture record does not match its hash"));
        }
        if let Some(exp) = expected {
            if exp.hash() != arch_hash {
                return Err(Error::HashMismatch {
                    found: arch_hash,
                    expected: exp.hash(),
                });
            }
        }
        let beta1 = r.f64().map_err(malformed)?;
        let beta2 = r.f64().map_err(malformed)?;
        let epsilon = r.f64().map_err(malformed)?;
        let step_count = r.u64().map_err(malformed)?;

        let count = r.u32().map_err(malformed)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32().map_err(malformed)? as usize;
            let name = String::from_utf8(r.take(name_len).map_err(malformed)?.to_vec())
                .map_err(|_| corrupt("tensor name is not UTF-8"))?;
            let ndim = r.u32().map_err(malformed)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64().map_err(malformed)? as usize);
            }
            let len: usize = shape.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(r.f64().map_err(malformed)?);
            }
            tensors.push((name, Tensor::from_vec(&shape, data)?));
        }
        let n_steps = r.u32().map_err(malformed)? as usize;
        let mut param_steps = Vec::with_capacity(n_steps);
        for _ in 0..n_steps {
            param_steps.push(r.u64().map_err(malformed)?);
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }

        let mut model = Model::build(&arch, 0, 0.0)?;
        let n_params = model.params().len();
        if tensors.len() != 3 * n_params || param_steps.len() != n_params {
            return Err(corrupt("tensor table does not match architecture"));
        }
        let mut it = tensors.into_iter();
        for p in model.params_mut() {
            let (name, t) = it.next().expect("length checked");
            if name != format!("param/{}", p.name) || t.shape() != p.value.shape() {
                return Err(corrupt(&format!("unexpected tensor {name}")));
            }
            p.value = t;
        }
        let rest: Vec<(String, Tensor)> = it.collect();
        let (m_part, v_part) = rest.split_at(n_params);
        let optimizer = AdamState {
            beta1,
            beta2,
            epsilon,
            step_count,
            m: m_part.iter().map(|(_, t)| t.clone()).collect(),
            v: v_part.iter().map(|(_, t)| t.clone()).collect(),
            param_steps,
        };
        if optimizer.m.iter().zip(model.params()).any(|(m, p)| m.shape() != p.value.shape())
            || optimizer.v.iter().zip(model.params()).any(|(v, p)| v.shape() != p.value.shape())
        {
            return Err(corrupt("optimizer state does not match parameters"));
        }
        Ok(Checkpoint {
            model,
            optimizer,
            epoch,
            arch_hash,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], ()> {
        let end = self.pos.checked_add(n).ok_or(())?;
        let s = self.bytes.get(self.pos..end).ok_or(())?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, ()> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().map_err(|_| ())?))
    }

    fn u64(&mut self) -> std::result::Result<u64, ()> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().map_err(|_| ())?))
    }

    fn f64(&mut self) -> std::result::Result<f64, ()> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().map_err(|_| ())?))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path, expected: Option<&Architecture>) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path, expected)
}
