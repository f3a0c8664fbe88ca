//! Checkpoint persistence.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "UMIX"                magic, 4 bytes
//! version               u32
//! config_len, config    u64 + UTF-8 key=value text
//! tensor_count          u64
//! per tensor:
//!   name_len, name      u64 + UTF-8
//!   rank                u64
//!   dims[rank]          u64 each
//!   payload             product(dims) f64, little-endian bits
//! ```
//!
//! The tensor list is ordered (model parameters in canonical walk order,
//! then optimizer state), so save -> load -> save reproduces the input
//! byte for byte. f64 payloads round-trip through raw bits: restored
//! training continues bit-identically.

use std::path::Path;

use crate::model::{ModelConfig, SegModel};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"UMIX";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Named tensors in serialization order.
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let config_text = self.config.to_text();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(config_text.len() as u64).to_le_bytes());
        out.extend_from_slice(config_text.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, tensor) in &self.tensors {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(tensor.rank() as u64).to_le_bytes());
            for &d in tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format(format!(
                "not a checkpoint: expected magic {:?}, found {:?}",
                MAGIC, magic
            )));
        }
        let version = u32::from_le_bytes(r.take(4, "version")?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version} (this build reads {VERSION})"
            )));
        }
        let config_text = r.utf8("config")?;
        let config = ModelConfig::parse(&config_text)?;
        let count = r.u64("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for i in 0..count {
            let name = r.utf8(&format!("tensor {i} name"))?;
            let rank = r.u64(&format!("tensor '{name}' rank"))? as usize;
            if rank == 0 || rank > 4 {
                return Err(Error::Format(format!(
                    "tensor '{name}': rank {rank} outside the supported 1..=4"
                )));
            }
            let mut dims = Vec::with_capacity(rank);
            for d in 0..rank {
                dims.push(r.u64(&format!("tensor '{name}' dim {d}"))? as usize);
            }
            let len: usize = dims.iter().product();
            let payload = r.take(len * 8, &format!("tensor '{name}' payload"))?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Tensor::new(&dims, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "truncated checkpoint: needed {n} bytes for {what} at offset {}, \
                 file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn utf8(&mut self, what: &str) -> Result<String> {
        let len = self.u64(what)? as usize;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::Format(format!("{what} is not valid UTF-8")))
    }
}

/// Snapshot a model (walk order) plus any extra named tensors (optimizer
/// moments, counters) appended after the parameters.
pub fn model_to_checkpoint(
    model: &SegModel<Tensor>,
    extra: &[(String, Tensor)],
) -> Checkpoint {
    let mut tensors = Vec::new();
    model.visit(&mut |name, t| tensors.push((name.to_string(), t.clone())));
    tensors.extend(extra.iter().cloned());
    Checkpoint { config: model.config.clone(), tensors }
}

/// Rebuild a model from a checkpoint; returns the leftover tensors that
/// are not model parameters (in file order).
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<(SegModel<Tensor>, Vec<(String, Tensor)>)> {
    let mut model = SegModel::init(&ckpt.config, 0)?;
    let mut used = vec![false; ckpt.tensors.len()];
    let mut error = None;
    model.visit_mut(&mut |name, t| {
        if error.is_some() {
            return;
        }
        match ckpt.tensors.iter().position(|(n, _)| n == name) {
            Some(i) => {
                let stored = &ckpt.tensors[i].1;
                if stored.shape() != t.shape() {
                    error = Some(Error::Format(format!(
                        "tensor '{name}' has shape {:?} in the checkpoint, expected {:?}",
                        stored.shape(),
                        t.shape()
                    )));
                    return;
                }
                *t = stored.clone();
                used[i] = true;
            }
            None => error = Some(Error::Format(format!("checkpoint is missing tensor '{name}'"))),
        }
    });
    if let Some(e) = error {
        return Err(e);
    }
    let extra = ckpt
        .tensors
        .iter()
        .zip(&used)
        .filter(|(_, &u)| !u)
        .map(|((n, t), _)| (n.clone(), t.clone()))
        .collect();
    Ok((model, extra))
}
