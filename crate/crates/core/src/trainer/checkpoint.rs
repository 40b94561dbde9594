//! Named-tensor checkpoint container.
//!
//! Layout (little-endian): magic `DCKP`, version `u32`, iteration `u64`,
//! config digest `u64`, tensor count `u32`, then per tensor a `u32` name
//! length, the UTF-8 name and the tensor in the `DCTN` format. A trailing
//! `u64` holds the first eight bytes of the SHA-256 of everything before it.

use std::path::Path;

use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::serialize::{read_exact, read_tensor, read_u32, read_u64, write_tensor};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    pub config_digest: u64,
    tensors: IndexMap<String, Tensor>,
}

fn checksum(bytes: &[u8]) -> u64 {
    let d = Sha256::digest(bytes);
    u64::from_le_bytes(d[..8].try_into().expect("32-byte digest"))
}

impl Checkpoint {
    pub fn new(iteration: u64, config_digest: u64) -> Self {
        Checkpoint {
            iteration,
            config_digest,
            tensors: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: String, tensor: Tensor) {
        self.tensors.insert(name, tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Keeps only tensors whose name satisfies `keep`.
    pub fn retain(&mut self, mut keep: impl FnMut(&str) -> bool) {
        self.tensors.retain(|k, _| keep(k));
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&self.config_digest.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            write_tensor(&mut out, t).expect("writing to a Vec cannot fail");
        }
        let sum = checksum(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 + 4 {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        let computed = checksum(body);
        if stored != computed {
            return Err(Error::DigestMismatch { stored, computed });
        }
        let mut r = body;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let iteration = read_u64(&mut r)?;
        let config_digest = read_u64(&mut r)?;
        let count = read_u32(&mut r)?;
        let mut ckpt = Checkpoint::new(iteration, config_digest);
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            if len > r.len() {
                return Err(Error::Format("checkpoint truncated inside a name".into()));
            }
            let mut name = vec![0u8; len];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let t = read_tensor(&mut r)?;
            ckpt.tensors.insert(name, t);
        }
        if !r.is_empty() {
            return Err(Error::Format(format!("{} unexpected bytes after last tensor", r.len())));
        }
        Ok(ckpt)
    }

    /// SHA-256-based fingerprint of the encoded checkpoint.
    pub fn digest(&self) -> u64 {
        checksum(&self.encode())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}
