//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "MOCMECKP" | u32 version
//! u64 epoch | f64 best validation MRR
//! str model config (TOML) | str run config (opaque text)
//! u32 block count, then per block:
//!     str name | u32 ndim | u64 dims… | u64 count | f32 values… | u32 crc32(values)
//! u8 optimizer flag, then if set: u64 step | f64 lr | per block:
//!     u64 count | f32 first moments… | f32 second moments… | u32 crc32(moments)
//! u32 crc32 of everything after the version
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8 bytes.

use std::path::{Path, PathBuf};

use crate::autodiff::Tensor;
use crate::model::{Model, ModelConfig};
use crate::optim::Adam;

pub const MAGIC: &[u8; 8] = b"MOCMECKP";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("cannot access checkpoint {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("checkpoint integrity error: {0}")]
    Integrity(String),
    #[error("checkpoint does not match the configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub run_config: String,
    pub epoch: u64,
    pub best_mrr: f64,
    pub blocks: Vec<Block>,
    pub optimizer: Option<Adam>,
}

impl Checkpoint {
    pub fn capture(model: &Model, optimizer: Option<&Adam>, epoch: u64, best_mrr: f64, run_config: &str) -> Self {
        Self {
            model_config: model.config.clone(),
            run_config: run_config.to_string(),
            epoch,
            best_mrr,
            blocks: model
                .params
                .iter()
                .map(|(_, name, t)| Block {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
            optimizer: optimizer.cloned(),
        }
    }

    /// Writes the stored parameters (and optimizer state, if any) into a
    /// model built from a matching configuration.
    pub fn restore(&self, model: &mut Model) -> Result<Option<Adam>, CheckpointError> {
        if model.config.dim != self.model_config.dim {
            return Err(CheckpointError::Config(format!(
                "checkpoint embedding dimension is {}, configured dimension is {}",
                self.model_config.dim, model.config.dim
            )));
        }
        if model.params.len() != self.blocks.len() {
            return Err(CheckpointError::Config(format!(
                "checkpoint has {} parameter blocks, the model has {}",
                self.blocks.len(),
                model.params.len()
            )));
        }
        let ids: Vec<_> = model.params.ids().collect();
        for (id, block) in ids.iter().zip(&self.blocks) {
            let t = model.params.get(*id);
            let name = model.params.name(*id);
            if name != block.name || t.shape() != block.shape.as_slice() {
                return Err(CheckpointError::Config(format!(
                    "block {} {:?} in checkpoint, {} {:?} in model",
                    block.name,
                    block.shape,
                    name,
                    t.shape()
                )));
            }
        }
        for (id, block) in ids.iter().zip(&self.blocks) {
            model.params.get_mut(*id).data_mut().copy_from_slice(&block.data);
        }
        Ok(self.optimizer.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&VERSION.to_le_bytes());
        w.extend_from_slice(&self.epoch.to_le_bytes());
        w.extend_from_slice(&self.best_mrr.to_le_bytes());
        let cfg = toml::to_string(&self.model_config).expect("model config serializes");
        put_str(&mut w, &cfg);
        put_str(&mut w, &self.run_config);
        w.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for b in &self.blocks {
            put_str(&mut w, &b.name);
            w.extend_from_slice(&(b.shape.len() as u32).to_le_bytes());
            for &d in &b.shape {
                w.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_floats_with_crc(&mut w, &[&b.data]);
        }
        match &self.optimizer {
            None => w.push(0),
            Some(adam) => {
                w.push(1);
                w.extend_from_slice(&adam.step.to_le_bytes());
                w.extend_from_slice(&adam.lr.to_le_bytes());
                for (m, v) in adam.m.iter().zip(&adam.v) {
                    put_floats_with_crc(&mut w, &[m, v]);
                }
            }
        }
        let crc = crc32fast::hash(&w[12..]);
        w.extend_from_slice(&crc.to_le_bytes());
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(if bytes.len() >= 8 && &bytes[..8] != MAGIC {
                CheckpointError::BadMagic
            } else {
                CheckpointError::Integrity("file is truncated".into())
            });
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion {
                found: version,
                supported: VERSION,
            });
        }
        if bytes.len() < 16 {
            return Err(CheckpointError::Integrity("file is truncated".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let mut r = Reader { buf: body, pos: 12 };
        let parsed = r.checkpoint();
        if crc32fast::hash(&body[12..]) != stored {
            // Report a block-level failure if one was found, else the file checksum.
            return Err(match parsed {
                Err(e) => e,
                Ok(_) => CheckpointError::Integrity("file checksum mismatch".into()),
            });
        }
        let ckpt = parsed?;
        if r.pos != body.len() {
            return Err(CheckpointError::Integrity("trailing bytes after the last section".into()));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io)?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    /// Parameter block by name, as a tensor.
    pub fn block(&self, name: &str) -> Option<Tensor> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .map(|b| Tensor::new(b.shape.clone(), b.data.clone()).expect("stored shape matches data"))
    }
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    w.extend_from_slice(&(s.len() as u32).to_le_bytes());
    w.extend_from_slice(s.as_bytes());
}

/// Writes the length of the first slice, then every slice's values, then a
/// CRC over all value bytes.
fn put_floats_with_crc(w: &mut Vec<u8>, parts: &[&[f32]]) {
    w.extend_from_slice(&(parts[0].len() as u64).to_le_bytes());
    let start = w.len();
    for part in parts {
        for v in *part {
            w.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&w[start..]);
    w.extend_from_slice(&crc.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn truncated() -> CheckpointError {
    CheckpointError::Integrity("file is truncated".into())
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(truncated)?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn len(&mut self) -> Result<usize, CheckpointError> {
        let n = self.u64()?;
        // A length can never exceed the bytes left; this also guards the allocation.
        if n > (self.buf.len() - self.pos) as u64 {
            return Err(truncated());
        }
        Ok(n as usize)
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Integrity("invalid UTF-8 string".into()))
    }

    fn floats_with_crc(&mut self, parts: usize, what: &str) -> Result<Vec<Vec<f32>>, CheckpointError> {
        let n = self.len()?;
        let bytes = self.take(n.checked_mul(4 * parts).ok_or_else(truncated)?)?;
        let crc = self.u32()?;
        if crc32fast::hash(bytes) != crc {
            return Err(CheckpointError::Integrity(format!("checksum mismatch in {what}")));
        }
        let all: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok((0..parts).map(|p| all[p * n..(p + 1) * n].to_vec()).collect())
    }

    fn checkpoint(&mut self) -> Result<Checkpoint, CheckpointError> {
        let epoch = self.u64()?;
        let best_mrr = self.f64()?;
        let cfg_text = self.string()?;
        let model_config: ModelConfig =
            toml::from_str(&cfg_text).map_err(|e| CheckpointError::Integrity(format!("model config: {e}")))?;
        let run_config = self.string()?;
        let nblocks = self.u32()? as usize;
        let mut blocks = Vec::with_capacity(nblocks.min(1 << 16));
        for _ in 0..nblocks {
            let name = self.string()?;
            let ndim = self.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(self.u64()? as usize);
            }
            let data = self.floats_with_crc(1, &format!("block {name}"))?.remove(0);
            let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            if numel != Some(data.len()) {
                return Err(CheckpointError::Integrity(format!("block {name}: shape {shape:?} does not match {} values", data.len())));
            }
            blocks.push(Block { name, shape, data });
        }
        let optimizer = match self.u8()? {
            0 => None,
            1 => {
                let step = self.u64()?;
                let lr = self.f64()?;
                let (mut m, mut v) = (Vec::with_capacity(nblocks), Vec::with_capacity(nblocks));
                for b in &blocks {
                    let mut mv = self.floats_with_crc(2, &format!("optimizer state of {}", b.name))?;
                    if mv[0].len() != b.data.len() {
                        return Err(CheckpointError::Integrity(format!("optimizer state size for {}", b.name)));
                    }
                    v.push(mv.pop().expect("two parts"));
                    m.push(mv.pop().expect("two parts"));
                }
                Some(Adam { lr, step, m, v })
            }
            other => return Err(CheckpointError::Integrity(format!("bad optimizer flag {other}"))),
        };
        Ok(Checkpoint {
            model_config,
            run_config,
            epoch,
            best_mrr,
            blocks,
            optimizer,
        })
    }
}
