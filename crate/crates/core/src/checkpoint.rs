//! Binary checkpoints.
//!
//! Layout (little endian): `b"DFMC"`, `u32` version, `u64` metadata length,
//! the metadata as TOML, then tensor records until end of file. A record is
//! `u32` name length, name bytes, `u32` rank, `u64` per dimension and the
//! raw `f64` values.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::{Arch, DenoiserModel};
use crate::schedule::Schedule;

pub const MAGIC: &[u8; 4] = b"DFMC";
pub const VERSION: u32 = 1;

/// Serializable position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: String,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let seed = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        Self {
            seed,
            stream: rng.get_stream().to_string(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = |what: &str| Error::Format(format!("bad rng {what}"));
        if self.seed.len() != 64 {
            return Err(bad("seed"));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad("seed"))?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream.parse().map_err(|_| bad("stream"))?);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad("word position"))?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// `init`, `diagonal` or `distill-<loss>`.
    pub stage: String,
    pub step: u64,
    pub arch: Arch,
    pub schedule: Schedule,
    pub rng: Option<RngState>,
    pub config: Config,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<Tensor>,
}

fn take<'a>(buf: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(Error::Format("truncated checkpoint".into()));
    }
    let (a, b) = buf.split_at(n);
    *buf = b;
    Ok(a)
}

fn take_u32(buf: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(
        take(buf, 4)?.try_into().expect("4 bytes"),
    ))
}

fn take_u64(buf: &mut &[u8]) -> Result<u64> {
    Ok(u64::from_le_bytes(
        take(buf, 8)?.try_into().expect("8 bytes"),
    ))
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta) -> Self {
        Self {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, dims: Vec<usize>, data: Vec<f64>) -> Result<()> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!(
                "tensor `{name}` dims do not match its data"
            )));
        }
        if self.tensor(name).is_some() {
            return Err(Error::Format(format!("duplicate tensor `{name}`")));
        }
        self.tensors.push(Tensor {
            name: name.to_string(),
            dims,
            data,
        });
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.tensor(name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no tensor `{name}`")))
    }

    pub fn model(&self) -> Result<DenoiserModel> {
        DenoiserModel::from_params(
            self.meta.arch.clone(),
            self.meta.schedule.clone(),
            self.require("params")?.data.clone(),
        )
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let blob = toml::to_string(&self.meta).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
        out.extend_from_slice(blob.as_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for &d in &t.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut buf = bytes;
        if take(&mut buf, 4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = take_u32(&mut buf)?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let n = take_u64(&mut buf)? as usize;
        let blob = std::str::from_utf8(take(&mut buf, n)?)
            .map_err(|e| Error::Format(format!("metadata is not UTF-8: {e}")))?;
        let meta: CheckpointMeta =
            toml::from_str(blob).map_err(|e| Error::Format(e.to_string()))?;
        let mut ck = Self::new(meta);
        while !buf.is_empty() {
            let len = take_u32(&mut buf)? as usize;
            let name = std::str::from_utf8(take(&mut buf, len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = take_u32(&mut buf)? as usize;
            let dims = (0..rank)
                .map(|_| take_u64(&mut buf).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let count: usize = dims.iter().product();
            let raw = take(
                &mut buf,
                count
                    .checked_mul(8)
                    .ok_or_else(|| Error::Format("tensor too large".into()))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            ck.push(&name, dims, data)?;
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
