//! Portable binary checkpoints and checkpoint averaging.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CTXF"  u32 version
//! u32 metadata length, metadata (UTF-8 key = value lines)
//! u32 tensor count
//! per tensor: u32 name length, name, u32 rank, rank × u64 dims, fp64 payload
//! ```
//!
//! The metadata holds the full configuration, the epoch and the training
//! RNG state.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CTXF";
pub const FORMAT_VERSION: u32 = 1;

/// Position of the training generator: its seed and word offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub epoch: usize,
    pub rng: RngState,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn model(&self) -> Result<Model> {
        Model::from_store(&self.config.model, self.params.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut meta = format!(
            "epoch = {}\nrng_seed = {}\nrng_word_pos = {}\n",
            self.epoch,
            hex(&self.rng.seed),
            self.rng.word_pos
        );
        meta.push_str(&self.config.to_text());

        let mut out = Vec::with_capacity(16 + meta.len() + self.params.total_elements() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint: bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let meta = read_string(&mut r)?;
        let (config, epoch, rng) = parse_meta(&meta)?;

        let count = read_u32(&mut r)? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = read_string(&mut r)?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut r)? as usize);
            }
            let n: usize = shape.iter().product();
            if n.saturating_mul(8) > bytes.len() {
                return Err(Error::Format(format!("tensor {name} larger than the file")));
            }
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f64::from_le_bytes(read_array(&mut r)?));
            }
            params.add(name, Tensor::new(shape, data)?)?;
        }
        if (r.position() as usize) != bytes.len() {
            return Err(Error::Format("trailing bytes after last tensor".into()));
        }
        let ckpt = Self {
            config,
            epoch,
            rng,
            params,
        };
        ckpt.model()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<[u8; 32]> {
    let bad = || Error::Format(format!("bad rng_seed {s:?}"));
    if s.len() != 64 {
        return Err(bad());
    }
    let mut out = [0u8; 32];
    for (i, byte) in out.iter_mut().enumerate() {
        *byte = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    Ok(out)
}

fn parse_meta(meta: &str) -> Result<(Config, usize, RngState)> {
    let mut epoch = None;
    let mut rng = RngState::default();
    let mut rest = String::new();
    for line in meta.lines() {
        let Some((k, v)) = line.split_once('=') else {
            rest.push_str(line);
            rest.push('\n');
            continue;
        };
        let v = v.trim();
        let num_err = |_| Error::Format(format!("bad metadata value in {line:?}"));
        match k.trim() {
            "epoch" => epoch = Some(v.parse().map_err(num_err)?),
            "rng_seed" => rng.seed = unhex(v)?,
            "rng_word_pos" => rng.word_pos = v.parse().map_err(num_err)?,
            _ => {
                rest.push_str(line);
                rest.push('\n');
            }
        }
    }
    let config = Config::parse_text(&rest)?;
    let epoch = epoch.ok_or_else(|| Error::Format("metadata lacks epoch".into()))?;
    Ok((config, epoch, rng))
}

fn read_exact(r: &mut Cursor<&[u8]>, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format("checkpoint ends early".into()))
}

fn read_array<const N: usize>(r: &mut Cursor<&[u8]>) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    read_exact(r, &mut buf)?;
    Ok(buf)
}

fn read_u32(r: &mut Cursor<&[u8]>) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_u64(r: &mut Cursor<&[u8]>) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(r)?))
}

fn read_string(r: &mut Cursor<&[u8]>) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > r.get_ref().len() {
        return Err(Error::Format("string length exceeds file".into()));
    }
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Format("non-UTF-8 string".into()))
}

/// Element-wise mean of every parameter. The result carries the first
/// checkpoint's configuration and RNG state and the latest epoch.
pub fn average_checkpoints(ckpts: &[Checkpoint]) -> Result<Checkpoint> {
    let (first, rest) = ckpts
        .split_first()
        .ok_or_else(|| Error::Contract("nothing to average".into()))?;
    if rest.iter().any(|c| c.config.model != first.config.model || !c.params.same_layout(&first.params)) {
        return Err(Error::Contract("checkpoints with different model configs cannot be averaged".into()));
    }
    let mut params = first.params.clone();
    let n = ckpts.len() as f64;
    for id in first.params.ids() {
        let dst = params.get_mut(id).data_mut();
        for (j, v) in dst.iter_mut().enumerate() {
            let sum: f64 = ckpts.iter().map(|c| c.params.get(id).data()[j]).sum();
            *v = sum / n;
        }
    }
    Ok(Checkpoint {
        config: first.config.clone(),
        epoch: ckpts.iter().map(|c| c.epoch).max().unwrap_or(0),
        rng: first.rng,
        params,
    })
}
