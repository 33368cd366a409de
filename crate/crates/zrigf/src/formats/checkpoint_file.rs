//! Binary checkpoint format.
//!
//! Layout (little-endian): magic `ZRIGF01`; `u8` version; `u8` dtype tag
//! (1 = f32, 2 = f64); `u8` stage tag; `u64` stage step; `u64` optimizer
//! step; `u64` RNG key and counter; a length-prefixed config text block; the
//! vocabulary; the named parameter arrays (`u16` name length, name, `u8`
//! rank, `u64` dims, payload in the stored dtype); and the AdamW moment
//! table (name, `u64` length, f64 `m` then `v`). Save -> load -> save is
//! byte-identical.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use zrigf_core::config::Config;
use zrigf_core::pipeline::{Checkpoint, CheckpointStage};
use zrigf_core::scalar::{Dtype, Scalar};

pub const CKPT_MAGIC: &[u8; 7] = b"ZRIGF01";
pub const CKPT_VERSION: u8 = 1;

/// A checkpoint of either precision, decided by the file header.
#[derive(Debug)]
pub enum AnyCheckpoint {
    F32(Checkpoint<f32>),
    F64(Checkpoint<f64>),
}

impl AnyCheckpoint {
    pub fn config(&self) -> &Config {
        match self {
            AnyCheckpoint::F32(c) => &c.config,
            AnyCheckpoint::F64(c) => &c.config,
        }
    }

    pub fn stage(&self) -> CheckpointStage {
        match self {
            AnyCheckpoint::F32(c) => c.stage,
            AnyCheckpoint::F64(c) => c.stage,
        }
    }
}

fn push_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn push_name(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

pub fn encode<T: Scalar>(ckpt: &Checkpoint<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.push(CKPT_VERSION);
    out.push(T::DTYPE.tag());
    out.push(ckpt.stage.tag());
    out.extend_from_slice(&ckpt.stage_step.to_le_bytes());
    out.extend_from_slice(&ckpt.opt_step.to_le_bytes());
    out.extend_from_slice(&ckpt.rng_state.0.to_le_bytes());
    out.extend_from_slice(&ckpt.rng_state.1.to_le_bytes());
    push_str(&mut out, &ckpt.config.to_text());
    out.extend_from_slice(&(ckpt.vocab.len() as u32).to_le_bytes());
    for word in &ckpt.vocab {
        push_name(&mut out, word);
    }
    out.extend_from_slice(&(ckpt.arrays.len() as u32).to_le_bytes());
    for (name, shape, data) in &ckpt.arrays {
        push_name(&mut out, name);
        if shape.len() > u8::MAX as usize {
            bail!("tensor '{name}' has rank {}", shape.len());
        }
        out.push(shape.len() as u8);
        for d in shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        match T::DTYPE {
            Dtype::F32 => {
                for v in data {
                    out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
                }
            }
            Dtype::F64 => {
                for v in data {
                    out.extend_from_slice(&v.to_f64().to_le_bytes());
                }
            }
        }
    }
    out.extend_from_slice(&(ckpt.moments.len() as u32).to_le_bytes());
    for (name, m, v) in &ckpt.moments {
        push_name(&mut out, name);
        out.extend_from_slice(&(m.len() as u64).to_le_bytes());
        for x in m {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for x in v {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint<T: Scalar>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    let bytes = encode(ckpt)?;
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            bail!("corrupt checkpoint: truncated at offset {} (wanted {n} bytes)", self.pos);
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        Ok(String::from_utf8(self.take(len)?.to_vec()).context("non-utf8 name")?)
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        Ok(String::from_utf8(self.take(len)?.to_vec()).context("non-utf8 text block")?)
    }
}

fn decode_body<T: Scalar>(
    r: &mut Reader<'_>,
    config: Config,
    stage: CheckpointStage,
    stage_step: u64,
    opt_step: u64,
    rng_state: (u64, u64),
) -> Result<Checkpoint<T>> {
    let vocab_len = r.u32()? as usize;
    let mut vocab = Vec::with_capacity(vocab_len);
    for _ in 0..vocab_len {
        vocab.push(r.name()?);
    }
    let n_arrays = r.u32()? as usize;
    let mut arrays = Vec::with_capacity(n_arrays);
    for _ in 0..n_arrays {
        let name = r.name()?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        match T::DTYPE {
            Dtype::F32 => {
                for _ in 0..numel {
                    let v = f32::from_le_bytes(r.take(4)?.try_into().unwrap());
                    data.push(T::from_f64(v as f64));
                }
            }
            Dtype::F64 => {
                for _ in 0..numel {
                    data.push(T::from_f64(r.f64()?));
                }
            }
        }
        arrays.push((name, shape, data));
    }
    let n_moments = r.u32()? as usize;
    let mut moments = Vec::with_capacity(n_moments);
    for _ in 0..n_moments {
        let name = r.name()?;
        let len = r.u64()? as usize;
        let mut m = Vec::with_capacity(len);
        for _ in 0..len {
            m.push(r.f64()?);
        }
        let mut v = Vec::with_capacity(len);
        for _ in 0..len {
            v.push(r.f64()?);
        }
        moments.push((name, m, v));
    }
    if r.pos != r.bytes.len() {
        bail!("corrupt checkpoint: {} trailing bytes", r.bytes.len() - r.pos);
    }
    Ok(Checkpoint { config, vocab, stage, stage_step, arrays, moments, opt_step, rng_state })
}

pub fn load_checkpoint(path: &Path) -> Result<AnyCheckpoint> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    let magic = r.take(CKPT_MAGIC.len())?;
    if magic != CKPT_MAGIC {
        bail!("bad magic in {}: not a checkpoint", path.display());
    }
    let version = r.u8()?;
    if version != CKPT_VERSION {
        bail!("unsupported checkpoint version {version}");
    }
    let dtype = Dtype::from_tag(r.u8()?).context("unknown dtype tag")?;
    let stage = CheckpointStage::from_tag(r.u8()?).context("unknown stage tag")?;
    let stage_step = r.u64()?;
    let opt_step = r.u64()?;
    let rng_state = (r.u64()?, r.u64()?);
    let config = Config::parse(&r.string()?).context("checkpoint config block")?;
    match dtype {
        Dtype::F32 => Ok(AnyCheckpoint::F32(decode_body(
            &mut r, config, stage, stage_step, opt_step, rng_state,
        )?)),
        Dtype::F64 => Ok(AnyCheckpoint::F64(decode_body(
            &mut r, config, stage, stage_step, opt_step, rng_state,
        )?)),
    }
}
