//! Binary image-index format.
//!
//! Layout (little-endian): magic `ZRIGFIDX1`; `u32` dim; `u64` count; then
//! per entry a `u16` id length, the id bytes, and `dim` 32-bit floats.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use zrigf_core::retrieval::ImageIndex;

pub const INDEX_MAGIC: &[u8; 9] = b"ZRIGFIDX1";

pub fn save_index(path: &Path, index: &ImageIndex) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(INDEX_MAGIC);
    out.extend_from_slice(&(index.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(index.len() as u64).to_le_bytes());
    for entry in index.entries() {
        let id = entry.id.as_bytes();
        if id.len() > u16::MAX as usize {
            bail!("image id longer than {} bytes: '{}'", u16::MAX, entry.id);
        }
        out.extend_from_slice(&(id.len() as u16).to_le_bytes());
        out.extend_from_slice(id);
        for v in &entry.embedding {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            bail!("truncated file: wanted {n} bytes at offset {}", self.pos);
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
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
}

pub fn load_index(path: &Path) -> Result<ImageIndex> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    let magic = r.take(INDEX_MAGIC.len())?;
    if magic != INDEX_MAGIC {
        bail!("bad magic in {}: not an index file", path.display());
    }
    let dim = r.u32()? as usize;
    let count = r.u64()? as usize;
    let mut items = Vec::with_capacity(count);
    for _ in 0..count {
        let id_len = r.u16()? as usize;
        let id = String::from_utf8(r.take(id_len)?.to_vec())
            .with_context(|| format!("non-utf8 id in {}", path.display()))?;
        let mut emb = Vec::with_capacity(dim);
        for _ in 0..dim {
            emb.push(f32::from_le_bytes(r.take(4)?.try_into().unwrap()));
        }
        items.push((id, emb));
    }
    if r.pos != bytes.len() {
        bail!("{} trailing bytes after index payload", bytes.len() - r.pos);
    }
    Ok(ImageIndex::from_stored(dim, items)?)
}
