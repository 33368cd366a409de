//! Binary PPM (P6, 8-bit) read/write.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use zrigf_core::image::PixelImage;

pub fn write_ppm(path: &Path, img: &PixelImage) -> Result<()> {
    let mut out = Vec::with_capacity(img.rgb.len() + 32);
    write!(out, "P6\n{} {}\n255\n", img.width, img.height)?;
    out.extend_from_slice(&img.rgb);
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Reads a P6 image with an 8-bit maxval. Header comments (`#`) are skipped.
pub fn read_ppm(path: &Path) -> Result<PixelImage> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    parse_ppm(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn parse_ppm(bytes: &[u8]) -> Result<PixelImage> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        bail!("not a binary PPM (P6) file");
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // Skip whitespace and comments.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            bail!("malformed PPM header");
        }
        *field = std::str::from_utf8(&bytes[start..pos])?.parse()?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        bail!("unsupported maxval {maxval}, expected 255");
    }
    // Exactly one whitespace byte separates the header from pixel data.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        bail!("missing header terminator");
    }
    pos += 1;
    let need = width * height * 3;
    let data = &bytes[pos..];
    if data.len() < need {
        bail!("truncated pixel data: have {}, need {need}", data.len());
    }
    Ok(PixelImage { width, height, rgb: data[..need].to_vec() })
}
