//! Loading images and corpora from disk into the core's in-memory types.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use zrigf_core::image::{normalize_image, patchify, ImagePatchGrid, PixelImage};
use zrigf_core::scalar::Scalar;

use crate::formats::jsonl::PairRecord;
use crate::formats::ppm::read_ppm;

/// The image id of a file: its stem (`images/synth-0001.ppm` -> `synth-0001`).
pub fn image_id(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(String::from)
        .with_context(|| format!("cannot derive an image id from {}", path.display()))
}

/// Reads every `.ppm` in a directory, sorted by file name for determinism.
pub fn load_image_dir(dir: &Path) -> Result<Vec<(String, PixelImage)>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("ppm"))
        .collect();
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for path in paths {
        let id = image_id(&path)?;
        let img = read_ppm(&path)?;
        out.push((id, img));
    }
    if out.is_empty() {
        bail!("no .ppm images found in {}", dir.display());
    }
    Ok(out)
}

/// Normalizes and patchifies a set of images for the model geometry.
pub fn grids_of<T: Scalar>(
    images: &[(String, PixelImage)],
    patch_size: usize,
) -> Result<BTreeMap<String, ImagePatchGrid<T>>> {
    let mut out = BTreeMap::new();
    for (id, img) in images {
        let grid = patchify(&normalize_image::<T>(img), patch_size)
            .with_context(|| format!("patchifying image '{id}'"))?;
        if out.insert(id.clone(), grid).is_some() {
            bail!("duplicate image id '{id}'");
        }
    }
    Ok(out)
}

/// Resolves pair records to (image id, pixels, caption); image paths are
/// relative to the corpus file's directory.
pub fn resolve_pairs(
    pairs: &[PairRecord],
    corpus_path: &Path,
) -> Result<Vec<(String, PixelImage, String)>> {
    let base = corpus_path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let path = base.join(&p.image);
        let img = read_ppm(&path).with_context(|| format!("pair {}: image {}", i + 1, p.image))?;
        out.push((image_id(&path)?, img, p.caption.clone()));
    }
    Ok(out)
}
