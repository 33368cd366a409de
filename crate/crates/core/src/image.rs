//! Pixel images and patch grids.
//!
//! Raw images are 8-bit RGB; the model consumes them as standardized pixel
//! tensors `[3, H, W]` ((x/255 - 0.5) / 0.5, so values lie in [-1, 1]) cut
//! into non-overlapping patch vectors. Patch vectors are row-major over the
//! grid and channel-major within a patch; [`crate::graph::Graph::extract_patches`]
//! uses the identical layout on the graph side.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// 8-bit interleaved-RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelImage {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl PixelImage {
    pub fn new(width: usize, height: usize) -> Self {
        PixelImage { width, height, rgb: vec![0; width * height * 3] }
    }

    pub fn set(&mut self, x: usize, y: usize, color: [u8; 3]) {
        let base = (y * self.width + x) * 3;
        self.rgb[base..base + 3].copy_from_slice(&color);
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let base = (y * self.width + x) * 3;
        [self.rgb[base], self.rgb[base + 1], self.rgb[base + 2]]
    }
}

/// Standardizes to a `[3, H, W]` tensor with fixed mean 0.5 / std 0.5.
pub fn normalize_image<T: Scalar>(img: &PixelImage) -> Tensor<T> {
    let (w, h) = (img.width, img.height);
    let mut data = vec![T::ZERO; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let px = img.get(x, y);
            for c in 0..3 {
                let v = px[c] as f64 / 255.0;
                data[(c * h + y) * w + x] = T::from_f64((v - 0.5) / 0.5);
            }
        }
    }
    Tensor::from_vec(&[3, h, w], data).expect("image shape")
}

/// Patch vectors of one image: `[N, p^2*3]` with `N = (H/p) * (W/p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePatchGrid<T> {
    pub patch_size: usize,
    /// Patches per side of the square grid.
    pub side: usize,
    pub patches: Tensor<T>,
}

impl<T: Scalar> ImagePatchGrid<T> {
    pub fn n_patches(&self) -> usize {
        self.side * self.side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

/// Cuts a standardized `[3, H, W]` tensor into patch vectors.
pub fn patchify<T: Scalar>(pixels: &Tensor<T>, p: usize) -> Result<ImagePatchGrid<T>> {
    let s = pixels.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Dim {
            op: "patchify",
            detail: alloc::format!("expected [3, H, W], got {s:?}"),
        });
    }
    let (h, w) = (s[1], s[2]);
    if p == 0 || h % p != 0 || w % p != 0 || h != w {
        return Err(Error::Dim {
            op: "patchify",
            detail: alloc::format!("square extents required and divisible by {p}, got {h}x{w}"),
        });
    }
    let side = h / p;
    let n = side * side;
    let pdim = p * p * 3;
    let x = pixels.data();
    let mut data = vec![T::ZERO; n * pdim];
    for pr in 0..side {
        for pc in 0..side {
            let patch = pr * side + pc;
            for c in 0..3 {
                for i in 0..p {
                    for j in 0..p {
                        data[patch * pdim + (c * p + i) * p + j] =
                            x[(c * h + (pr * p + i)) * w + (pc * p + j)];
                    }
                }
            }
        }
    }
    Ok(ImagePatchGrid { patch_size: p, side, patches: Tensor::from_vec(&[n, pdim], data)? })
}

/// Exact inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(grid: &ImagePatchGrid<T>) -> Tensor<T> {
    let p = grid.patch_size;
    let side = grid.side;
    let hw = side * p;
    let pdim = grid.patch_dim();
    let mut data = vec![T::ZERO; 3 * hw * hw];
    let src = grid.patches.data();
    for pr in 0..side {
        for pc in 0..side {
            let patch = pr * side + pc;
            for c in 0..3 {
                for i in 0..p {
                    for j in 0..p {
                        data[(c * hw + (pr * p + i)) * hw + (pc * p + j)] =
                            src[patch * pdim + (c * p + i) * p + j];
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[3, hw, hw], data).expect("image shape")
}

/// An image paired with its identifier, as consumed by training and indexing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NamedImage {
    pub id: String,
    pub pixels: PixelImage,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn single_patch_is_whole_image() {
        let mut img = PixelImage::new(2, 2);
        img.set(0, 0, [255, 0, 0]);
        let t = normalize_image::<f64>(&img);
        let grid = patchify(&t, 2).unwrap();
        assert_eq!(grid.n_patches(), 1);
        assert_eq!(grid.patches.data(), t.data());
    }

    #[test]
    fn four_patches_row_major() {
        // 3x(2p)x(2p) with p=1: four 1x1 patches ordered row-major.
        let mut data = alloc::vec![0.0f64; 3 * 2 * 2];
        // red channel carries position markers
        data[0] = 1.0; // (0,0)
        data[1] = 2.0; // (0,1)
        data[2] = 3.0; // (1,0)
        data[3] = 4.0; // (1,1)
        let t = Tensor::from_vec(&[3, 2, 2], data).unwrap();
        let grid = patchify(&t, 1).unwrap();
        assert_eq!(grid.n_patches(), 4);
        for (i, expect) in [1.0, 2.0, 3.0, 4.0].iter().enumerate() {
            assert_eq!(grid.patches.row(i)[0], *expect);
        }
    }

    #[test]
    fn unpatchify_inverts_patchify() {
        let mut rng = Rng::new(11);
        let t = Tensor::<f64>::randn(&[3, 8, 8], 1.0, &mut rng);
        let grid = patchify(&t, 4).unwrap();
        let back = unpatchify(&grid);
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn graph_extract_patches_matches_patchify() {
        let mut rng = Rng::new(12);
        let t = Tensor::<f64>::randn(&[3, 8, 8], 1.0, &mut rng);
        let grid = patchify(&t, 2).unwrap();
        let mut g = crate::graph::Graph::new();
        let node = g.constant(t);
        let patches = g.extract_patches(node, 2).unwrap();
        assert_eq!(g.value(patches).data(), grid.patches.data());
    }

    #[test]
    fn indivisible_extent_rejected() {
        let t = Tensor::<f64>::zeros(&[3, 6, 6]);
        assert!(patchify(&t, 4).is_err());
    }

    #[test]
    fn normalization_range() {
        let mut img = PixelImage::new(1, 1);
        img.set(0, 0, [0, 128, 255]);
        let t = normalize_image::<f64>(&img);
        assert_eq!(t.data()[0], -1.0);
        assert!((t.data()[2] - 1.0).abs() < 1e-12);
    }
}
