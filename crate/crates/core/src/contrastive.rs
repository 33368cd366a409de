//! Contrastive pre-training stage: text-image matching and text-assisted
//! masked image reconstruction.
//!
//! The matching side computes a batch-by-batch cosine similarity matrix in
//! the shared space and optimizes a symmetric InfoNCE over in-batch
//! negatives, sharpened by a learnable temperature stored as log-tau. The
//! reconstruction side zeroes whole patch blocks at the pixel level,
//! re-encodes the masked image, cross-attends to the (frozen) text state and
//! predicts the original patch pixels through a 1x1 conv + pixel-shuffle
//! head, scored by mean absolute error over masked patches only.

use alloc::vec;
use alloc::vec::Vec;

use crate::encoders::{self, Modality, Pooled};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::image::ImagePatchGrid;
use crate::model::ModelBundle;
use crate::nn::{self, Dropout};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Epsilon guarding zero-norm denominators in cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

/// Cosine similarity with an eps-guarded denominator (`max(norm, eps)` per
/// vector, matching the in-graph normalization). The flag reports a
/// degenerate (zero-norm) input.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> (f64, bool) {
    debug_assert_eq!(a.len(), b.len());
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let na = libm::sqrt(na).max(COSINE_EPS);
    let nb = libm::sqrt(nb).max(COSINE_EPS);
    let degenerate = na <= COSINE_EPS || nb <= COSINE_EPS;
    (dot / (na * nb), degenerate)
}

/// Batch similarity matrix `s[i][j] = cos(image_i, text_j)` built in-graph
/// from pooled representations.
pub struct SimilarityMatrix {
    /// `[batch, batch]` node of cosines.
    pub node: NodeId,
    pub batch: usize,
}

pub fn similarity_matrix<T: Scalar>(
    g: &mut Graph<T>,
    images: &[Pooled],
    texts: &[Pooled],
) -> Result<SimilarityMatrix> {
    if images.len() != texts.len() || images.is_empty() {
        return Err(Error::Contract(alloc::format!(
            "similarity matrix needs equal nonempty batches, got {} images / {} texts",
            images.len(),
            texts.len()
        )));
    }
    let eps = T::from_f64(COSINE_EPS);
    let img_nodes: Vec<NodeId> = images.iter().map(|p| p.node).collect();
    let txt_nodes: Vec<NodeId> = texts.iter().map(|p| p.node).collect();
    let img_rows = g.concat_rows(&img_nodes)?;
    let txt_rows = g.concat_rows(&txt_nodes)?;
    let img_n = g.l2_normalize_rows(img_rows, eps)?;
    let txt_n = g.l2_normalize_rows(txt_rows, eps)?;
    let txt_t = g.transpose(txt_n)?;
    let node = g.matmul(img_n, txt_t)?;
    Ok(SimilarityMatrix { node, batch: images.len() })
}

/// Symmetric InfoNCE (in-batch negatives, positives on the diagonal):
/// the two directional cross-entropies are each averaged over the batch and
/// summed. `log_tau` is the learnable log-temperature node.
pub fn clip_loss<T: Scalar>(
    g: &mut Graph<T>,
    sims: &SimilarityMatrix,
    log_tau: NodeId,
) -> Result<NodeId> {
    if sims.batch < 2 {
        return Err(Error::Contract(alloc::format!(
            "clip loss needs at least 2 pairs for in-batch negatives, got {}",
            sims.batch
        )));
    }
    let neg_log_tau = g.neg(log_tau);
    let inv_tau = g.exp(neg_log_tau);
    let scaled = g.scale_by(sims.node, inv_tau)?;
    let row_lsm = g.log_softmax(scaled, 1)?;
    let row_diag = g.select_diag(row_lsm)?;
    let scaled_t = g.transpose(scaled)?;
    let col_lsm = g.log_softmax(scaled_t, 1)?;
    let col_diag = g.select_diag(col_lsm)?;
    let row_sum = g.sum_all(row_diag);
    let col_sum = g.sum_all(col_diag);
    let total = g.add(row_sum, col_sum)?;
    Ok(g.mul_scalar(total, T::from_f64(-1.0 / sims.batch as f64)))
}

// ---------------------------------------------------------------------------
// Masking
// ---------------------------------------------------------------------------

/// Block mask over a square patch grid; `keep[i]` is false for masked
/// patches, and masked patches always form whole `block_size^2` blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSpec {
    pub keep: Vec<bool>,
    pub block_size: usize,
    pub n_masked: usize,
}

impl MaskSpec {
    pub fn n_patches(&self) -> usize {
        self.keep.len()
    }

    /// All-kept mask (no reconstruction targets).
    pub fn all_kept(n_patches: usize, block_size: usize) -> Self {
        MaskSpec { keep: vec![true; n_patches], block_size, n_masked: 0 }
    }
}

/// Samples `round(ratio * n_blocks)` whole blocks (round half up), uniformly
/// without replacement.
pub fn sample_mask(
    n_patches_per_side: usize,
    block_size: usize,
    ratio: f64,
    rng: &mut Rng,
) -> Result<MaskSpec> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(alloc::format!("mask ratio must be in [0, 1), got {ratio}")));
    }
    if block_size == 0 || n_patches_per_side % block_size != 0 {
        return Err(Error::Config(alloc::format!(
            "grid side {n_patches_per_side} not divisible into {block_size}x{block_size} blocks"
        )));
    }
    let blocks_per_side = n_patches_per_side / block_size;
    let n_blocks = blocks_per_side * blocks_per_side;
    let n_mask_blocks = libm::floor(ratio * n_blocks as f64 + 0.5) as usize;
    let chosen = rng.sample_distinct(n_blocks, n_mask_blocks);
    let mut keep = vec![true; n_patches_per_side * n_patches_per_side];
    for &blk in &chosen {
        let br = blk / blocks_per_side;
        let bc = blk % blocks_per_side;
        for i in 0..block_size {
            for j in 0..block_size {
                let r = br * block_size + i;
                let c = bc * block_size + j;
                keep[r * n_patches_per_side + c] = false;
            }
        }
    }
    let n_masked = keep.iter().filter(|k| !**k).count();
    Ok(MaskSpec { keep, block_size, n_masked })
}

/// Zeroes the pixels of masked patches; kept patches are bit-identical.
pub fn apply_mask<T: Scalar>(grid: &ImagePatchGrid<T>, mask: &MaskSpec) -> Result<ImagePatchGrid<T>> {
    if mask.n_patches() != grid.n_patches() {
        return Err(Error::Dim {
            op: "apply_mask",
            detail: alloc::format!(
                "mask length {} does not match {} patches",
                mask.n_patches(),
                grid.n_patches()
            ),
        });
    }
    let mut out = grid.clone();
    let pdim = grid.patches.cols();
    let data = out.patches.data_mut();
    for (p, kept) in mask.keep.iter().enumerate() {
        if !*kept {
            for v in &mut data[p * pdim..(p + 1) * pdim] {
                *v = T::ZERO;
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Reconstruction
// ---------------------------------------------------------------------------

/// Cross-attends the masked image state over the text state and maps each
/// patch position to pixel predictions through the 1x1 conv + pixel-shuffle
/// head. Output is `[N, p^2*3]`, class token excluded.
pub fn reconstruct_masked<T: Scalar>(
    g: &mut Graph<T>,
    bundle: &ModelBundle<T>,
    masked_state: NodeId,
    text_state: NodeId,
    drop: &mut Dropout,
) -> Result<NodeId> {
    let eps = bundle.layer_norm_eps();
    let fused =
        nn::transformer_block(g, &bundle.tamim_block, masked_state, text_state, None, eps, drop)?;
    let n = bundle.cfg.n_patches();
    let side = bundle.cfg.patches_per_side();
    let d = bundle.cfg.d_model;
    let body = g.slice_rows(fused, 1, n)?;
    let body_t = g.transpose(body)?;
    let feature_map = g.reshape(body_t, &[d, side, side])?;
    let kernel = g.param(&bundle.mip_kernel);
    let conv = g.conv2d(feature_map, kernel)?;
    let pixels = g.pixel_shuffle(conv, bundle.cfg.patch_size)?;
    g.extract_patches(pixels, bundle.cfg.patch_size)
}

/// Mean absolute error over masked patches only: per masked patch the mean
/// |v - v_hat| over its pixels, averaged over the `n_masked` patches.
/// Returns the loss node plus a degeneracy flag for `n_masked == 0`.
pub fn recon_loss<T: Scalar>(
    g: &mut Graph<T>,
    target: &ImagePatchGrid<T>,
    predicted: NodeId,
    mask: &MaskSpec,
) -> Result<(NodeId, bool)> {
    if g.value(predicted).shape() != target.patches.shape() {
        return Err(Error::Dim {
            op: "recon_loss",
            detail: alloc::format!(
                "predictions {:?} do not match targets {:?}",
                g.value(predicted).shape(),
                target.patches.shape()
            ),
        });
    }
    if mask.n_patches() != target.n_patches() {
        return Err(Error::Dim {
            op: "recon_loss",
            detail: alloc::format!(
                "mask length {} does not match {} patches",
                mask.n_patches(),
                target.n_patches()
            ),
        });
    }
    if mask.n_masked == 0 {
        let zero = g.constant(Tensor::scalar(T::ZERO));
        return Ok((zero, true));
    }
    let pdim = target.patches.cols();
    let neg_target: Vec<T> = target.patches.data().iter().map(|v| -*v).collect();
    let neg_target = Tensor::from_vec(target.patches.shape(), neg_target)?;
    let diff = g.add_const(predicted, &neg_target)?;
    let absdiff = g.abs(diff);
    let w = T::from_f64(1.0 / (mask.n_masked as f64 * pdim as f64));
    let mut weights = vec![T::ZERO; mask.n_patches() * pdim];
    for (p, kept) in mask.keep.iter().enumerate() {
        if !*kept {
            for v in &mut weights[p * pdim..(p + 1) * pdim] {
                *v = w;
            }
        }
    }
    let weights = Tensor::from_vec(target.patches.shape(), weights)?;
    let weighted = g.mul_const(absdiff, &weights)?;
    Ok((g.sum_all(weighted), false))
}

/// Stage-1 objective: `match + lambda1 * recon`.
pub fn contrastive_total<T: Scalar>(
    g: &mut Graph<T>,
    matching: NodeId,
    recon: NodeId,
    lambda1: f64,
) -> Result<NodeId> {
    let scaled = g.mul_scalar(recon, T::from_f64(lambda1));
    g.add(matching, scaled)
}

// ---------------------------------------------------------------------------
// Batch builder
// ---------------------------------------------------------------------------

/// One text-image training pair, already tokenized and patchified.
#[derive(Debug, Clone)]
pub struct PairItem<T> {
    pub grid: ImagePatchGrid<T>,
    pub caption_ids: Vec<u32>,
}

/// Loss nodes of one stage-1 batch.
pub struct Stage1Loss {
    pub total: NodeId,
    pub matching: NodeId,
    pub recon: NodeId,
}

/// Builds the full stage-1 loss for a batch: TIM matching over in-batch
/// negatives plus the masked-reconstruction term (batch mean). `mask_rng`
/// must be a per-step stream. Toggling off `tim`/`tamim` zeroes the
/// corresponding term (the ablation axes).
#[allow(clippy::too_many_arguments)]
pub fn build_stage1_loss<T: Scalar>(
    g: &mut Graph<T>,
    bundle: &ModelBundle<T>,
    batch: &[PairItem<T>],
    lambda1: f64,
    mask_ratio: f64,
    mask_block: usize,
    use_tim: bool,
    use_tamim: bool,
    mask_rng: &mut Rng,
    drop: &mut Dropout,
) -> Result<Stage1Loss> {
    if batch.is_empty() {
        return Err(Error::Contract("stage-1 batch is empty".into()));
    }
    let mut img_pooled = Vec::with_capacity(batch.len());
    let mut txt_pooled = Vec::with_capacity(batch.len());
    let mut text_states = Vec::with_capacity(batch.len());
    for item in batch {
        let img_state = encoders::encode_image(g, bundle, &item.grid, drop)?;
        let txt_state = encoders::encode_text(g, bundle, &item.caption_ids, drop)?;
        img_pooled.push(encoders::pool_and_project(g, bundle, img_state, Modality::Image)?);
        txt_pooled.push(encoders::pool_and_project(g, bundle, txt_state.node, Modality::Text)?);
        text_states.push(txt_state.node);
    }

    let matching = if use_tim && batch.len() >= 2 {
        let sims = similarity_matrix(g, &img_pooled, &txt_pooled)?;
        let log_tau = g.param(&bundle.log_tau);
        clip_loss(g, &sims, log_tau)?
    } else {
        g.constant(Tensor::scalar(T::ZERO))
    };

    let recon = if use_tamim {
        let mut per_pair = Vec::with_capacity(batch.len());
        for (item, txt_state) in batch.iter().zip(&text_states) {
            let mask =
                sample_mask(item.grid.side, mask_block.min(item.grid.side), mask_ratio, mask_rng)?;
            let masked = apply_mask(&item.grid, &mask)?;
            let masked_state = encoders::encode_image(g, bundle, &masked, drop)?;
            let predicted = reconstruct_masked(g, bundle, masked_state, *txt_state, drop)?;
            let (loss, _) = recon_loss(g, &item.grid, predicted, &mask)?;
            per_pair.push(loss);
        }
        let mut acc = per_pair[0];
        for l in &per_pair[1..] {
            acc = g.add(acc, *l)?;
        }
        g.mul_scalar(acc, T::from_f64(1.0 / batch.len() as f64))
    } else {
        g.constant(Tensor::scalar(T::ZERO))
    };

    let total = contrastive_total(g, matching, recon, lambda1)?;
    Ok(Stage1Loss { total, matching, recon })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    #[test]
    fn cosine_hand_cases() {
        assert!((cosine_similarity(&[2.0, 1.0], &[2.0, 1.0]).0 - 1.0).abs() < 1e-7);
        assert!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).0.abs() < 1e-12);
        let (c, flag) = cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]);
        assert!((c - 0.707107).abs() < 1e-6);
        assert!(!flag);
        let (z, degenerate) = cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]);
        assert!(degenerate);
        assert_eq!(z, 0.0);
    }

    #[test]
    fn cosine_scale_invariance() {
        let a = [0.3, -1.2, 0.7];
        let b = [1.5, 0.2, -0.4];
        let scaled_a: Vec<f64> = a.iter().map(|v| v * 17.0).collect();
        let scaled_b: Vec<f64> = b.iter().map(|v| v * 0.003).collect();
        let (c1, _) = cosine_similarity(&a, &b);
        let (c2, _) = cosine_similarity(&scaled_a, &scaled_b);
        assert!((c1 - c2).abs() < 1e-6);
    }

    fn pooled_batch(
        g: &mut Graph<f64>,
        rows: &[&[f64]],
        modality: Modality,
    ) -> Vec<Pooled> {
        rows.iter()
            .map(|r| Pooled {
                node: g.constant(Tensor::from_vec(&[1, r.len()], r.to_vec()).unwrap()),
                modality,
            })
            .collect()
    }

    #[test]
    fn clip_loss_all_equal_is_two_ln_two() {
        let mut g = Graph::new();
        let imgs = pooled_batch(&mut g, &[&[1.0, 0.0], &[1.0, 0.0]], Modality::Image);
        let txts = pooled_batch(&mut g, &[&[1.0, 0.0], &[1.0, 0.0]], Modality::Text);
        let sims = similarity_matrix(&mut g, &imgs, &txts).unwrap();
        let log_tau = g.constant(Tensor::scalar(0.0)); // tau = 1
        let loss = clip_loss(&mut g, &sims, log_tau).unwrap();
        assert!((g.value(loss).item() - 2.0 * 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn clip_loss_peaked_diagonal_vanishes() {
        // Inject a similarity matrix with diag s/tau = 30, off-diag -30.
        let mut g = Graph::new();
        let s = Tensor::from_vec(&[2, 2], vec![30.0, -30.0, -30.0, 30.0]).unwrap();
        let node = g.constant(s);
        let sims = SimilarityMatrix { node, batch: 2 };
        let log_tau = g.constant(Tensor::scalar(0.0));
        let loss = clip_loss(&mut g, &sims, log_tau).unwrap();
        assert!(g.value(loss).item() < 1e-3);
    }

    #[test]
    fn clip_loss_permutation_invariant() {
        let rows_i: [&[f64]; 3] = [&[1.0, 0.2], &[-0.3, 0.9], &[0.5, 0.5]];
        let rows_t: [&[f64]; 3] = [&[0.9, 0.1], &[-0.2, 1.0], &[0.4, 0.6]];
        let eval = |perm: [usize; 3]| {
            let mut g = Graph::new();
            let imgs =
                pooled_batch(&mut g, &[rows_i[perm[0]], rows_i[perm[1]], rows_i[perm[2]]], Modality::Image);
            let txts =
                pooled_batch(&mut g, &[rows_t[perm[0]], rows_t[perm[1]], rows_t[perm[2]]], Modality::Text);
            let sims = similarity_matrix(&mut g, &imgs, &txts).unwrap();
            let log_tau = g.constant(Tensor::scalar(0.07f64.ln()));
            let loss = clip_loss(&mut g, &sims, log_tau).unwrap();
            g.value(loss).item()
        };
        let a = eval([0, 1, 2]);
        let b = eval([2, 0, 1]);
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }

    #[test]
    fn clip_loss_needs_two_pairs() {
        let mut g = Graph::new();
        let node = g.constant(Tensor::scalar(1.0).reshaped(&[1, 1]).unwrap());
        let sims = SimilarityMatrix { node, batch: 1 };
        let log_tau = g.constant(Tensor::scalar(0.0));
        assert!(matches!(clip_loss(&mut g, &sims, log_tau), Err(Error::Contract(_))));
    }

    #[test]
    fn similarity_entries_bounded() {
        let mut rng = Rng::new(3);
        let mut g = Graph::<f64>::new();
        let imgs: Vec<Pooled> = (0..4)
            .map(|_| Pooled {
                node: g.constant(Tensor::randn(&[1, 6], 3.0, &mut rng)),
                modality: Modality::Image,
            })
            .collect();
        let txts: Vec<Pooled> = (0..4)
            .map(|_| Pooled {
                node: g.constant(Tensor::randn(&[1, 6], 3.0, &mut rng)),
                modality: Modality::Text,
            })
            .collect();
        let sims = similarity_matrix(&mut g, &imgs, &txts).unwrap();
        for v in g.value(sims.node).data() {
            assert!(*v >= -1.0 - 1e-6 && *v <= 1.0 + 1e-6);
        }
    }

    #[test]
    fn mask_ratio_zero_keeps_all() {
        let mut rng = Rng::new(0);
        let m = sample_mask(4, 2, 0.0, &mut rng).unwrap();
        assert_eq!(m.n_masked, 0);
        assert!(m.keep.iter().all(|k| *k));
    }

    #[test]
    fn mask_rounds_half_up() {
        // 4x4 patches in 2x2 blocks -> 4 blocks; round(0.4 * 4) = 2.
        let mut rng = Rng::new(0);
        let m = sample_mask(4, 2, 0.4, &mut rng).unwrap();
        assert_eq!(m.n_masked, 2 * 4);
    }

    #[test]
    fn mask_is_whole_blocks() {
        let mut rng = Rng::new(7);
        for _ in 0..50 {
            let m = sample_mask(6, 2, 0.4, &mut rng).unwrap();
            for br in 0..3 {
                for bc in 0..3 {
                    let first = !m.keep[(br * 2) * 6 + bc * 2];
                    for i in 0..2 {
                        for j in 0..2 {
                            assert_eq!(!m.keep[(br * 2 + i) * 6 + (bc * 2 + j)], first);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn mask_ratio_out_of_range_rejected() {
        let mut rng = Rng::new(0);
        assert!(sample_mask(4, 2, 1.0, &mut rng).is_err());
        assert!(sample_mask(4, 2, -0.1, &mut rng).is_err());
    }

    #[test]
    fn apply_mask_zeroes_only_masked() {
        let mut rng = Rng::new(1);
        let pixels = Tensor::<f64>::randn(&[3, 8, 8], 1.0, &mut rng);
        let grid = crate::image::patchify(&pixels, 2).unwrap();
        let mask = sample_mask(4, 2, 0.4, &mut rng).unwrap();
        let masked = apply_mask(&grid, &mask).unwrap();
        let pdim = grid.patch_dim();
        for (p, kept) in mask.keep.iter().enumerate() {
            let row = &masked.patches.data()[p * pdim..(p + 1) * pdim];
            if *kept {
                assert_eq!(row, &grid.patches.data()[p * pdim..(p + 1) * pdim]);
            } else {
                assert!(row.iter().all(|v| *v == 0.0));
            }
        }

        let all = MaskSpec::all_kept(16, 2);
        let same = apply_mask(&grid, &all).unwrap();
        assert_eq!(same.patches.data(), grid.patches.data());
    }

    #[test]
    fn recon_loss_hand_cases() {
        // Identical prediction -> 0.
        let grid = ImagePatchGrid {
            patch_size: 1,
            side: 1,
            patches: Tensor::from_vec(&[1, 3], vec![0.1, 0.2, 0.3]).unwrap(),
        };
        let mask = MaskSpec { keep: vec![false], block_size: 1, n_masked: 1 };
        let mut g = Graph::new();
        let pred = g.constant(grid.patches.clone());
        let (loss, flag) = recon_loss(&mut g, &grid, pred, &mask).unwrap();
        assert!(!flag);
        assert_eq!(g.value(loss).item(), 0.0);

        // Constant offset delta on the masked patch -> delta.
        let mut g2 = Graph::new();
        let shifted: Vec<f64> = grid.patches.data().iter().map(|v| v + 0.25).collect();
        let pred2 = g2.constant(Tensor::from_vec(&[1, 3], shifted).unwrap());
        let (loss2, _) = recon_loss(&mut g2, &grid, pred2, &mask).unwrap();
        assert!((g2.value(loss2).item() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn recon_loss_two_element_patch_case() {
        // One masked patch, v = [0, 1], v_hat = [1, 1] -> mean |diff| = 0.5.
        let grid = ImagePatchGrid {
            patch_size: 1,
            side: 1,
            patches: Tensor::from_vec(&[1, 2], vec![0.0, 1.0]).unwrap(),
        };
        let mask = MaskSpec { keep: vec![false], block_size: 1, n_masked: 1 };
        let mut g = Graph::new();
        let pred = g.constant(Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap());
        let (loss, _) = recon_loss(&mut g, &grid, pred, &mask).unwrap();
        assert!((g.value(loss).item() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn recon_loss_ignores_unmasked_positions() {
        let mut rng = Rng::new(4);
        let pixels = Tensor::<f64>::randn(&[3, 4, 4], 1.0, &mut rng);
        let grid = crate::image::patchify(&pixels, 2).unwrap();
        let mask = MaskSpec { keep: vec![true, false, true, true], block_size: 1, n_masked: 1 };
        let base = Tensor::<f64>::randn(grid.patches.shape(), 1.0, &mut rng);
        let mut perturbed = base.clone();
        // Perturb an unmasked patch row (index 0).
        perturbed.data_mut()[0] += 42.0;

        let mut g1 = Graph::<f64>::new();
        let p1 = g1.constant(base);
        let (l1, _) = recon_loss(&mut g1, &grid, p1, &mask).unwrap();
        let mut g2 = Graph::new();
        let p2 = g2.constant(perturbed);
        let (l2, _) = recon_loss(&mut g2, &grid, p2, &mask).unwrap();
        assert_eq!(g1.value(l1).item().to_bits(), g2.value(l2).item().to_bits());
    }

    #[test]
    fn recon_loss_empty_mask_flagged_zero() {
        let grid = ImagePatchGrid {
            patch_size: 1,
            side: 1,
            patches: Tensor::from_vec(&[1, 3], vec![0.1, 0.2, 0.3]).unwrap(),
        };
        let mask = MaskSpec::all_kept(1, 1);
        let mut g = Graph::new();
        let pred = g.constant(Tensor::from_vec(&[1, 3], vec![9.0, 9.0, 9.0]).unwrap());
        let (loss, degenerate) = recon_loss(&mut g, &grid, pred, &mask).unwrap();
        assert!(degenerate);
        assert_eq!(g.value(loss).item(), 0.0);
    }

    #[test]
    fn total_combination_arithmetic() {
        let mut g = Graph::new();
        let m = g.constant(Tensor::scalar(1.0));
        let r = g.constant(Tensor::scalar(0.0));
        let t = contrastive_total(&mut g, m, r, 0.2).unwrap();
        assert_eq!(g.value(t).item(), 1.0);

        let m2 = g.constant(Tensor::scalar(0.0));
        let r2 = g.constant(Tensor::scalar(2.0));
        let t2 = contrastive_total(&mut g, m2, r2, 0.2).unwrap();
        assert!((g.value(t2).item() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_depends_on_text() {
        let cfg = ModelConfig {
            d_model: 8,
            d_shared: 4,
            n_heads: 2,
            d_ff: 16,
            n_enc_layers: 1,
            n_dec_layers: 1,
            image_size: 8,
            patch_size: 4,
            max_text_len: 8,
            max_resp_len: 8,
            ..Default::default()
        };
        let bundle = ModelBundle::<f64>::new(&cfg, 12, 0.07, &mut Rng::new(0)).unwrap();
        let mut rng = Rng::new(5);
        let pixels = Tensor::<f64>::randn(&[3, 8, 8], 0.5, &mut rng);
        let grid = crate::image::patchify(&pixels, 4).unwrap();
        let mask = sample_mask(2, 2, 0.4, &mut rng).unwrap();
        let masked = apply_mask(&grid, &mask).unwrap();

        let mut g = Graph::new();
        let mut drop = Dropout::off();
        let masked_state = encoders::encode_image(&mut g, &bundle, &masked, &mut drop).unwrap();
        let t1 = encoders::encode_text(&mut g, &bundle, &[1, 5, 6, 2], &mut drop).unwrap();
        let t2 = encoders::encode_text(&mut g, &bundle, &[1, 7, 8, 2], &mut drop).unwrap();
        let p1 = reconstruct_masked(&mut g, &bundle, masked_state, t1.node, &mut drop).unwrap();
        let p2 = reconstruct_masked(&mut g, &bundle, masked_state, t2.node, &mut drop).unwrap();
        assert_eq!(g.value(p1).shape(), &[4, 48]);
        assert_ne!(g.value(p1).data(), g.value(p2).data());
    }

    #[test]
    fn stage1_batch_loss_builds_and_backprops() {
        let cfg = ModelConfig {
            d_model: 8,
            d_shared: 4,
            n_heads: 2,
            d_ff: 16,
            n_enc_layers: 1,
            n_dec_layers: 1,
            image_size: 8,
            patch_size: 4,
            max_text_len: 8,
            max_resp_len: 8,
            ..Default::default()
        };
        let mut bundle = ModelBundle::<f64>::new(&cfg, 12, 0.07, &mut Rng::new(0)).unwrap();
        bundle.apply_stage_freeze(crate::model::Stage::Contrastive);
        let mut rng = Rng::new(9);
        let batch: Vec<PairItem<f64>> = (0..3)
            .map(|i| {
                let pixels = Tensor::<f64>::randn(&[3, 8, 8], 0.5, &mut rng);
                PairItem {
                    grid: crate::image::patchify(&pixels, 4).unwrap(),
                    caption_ids: vec![1, 5 + i as u32, 2],
                }
            })
            .collect();
        let mut g = Graph::new();
        let mut mask_rng = Rng::new(1);
        let losses = build_stage1_loss(
            &mut g,
            &bundle,
            &batch,
            0.2,
            0.4,
            1,
            true,
            true,
            &mut mask_rng,
            &mut Dropout::off(),
        )
        .unwrap();
        let total = g.value(losses.total).item();
        let parts = g.value(losses.matching).item() + 0.2 * g.value(losses.recon).item();
        assert!((total - parts).abs() < 1e-12);
        g.backward(losses.total).unwrap();
        // Trainable stage-1 params get gradients; frozen text params do not.
        assert!(g.param_grad(&bundle.log_tau).is_some());
        assert!(g.param_grad(&bundle.mip_kernel).is_some());
        assert!(g.param_grad(&bundle.word_emb.table).is_none());
    }
}
