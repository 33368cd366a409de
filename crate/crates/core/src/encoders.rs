//! Image and text encoders plus pooling into the shared matching space.
//!
//! The image encoder is a ViT-style patch transformer: linear patch
//! embedding, a prepended classification token, learned absolute positions
//! and `n_enc_layers` pre-norm blocks. The text encoder embeds token ids
//! (prepended `<s>` is supplied by the tokenizer), adds positions and runs
//! unmasked self-attention; pad positions are hidden from attention keys.
//! Both pool position 0 and project linearly into the `d_shared` space where
//! similarities are computed.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::image::ImagePatchGrid;
use crate::model::ModelBundle;
use crate::nn::{self, Dropout};
use crate::scalar::Scalar;
use crate::tokenizer::PAD;

/// Pooled-and-projected representation in the shared matching space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Image,
    Text,
}

#[derive(Debug, Clone, Copy)]
pub struct Pooled {
    /// `[1, d_shared]` node.
    pub node: NodeId,
    pub modality: Modality,
}

/// Result of encoding text; `truncated` flags inputs cut to `max_text_len`.
#[derive(Debug, Clone, Copy)]
pub struct EncodedText {
    pub node: NodeId,
    pub truncated: bool,
}

/// Runs the image encoder over one patch grid: `[N+1, d_model]` out.
pub fn encode_image<T: Scalar>(
    g: &mut Graph<T>,
    bundle: &ModelBundle<T>,
    grid: &ImagePatchGrid<T>,
    drop: &mut Dropout,
) -> Result<NodeId> {
    let cfg = &bundle.cfg;
    if grid.patch_dim() != cfg.patch_dim() || grid.n_patches() != cfg.n_patches() {
        return Err(Error::Config(format!(
            "patch grid {}x{} (dim {}) does not match model geometry {}x{} (dim {})",
            grid.side,
            grid.side,
            grid.patch_dim(),
            cfg.patches_per_side(),
            cfg.patches_per_side(),
            cfg.patch_dim()
        )));
    }
    let eps = bundle.layer_norm_eps();
    let patches = g.constant(grid.patches.clone());
    let embedded = bundle.patch_embed.forward(g, patches)?;
    let cls = g.param(&bundle.cls_token);
    let seq = g.concat_rows(&[cls, embedded])?;
    let pos_all = g.param(&bundle.img_pos);
    let pos = g.slice_rows(pos_all, 0, grid.n_patches() + 1)?;
    let mut x = g.add(seq, pos)?;
    for block in &bundle.img_blocks {
        x = nn::transformer_block(g, block, x, x, None, eps, drop)?;
    }
    bundle.img_norm.forward(g, x, eps)
}

/// Runs the text encoder over token ids: `[L, d_model]` out. Inputs longer
/// than `max_text_len` are truncated and flagged; `<pad>` positions are
/// masked out of attention so non-pad activations are pad-count invariant.
pub fn encode_text<T: Scalar>(
    g: &mut Graph<T>,
    bundle: &ModelBundle<T>,
    ids: &[u32],
    drop: &mut Dropout,
) -> Result<EncodedText> {
    if ids.is_empty() {
        return Err(Error::Contract("encode_text requires at least one token".into()));
    }
    let cfg = &bundle.cfg;
    let truncated = ids.len() > cfg.max_text_len;
    let ids = if truncated { &ids[..cfg.max_text_len] } else { ids };
    let eps = bundle.layer_norm_eps();
    let emb = bundle.word_emb.embed(g, ids)?;
    let pos_all = g.param(&bundle.text_pos);
    let pos = g.slice_rows(pos_all, 0, ids.len())?;
    let mut x = g.add(emb, pos)?;
    let pad_flags: Vec<bool> = ids.iter().map(|&i| i == PAD).collect();
    let mask = if pad_flags.iter().any(|&p| p) {
        Some(nn::padding_mask::<T>(ids.len(), &pad_flags))
    } else {
        None
    };
    for block in &bundle.text_blocks {
        x = nn::transformer_block(g, block, x, x, mask.as_ref(), eps, drop)?;
    }
    let node = bundle.text_norm.forward(g, x, eps)?;
    Ok(EncodedText { node, truncated })
}

/// Takes the first-token row of a hidden state and projects it into the
/// shared space with the modality's linear map.
pub fn pool_and_project<T: Scalar>(
    g: &mut Graph<T>,
    bundle: &ModelBundle<T>,
    state: NodeId,
    modality: Modality,
) -> Result<Pooled> {
    let first = g.slice_rows(state, 0, 1)?;
    let proj = match modality {
        Modality::Image => &bundle.proj_img,
        Modality::Text => &bundle.proj_txt,
    };
    let node = proj.forward(g, first)?;
    Ok(Pooled { node, modality })
}
