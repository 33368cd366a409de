//! Generative stage: multimodal fusion, the gated information-transfer
//! decoder, the generation/preservation losses and beam-search inference.
//!
//! Fusion scores each retrieved image against the context in the shared
//! space, softmax-weights the image hidden states into one attended state,
//! and cross-fuses it with the context through two separately-parameterized
//! blocks. The decoder runs masked self-attention, attends the fused context
//! and image states separately, and combines them through per-position
//! sigmoid gates before the output projection, whose weights are tied to the
//! word-embedding table.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::encoders::{self, Modality, Pooled};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::image::ImagePatchGrid;
use crate::model::ModelBundle;
use crate::nn::{self, Dropout, Linear};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tokenizer::{BOS, EOS, PAD};

/// Epsilon matching the cosine guard of the contrastive stage.
use crate::contrastive::COSINE_EPS;

// ---------------------------------------------------------------------------
// Information preservation (binary cross-entropy over sigmoid cosines)
// ---------------------------------------------------------------------------

/// `-(1/m) * sum_ij [ y_ij ln s(s_ij) + (1-y_ij) ln(1 - s(s_ij)) ]` where
/// `s_ij` is the cosine of context i and image j and the normalization is by
/// the image count `m` alone. `is_match(i, j)` defines the positive pairs; a
/// context row with no positives is permitted.
pub fn preservation_loss<T: Scalar>(
    g: &mut Graph<T>,
    contexts: &[Pooled],
    images: &[Pooled],
    is_match: &dyn Fn(usize, usize) -> bool,
) -> Result<NodeId> {
    let (n, m) = (contexts.len(), images.len());
    if n == 0 || m == 0 {
        return Err(Error::Contract("preservation loss needs contexts and images".into()));
    }
    let eps = T::from_f64(COSINE_EPS);
    let ctx_nodes: Vec<NodeId> = contexts.iter().map(|p| p.node).collect();
    let img_nodes: Vec<NodeId> = images.iter().map(|p| p.node).collect();
    let ctx_rows = g.concat_rows(&ctx_nodes)?;
    let img_rows = g.concat_rows(&img_nodes)?;
    let ctx_n = g.l2_normalize_rows(ctx_rows, eps)?;
    let img_n = g.l2_normalize_rows(img_rows, eps)?;
    let img_t = g.transpose(img_n)?;
    let sims = g.matmul(ctx_n, img_t)?;
    let sig = g.sigmoid(sims);
    let log_pos = g.ln(sig);
    let neg_sig = g.neg(sig);
    let one_minus = g.add_scalar(neg_sig, T::ONE);
    let log_neg = g.ln(one_minus);
    let mut y_pos = vec![T::ZERO; n * m];
    let mut y_neg = vec![T::ZERO; n * m];
    for i in 0..n {
        for j in 0..m {
            if is_match(i, j) {
                y_pos[i * m + j] = T::ONE;
            } else {
                y_neg[i * m + j] = T::ONE;
            }
        }
    }
    let pos_w = Tensor::from_vec(&[n, m], y_pos)?;
    let neg_w = Tensor::from_vec(&[n, m], y_neg)?;
    let pos_term = g.mul_const(log_pos, &pos_w)?;
    let neg_term = g.mul_const(log_neg, &neg_w)?;
    let both = g.add(pos_term, neg_term)?;
    let total = g.sum_all(both);
    Ok(g.mul_scalar(total, T::from_f64(-1.0 / m as f64)))
}

// ---------------------------------------------------------------------------
// Multimodal fusion
// ---------------------------------------------------------------------------

/// Output of image fusion: softmax weights over the k images and the
/// attention-pooled image hidden state.
pub struct FusedImages {
    /// `[k]` simplex weights.
    pub alpha: NodeId,
    /// Same shape as each image hidden state.
    pub h_att: NodeId,
}

/// Softmax-pool `states` by a `[k]` score vector node.
pub fn attention_pool<T: Scalar>(
    g: &mut Graph<T>,
    scores: NodeId,
    states: &[NodeId],
) -> Result<FusedImages> {
    let alpha = g.softmax(scores, 0)?;
    let h_att = g.weighted_sum(alpha, states)?;
    Ok(FusedImages { alpha, h_att })
}

/// Weighs each image by the cosine of its pooled representation against the
/// pooled context (computed in the shared matching space) and pools the
/// image hidden states by the resulting softmax.
pub fn fuse_images<T: Scalar>(
    g: &mut Graph<T>,
    context: &Pooled,
    image_states: &[NodeId],
    image_pooled: &[Pooled],
) -> Result<FusedImages> {
    if image_states.is_empty() || image_states.len() != image_pooled.len() {
        return Err(Error::Contract(format!(
            "fusion needs matching nonempty image lists, got {} states / {} pooled",
            image_states.len(),
            image_pooled.len()
        )));
    }
    let eps = T::from_f64(COSINE_EPS);
    let img_nodes: Vec<NodeId> = image_pooled.iter().map(|p| p.node).collect();
    let img_rows = g.concat_rows(&img_nodes)?;
    let img_n = g.l2_normalize_rows(img_rows, eps)?;
    let ctx_n = g.l2_normalize_rows(context.node, eps)?;
    let ctx_t = g.transpose(ctx_n)?;
    let scores = g.matmul(img_n, ctx_t)?;
    let scores = g.reshape(scores, &[image_states.len()])?;
    attention_pool(g, scores, image_states)
}

/// The two fusion blocks: `h_img_ctx = TB_img(h_att, h_ctx, h_ctx)` and
/// `h_ctx_img = TB_ctx(h_ctx, h_att, h_att)`, with distinct parameters.
pub fn cross_fuse<T: Scalar>(
    g: &mut Graph<T>,
    bundle: &ModelBundle<T>,
    h_att: NodeId,
    h_ctx: NodeId,
    drop: &mut Dropout,
) -> Result<(NodeId, NodeId)> {
    let eps = bundle.layer_norm_eps();
    let h_img_ctx = nn::transformer_block(g, &bundle.mf_block_img, h_att, h_ctx, None, eps, drop)?;
    let h_ctx_img = nn::transformer_block(g, &bundle.mf_block_ctx, h_ctx, h_att, None, eps, drop)?;
    Ok((h_img_ctx, h_ctx_img))
}

// ---------------------------------------------------------------------------
// Gated decoder
// ---------------------------------------------------------------------------

/// `sigmoid(W [h_R; h_XR] + b)`: the per-position information-transfer gate.
pub fn it_gate<T: Scalar>(
    g: &mut Graph<T>,
    gate: &Linear<T>,
    h_r: NodeId,
    h_xr: NodeId,
) -> Result<NodeId> {
    let cat = g.concat_cols(&[h_r, h_xr])?;
    let pre = gate.forward(g, cat)?;
    Ok(g.sigmoid(pre))
}

fn decoder_layer<T: Scalar>(
    g: &mut Graph<T>,
    layer: &crate::model::DecoderLayerParams<T>,
    x: NodeId,
    h_ctx: NodeId,
    h_img: NodeId,
    causal: &Tensor<T>,
    n_heads: usize,
    eps: T,
    use_it: bool,
    drop: &mut Dropout,
) -> Result<NodeId> {
    // Masked self-attention sublayer.
    let xn = layer.norm_self.forward(g, x, eps)?;
    let sa = layer.self_attn.forward(g, xn, xn, Some(causal), n_heads)?;
    let sa = drop.apply(g, sa);
    let h_r = g.add(x, sa)?;
    // Cross attentions over the fused context and image states.
    let qc = layer.norm_ctx.forward(g, h_r, eps)?;
    let kc = layer.norm_ctx.forward(g, h_ctx, eps)?;
    let h_cr = layer.cross_ctx.forward(g, qc, kc, None, n_heads)?;
    let qi = layer.norm_img.forward(g, h_r, eps)?;
    let ki = layer.norm_img.forward(g, h_img, eps)?;
    let h_ir = layer.cross_img.forward(g, qi, ki, None, n_heads)?;
    if use_it {
        let gc = it_gate(g, &layer.gate_ctx, h_r, h_cr)?;
        let gi = it_gate(g, &layer.gate_img, h_r, h_ir)?;
        let gated_c = g.mul(gc, h_cr)?;
        let gated_i = g.mul(gi, h_ir)?;
        let cat = g.concat_cols(&[h_r, gated_c, gated_i])?;
        let combined = layer.fuse.forward(g, cat)?;
        layer.ffn.forward(g, combined)
    } else {
        // Plain cross-attention decoding: residual sums, no gates.
        let t1 = g.add(h_r, h_cr)?;
        let t = g.add(t1, h_ir)?;
        let f = layer.ffn.forward(g, t)?;
        g.add(t, f)
    }
}

/// Decoder hidden states for a response prefix (`<s>` first). Output is
/// `[len, d_model]`; position t-1 predicts token t.
pub fn decoder_hidden<T: Scalar>(
    g: &mut Graph<T>,
    bundle: &ModelBundle<T>,
    prefix: &[u32],
    h_ctx: NodeId,
    h_img: NodeId,
    use_it: bool,
    drop: &mut Dropout,
) -> Result<NodeId> {
    if prefix.is_empty() || prefix[0] != BOS {
        return Err(Error::Contract("decoder prefix must start with the <s> token".into()));
    }
    let cfg = &bundle.cfg;
    if prefix.len() > cfg.max_resp_len {
        return Err(Error::Contract(format!(
            "response prefix length {} exceeds max_resp_len {}",
            prefix.len(),
            cfg.max_resp_len
        )));
    }
    let eps = bundle.layer_norm_eps();
    let emb = bundle.word_emb.embed(g, prefix)?;
    let pos_all = g.param(&bundle.resp_pos);
    let pos = g.slice_rows(pos_all, 0, prefix.len())?;
    let mut x = g.add(emb, pos)?;
    let causal = nn::causal_mask::<T>(prefix.len());
    for layer in &bundle.dec_layers {
        x = decoder_layer(g, layer, x, h_ctx, h_img, &causal, cfg.n_heads, eps, use_it, drop)?;
    }
    Ok(x)
}

/// Vocabulary logits from decoder hidden states; the projection weight is
/// the transposed word-embedding table plus a free bias.
pub fn decoder_logits<T: Scalar>(
    g: &mut Graph<T>,
    bundle: &ModelBundle<T>,
    hidden: NodeId,
) -> Result<NodeId> {
    let table = g.param(&bundle.word_emb.table);
    let wp = g.transpose(table)?;
    let logits = g.matmul(hidden, wp)?;
    let bias = g.param(&bundle.out_bias);
    g.add_bias(logits, bias)
}

/// Probability distribution over the vocabulary for the next token after
/// `prefix`, given the fused states.
pub fn decode_step<T: Scalar>(
    g: &mut Graph<T>,
    bundle: &ModelBundle<T>,
    prefix: &[u32],
    h_ctx: NodeId,
    h_img: NodeId,
    use_it: bool,
) -> Result<NodeId> {
    let hidden =
        decoder_hidden(g, bundle, prefix, h_ctx, h_img, use_it, &mut Dropout::off())?;
    let logits = decoder_logits(g, bundle, hidden)?;
    let last = g.slice_rows(logits, prefix.len() - 1, 1)?;
    let dist = g.softmax(last, 1)?;
    let v = g.value(dist).cols();
    g.reshape(dist, &[v])
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Label-smoothed negative log-likelihood, averaged over non-pad positions:
/// `(1-e) * NLL(gold) + e * mean_v NLL(v)`.
pub fn generation_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: NodeId,
    targets: &[u32],
    smoothing: f64,
) -> Result<NodeId> {
    let (rows, vocab) = (g.value(logits).rows(), g.value(logits).cols());
    if targets.len() != rows {
        return Err(Error::Dim {
            op: "generation_loss",
            detail: format!("{} targets do not match {rows} logit rows", targets.len()),
        });
    }
    let n_real = targets.iter().filter(|&&t| t != PAD).count();
    if n_real == 0 {
        return Err(Error::Contract("generation loss over all-pad targets".into()));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::Vocab { token_id: bad, vocab_size: vocab });
    }
    let lsm = g.log_softmax(logits, 1)?;
    let gold_w = T::from_f64((1.0 - smoothing) / n_real as f64);
    let uniform_w = T::from_f64(smoothing / (vocab as f64 * n_real as f64));
    let mut weights = vec![T::ZERO; rows * vocab];
    for (t, &gold) in targets.iter().enumerate() {
        if gold == PAD {
            continue;
        }
        for v in 0..vocab {
            weights[t * vocab + v] = uniform_w;
        }
        weights[t * vocab + gold as usize] += gold_w;
    }
    let w = Tensor::from_vec(&[rows, vocab], weights)?;
    let weighted = g.mul_const(lsm, &w)?;
    let s = g.sum_all(weighted);
    Ok(g.neg(s))
}

/// Stage-2 objective: `gen + lambda2 * preser`.
pub fn generative_total<T: Scalar>(
    g: &mut Graph<T>,
    gen: NodeId,
    preser: NodeId,
    lambda2: f64,
) -> Result<NodeId> {
    let scaled = g.mul_scalar(preser, T::from_f64(lambda2));
    g.add(gen, scaled)
}

// ---------------------------------------------------------------------------
// Full-example forward
// ---------------------------------------------------------------------------

/// Everything the decoder needs for one example, plus the pooled
/// representations the preservation loss consumes.
pub struct FusedContext {
    pub h_ctx_img: NodeId,
    pub h_img_ctx: NodeId,
    pub ctx_pooled: Pooled,
    pub img_pooled: Vec<Pooled>,
    pub alpha: Option<NodeId>,
    pub truncated: bool,
}

/// Encodes context and images and fuses them. With `use_mf` off, the raw
/// context state and the uniform mean of the raw image states are fed to the
/// decoder instead (the fusion-ablation path).
pub fn encode_and_fuse<T: Scalar>(
    g: &mut Graph<T>,
    bundle: &ModelBundle<T>,
    ctx_ids: &[u32],
    grids: &[ImagePatchGrid<T>],
    use_mf: bool,
    drop: &mut Dropout,
) -> Result<FusedContext> {
    if grids.is_empty() {
        return Err(Error::Contract("at least one image is required".into()));
    }
    let text = encoders::encode_text(g, bundle, ctx_ids, drop)?;
    let ctx_pooled = encoders::pool_and_project(g, bundle, text.node, Modality::Text)?;
    let mut img_states = Vec::with_capacity(grids.len());
    let mut img_pooled = Vec::with_capacity(grids.len());
    for grid in grids {
        let state = encoders::encode_image(g, bundle, grid, drop)?;
        img_pooled.push(encoders::pool_and_project(g, bundle, state, Modality::Image)?);
        img_states.push(state);
    }
    if use_mf {
        let fused = fuse_images(g, &ctx_pooled, &img_states, &img_pooled)?;
        let (h_img_ctx, h_ctx_img) = cross_fuse(g, bundle, fused.h_att, text.node, drop)?;
        Ok(FusedContext {
            h_ctx_img,
            h_img_ctx,
            ctx_pooled,
            img_pooled,
            alpha: Some(fused.alpha),
            truncated: text.truncated,
        })
    } else {
        let k = img_states.len();
        let uniform =
            g.constant(Tensor::filled(&[k], T::from_f64(1.0 / k as f64)));
        let mean_img = g.weighted_sum(uniform, &img_states)?;
        Ok(FusedContext {
            h_ctx_img: text.node,
            h_img_ctx: mean_img,
            ctx_pooled,
            img_pooled,
            alpha: None,
            truncated: text.truncated,
        })
    }
}

/// One tokenized, image-annotated dialogue example ready for the stage-2
/// loss.
#[derive(Debug, Clone)]
pub struct Stage2Item<T> {
    pub ctx_ids: Vec<u32>,
    /// `<s> r_1 .. r_T`
    pub resp_input: Vec<u32>,
    /// `r_1 .. r_T </s>`, padded with `<pad>` where excluded.
    pub resp_target: Vec<u32>,
    pub grids: Vec<ImagePatchGrid<T>>,
}

pub struct Stage2Loss {
    pub total: NodeId,
    pub gen: NodeId,
    pub preser: NodeId,
}

/// Builds the stage-2 loss for a batch: mean per-example generation loss
/// plus the batch-level preservation term, where the positives of context i
/// are exactly its attached images.
pub fn build_stage2_loss<T: Scalar>(
    g: &mut Graph<T>,
    bundle: &ModelBundle<T>,
    batch: &[Stage2Item<T>],
    lambda2: f64,
    smoothing: f64,
    use_mf: bool,
    use_it: bool,
    drop: &mut Dropout,
) -> Result<Stage2Loss> {
    if batch.is_empty() {
        return Err(Error::Contract("stage-2 batch is empty".into()));
    }
    let mut gen_losses = Vec::with_capacity(batch.len());
    let mut ctx_pooled = Vec::with_capacity(batch.len());
    let mut img_pooled = Vec::new();
    let mut owner = Vec::new();
    for (i, item) in batch.iter().enumerate() {
        let fused = encode_and_fuse(g, bundle, &item.ctx_ids, &item.grids, use_mf, drop)?;
        let hidden = decoder_hidden(
            g,
            bundle,
            &item.resp_input,
            fused.h_ctx_img,
            fused.h_img_ctx,
            use_it,
            drop,
        )?;
        let logits = decoder_logits(g, bundle, hidden)?;
        gen_losses.push(generation_loss(g, logits, &item.resp_target, smoothing)?);
        ctx_pooled.push(fused.ctx_pooled);
        for p in fused.img_pooled {
            img_pooled.push(p);
            owner.push(i);
        }
    }
    let mut gen = gen_losses[0];
    for l in &gen_losses[1..] {
        gen = g.add(gen, *l)?;
    }
    let gen = g.mul_scalar(gen, T::from_f64(1.0 / batch.len() as f64));
    let preser = preservation_loss(g, &ctx_pooled, &img_pooled, &|i, j| owner[j] == i)?;
    let total = generative_total(g, gen, preser, lambda2)?;
    Ok(Stage2Loss { total, gen, preser })
}

// ---------------------------------------------------------------------------
// Beam search
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct Hypothesis {
    /// Emitted tokens, including a trailing `</s>` once finished by it.
    emitted: Vec<u32>,
    /// Exact sum of per-step log-softmax values.
    logp: f64,
    finished: bool,
}

/// Standard beam search over `decode_step`. Hypotheses end at `</s>` or
/// `max_len` emitted tokens; finished hypotheses are never extended and keep
/// competing for beam slots. No length normalization; ties break toward the
/// lexicographically smaller token sequence. Returns the best finished
/// hypothesis' tokens with the trailing `</s>` stripped.
pub fn beam_search<T: Scalar>(
    g: &mut Graph<T>,
    bundle: &ModelBundle<T>,
    h_ctx: NodeId,
    h_img: NodeId,
    beam: usize,
    max_len: usize,
    use_it: bool,
) -> Result<Vec<u32>> {
    if beam == 0 {
        return Err(Error::Config("beam size must be at least 1".into()));
    }
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    // The prefix holds <s> plus the emitted tokens.
    let max_len = max_len.min(bundle.cfg.max_resp_len - 1);
    let mut hyps = vec![Hypothesis { emitted: Vec::new(), logp: 0.0, finished: false }];
    for _ in 0..max_len {
        if hyps.iter().all(|h| h.finished) {
            break;
        }
        let mut candidates: Vec<Hypothesis> =
            hyps.iter().filter(|h| h.finished).cloned().collect();
        for h in hyps.iter().filter(|h| !h.finished) {
            let mut prefix = vec![BOS];
            prefix.extend_from_slice(&h.emitted);
            let hidden =
                decoder_hidden(g, bundle, &prefix, h_ctx, h_img, use_it, &mut Dropout::off())?;
            let logits = decoder_logits(g, bundle, hidden)?;
            let last = g.slice_rows(logits, prefix.len() - 1, 1)?;
            let lsm = g.log_softmax(last, 1)?;
            let row: Vec<f64> = g.value(lsm).data().iter().map(|v| v.to_f64()).collect();
            for (v, lp) in row.iter().enumerate() {
                let mut emitted = h.emitted.clone();
                emitted.push(v as u32);
                let finished = v as u32 == EOS || emitted.len() == max_len;
                candidates.push(Hypothesis { emitted, logp: h.logp + lp, finished });
            }
        }
        candidates.sort_by(|a, b| {
            b.logp
                .partial_cmp(&a.logp)
                .expect("finite log-probabilities")
                .then_with(|| a.emitted.cmp(&b.emitted))
        });
        candidates.truncate(beam);
        hyps = candidates;
    }
    hyps.sort_by(|a, b| {
        b.logp
            .partial_cmp(&a.logp)
            .expect("finite log-probabilities")
            .then_with(|| a.emitted.cmp(&b.emitted))
    });
    let best = hyps.iter().find(|h| h.finished).unwrap_or(&hyps[0]);
    let mut tokens = best.emitted.clone();
    if tokens.last() == Some(&EOS) {
        tokens.pop();
    }
    Ok(tokens)
}
