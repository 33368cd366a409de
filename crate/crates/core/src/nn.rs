//! Reusable neural components: multi-head attention, pre-norm transformer
//! blocks, embedding tables, linear layers and dropout plumbing.
//!
//! Parameter structs own plain [`Tensor`]s; forward builders intern them into
//! the active [`Graph`] via [`Graph::param`], so the same struct drives both
//! training and inference passes.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Additive mask value for disallowed attention positions. Finite (rather
/// than -inf) so masked lanes stay NaN-free under both precisions; after the
/// max-subtraction in softmax its weight underflows to exactly zero.
pub const MASKED_LOGIT: f64 = -1e9;

/// Init scale for projections and embeddings.
pub const INIT_STD: f64 = 0.02;

/// Visitor over named parameters, used by the optimizer, freeze maps,
/// checkpointing and gradient checks.
pub trait ParamGroup<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>));
}

// ---------------------------------------------------------------------------
// Linear / norm / embedding
// ---------------------------------------------------------------------------

/// Dense layer storing `weight: [in, out]` so that `y = x @ w + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        Linear {
            weight: Tensor::randn(&[d_in, d_out], INIT_STD, rng).param(),
            bias: Some(Tensor::zeros(&[d_out]).param()),
        }
    }

    pub fn new_no_bias(d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        Linear { weight: Tensor::randn(&[d_in, d_out], INIT_STD, rng).param(), bias: None }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        let w = g.param(&self.weight);
        let y = g.matmul(x, w)?;
        match &self.bias {
            Some(b) => {
                let bn = g.param(b);
                g.add_bias(y, bn)
            }
            None => Ok(y),
        }
    }
}

impl<T: Scalar> ParamGroup<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(format!("{prefix}.weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(format!("{prefix}.bias"), b);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(format!("{prefix}.bias"), b);
        }
    }
}

/// Layer-norm gain/bias pair.
#[derive(Debug, Clone, PartialEq)]
pub struct NormParams<T> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> NormParams<T> {
    pub fn identity(d: usize) -> Self {
        NormParams {
            gain: Tensor::filled(&[d], T::ONE).param(),
            bias: Tensor::zeros(&[d]).param(),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: NodeId, eps: T) -> Result<NodeId> {
        let gain = g.param(&self.gain);
        let bias = g.param(&self.bias);
        g.layer_norm(x, gain, bias, eps)
    }
}

impl<T: Scalar> ParamGroup<T> for NormParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(format!("{prefix}.gain"), &self.gain);
        f(format!("{prefix}.bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(format!("{prefix}.gain"), &mut self.gain);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

/// Token-id to row lookup table; the same storage backs the decoder's output
/// projection (weight tying).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable<T> {
    pub table: Tensor<T>,
}

impl<T: Scalar> EmbeddingTable<T> {
    pub fn new(vocab_size: usize, d_model: usize, rng: &mut Rng) -> Self {
        EmbeddingTable { table: Tensor::randn(&[vocab_size, d_model], INIT_STD, rng).param() }
    }

    pub fn vocab_size(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn d_model(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn embed(&self, g: &mut Graph<T>, ids: &[u32]) -> Result<NodeId> {
        let t = g.param(&self.table);
        g.gather_rows(t, ids)
    }
}

impl<T: Scalar> ParamGroup<T> for EmbeddingTable<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(format!("{prefix}.table"), &self.table);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(format!("{prefix}.table"), &mut self.table);
    }
}

/// Pixel-shuffle upscale factor; input channels must divide by `r^2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelShuffleConfig {
    pub upscale_factor: usize,
}

// ---------------------------------------------------------------------------
// Dropout plumbing
// ---------------------------------------------------------------------------

/// Carries the dropout rate and its RNG stream through forward builders.
/// `Dropout::off()` (rate 0) is the inference path.
pub struct Dropout {
    pub rate: f64,
    rng: Rng,
}

impl Dropout {
    pub fn new(rate: f64, rng: Rng) -> Self {
        Dropout { rate, rng }
    }

    pub fn off() -> Self {
        Dropout { rate: 0.0, rng: Rng::new(0) }
    }

    pub fn apply<T: Scalar>(&mut self, g: &mut Graph<T>, x: NodeId) -> NodeId {
        g.dropout(x, self.rate, &mut self.rng)
    }
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

/// Scaled dot-product attention over pre-projected `q`, `k`, `v`, split into
/// `n_heads` along the feature axis. Masked positions receive
/// [`MASKED_LOGIT`] before softmax. No output projection here; blocks apply
/// their own.
pub fn attention<T: Scalar>(
    g: &mut Graph<T>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    mask: Option<&Tensor<T>>,
    n_heads: usize,
) -> Result<NodeId> {
    let d = g.value(q).cols();
    let (lq, lk) = (g.value(q).rows(), g.value(k).rows());
    if g.value(k).cols() != d || g.value(v).cols() != d || g.value(v).rows() != lk {
        return Err(Error::Dim {
            op: "attention",
            detail: format!(
                "inconsistent q {:?} / k {:?} / v {:?}",
                g.value(q).shape(),
                g.value(k).shape(),
                g.value(v).shape()
            ),
        });
    }
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::Config(format!("d_model {d} not divisible by {n_heads} heads")));
    }
    if let Some(m) = mask {
        if m.shape() != [lq, lk] {
            return Err(Error::Dim {
                op: "attention",
                detail: format!("mask {:?} does not match scores [{lq}, {lk}]", m.shape()),
            });
        }
    }
    let head_dim = d / n_heads;
    let scale = T::from_f64(1.0 / (head_dim as f64).sqrt());
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.slice_cols(q, h * head_dim, head_dim)?;
        let kh = g.slice_cols(k, h * head_dim, head_dim)?;
        let vh = g.slice_cols(v, h * head_dim, head_dim)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.mul_scalar(scores, scale);
        let scores = match mask {
            Some(m) => g.add_const(scores, m)?,
            None => scores,
        };
        let weights = g.softmax(scores, 1)?;
        heads.push(g.matmul(weights, vh)?);
    }
    g.concat_cols(&heads)
}

/// Lower-triangular additive mask for autoregressive decoding.
pub fn causal_mask<T: Scalar>(len: usize) -> Tensor<T> {
    let mut data = vec![T::ZERO; len * len];
    for r in 0..len {
        for c in (r + 1)..len {
            data[r * len + c] = T::from_f64(MASKED_LOGIT);
        }
    }
    Tensor::from_vec(&[len, len], data).expect("square mask")
}

/// Additive mask hiding padded key positions from every query.
pub fn padding_mask<T: Scalar>(lq: usize, pad: &[bool]) -> Tensor<T> {
    let lk = pad.len();
    let mut data = vec![T::ZERO; lq * lk];
    for r in 0..lq {
        for (c, &is_pad) in pad.iter().enumerate() {
            if is_pad {
                data[r * lk + c] = T::from_f64(MASKED_LOGIT);
            }
        }
    }
    Tensor::from_vec(&[lq, lk], data).expect("mask shape")
}

// ---------------------------------------------------------------------------
// Transformer block
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct AttnParams<T> {
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
}

impl<T: Scalar> AttnParams<T> {
    pub fn new(d_model: usize, rng: &mut Rng) -> Self {
        AttnParams {
            wq: Linear::new(d_model, d_model, rng),
            wk: Linear::new(d_model, d_model, rng),
            wv: Linear::new(d_model, d_model, rng),
            wo: Linear::new(d_model, d_model, rng),
        }
    }

    /// Projected multi-head attention of (already normalized) `q_src` over
    /// `kv_src`, including the output projection.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        q_src: NodeId,
        kv_src: NodeId,
        mask: Option<&Tensor<T>>,
        n_heads: usize,
    ) -> Result<NodeId> {
        let q = self.wq.forward(g, q_src)?;
        let k = self.wk.forward(g, kv_src)?;
        let v = self.wv.forward(g, kv_src)?;
        let mixed = attention(g, q, k, v, mask, n_heads)?;
        self.wo.forward(g, mixed)
    }
}

impl<T: Scalar> ParamGroup<T> for AttnParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.wq.visit(&format!("{prefix}.wq"), f);
        self.wk.visit(&format!("{prefix}.wk"), f);
        self.wv.visit(&format!("{prefix}.wv"), f);
        self.wo.visit(&format!("{prefix}.wo"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.wq.visit_mut(&format!("{prefix}.wq"), f);
        self.wk.visit_mut(&format!("{prefix}.wk"), f);
        self.wv.visit_mut(&format!("{prefix}.wv"), f);
        self.wo.visit_mut(&format!("{prefix}.wo"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfnParams<T> {
    pub w1: Linear<T>,
    pub w2: Linear<T>,
}

impl<T: Scalar> FfnParams<T> {
    pub fn new(d_model: usize, d_ff: usize, rng: &mut Rng) -> Self {
        FfnParams { w1: Linear::new(d_model, d_ff, rng), w2: Linear::new(d_ff, d_model, rng) }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        let h = self.w1.forward(g, x)?;
        let h = g.gelu(h);
        self.w2.forward(g, h)
    }
}

impl<T: Scalar> ParamGroup<T> for FfnParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.w1.visit(&format!("{prefix}.w1"), f);
        self.w2.visit(&format!("{prefix}.w2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.w1.visit_mut(&format!("{prefix}.w1"), f);
        self.w2.visit_mut(&format!("{prefix}.w2"), f);
    }
}

/// Pre-norm block: `x = q_src + Attn(LN1(q_src), LN1(kv_src))`, then
/// `x + FFN(LN2(x))`. The same LN1 parameters normalize both sources.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerBlockParams<T> {
    pub attn: AttnParams<T>,
    pub ffn: FfnParams<T>,
    pub norm1: NormParams<T>,
    pub norm2: NormParams<T>,
    pub n_heads: usize,
}

impl<T: Scalar> TransformerBlockParams<T> {
    pub fn new(d_model: usize, d_ff: usize, n_heads: usize, rng: &mut Rng) -> Self {
        TransformerBlockParams {
            attn: AttnParams::new(d_model, rng),
            ffn: FfnParams::new(d_model, d_ff, rng),
            norm1: NormParams::identity(d_model),
            norm2: NormParams::identity(d_model),
            n_heads,
        }
    }
}

pub fn transformer_block<T: Scalar>(
    g: &mut Graph<T>,
    p: &TransformerBlockParams<T>,
    q_src: NodeId,
    kv_src: NodeId,
    mask: Option<&Tensor<T>>,
    eps: T,
    drop: &mut Dropout,
) -> Result<NodeId> {
    if g.value(q_src).cols() != g.value(kv_src).cols() {
        return Err(Error::Dim {
            op: "transformer_block",
            detail: format!(
                "q_src {:?} and kv_src {:?} disagree on d_model",
                g.value(q_src).shape(),
                g.value(kv_src).shape()
            ),
        });
    }
    let qn = p.norm1.forward(g, q_src, eps)?;
    let kvn = if q_src == kv_src { qn } else { p.norm1.forward(g, kv_src, eps)? };
    let attn_out = p.attn.forward(g, qn, kvn, mask, p.n_heads)?;
    let attn_out = drop.apply(g, attn_out);
    let x = g.add(q_src, attn_out)?;
    let xn = p.norm2.forward(g, x, eps)?;
    let ffn_out = p.ffn.forward(g, xn)?;
    let ffn_out = drop.apply(g, ffn_out);
    g.add(x, ffn_out)
}

impl<T: Scalar> ParamGroup<T> for TransformerBlockParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.attn.visit(&format!("{prefix}.attn"), f);
        self.ffn.visit(&format!("{prefix}.ffn"), f);
        self.norm1.visit(&format!("{prefix}.norm1"), f);
        self.norm2.visit(&format!("{prefix}.norm2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.attn.visit_mut(&format!("{prefix}.attn"), f);
        self.ffn.visit_mut(&format!("{prefix}.ffn"), f);
        self.norm1.visit_mut(&format!("{prefix}.norm1"), f);
        self.norm2.visit_mut(&format!("{prefix}.norm2"), f);
    }
}
