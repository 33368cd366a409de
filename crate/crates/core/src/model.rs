//! All trainable parameters of the two-stage model, with per-stage freeze
//! maps and named traversal for the optimizer, checkpoints and gradient
//! checks.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{
    AttnParams, EmbeddingTable, FfnParams, Linear, NormParams, ParamGroup,
    TransformerBlockParams, INIT_STD,
};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Bounds on the learnable temperature, enforced in log space after every
/// optimizer step.
pub const LOG_TAU_MIN: f64 = -4.605170185988091; // ln 0.01
pub const LOG_TAU_MAX: f64 = 4.605170185988092; // ln 100

/// One layer of the gated decoder: masked self-attention, two cross
/// attentions, per-position gates and the fused feed-forward.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayerParams<T> {
    pub self_attn: AttnParams<T>,
    pub norm_self: NormParams<T>,
    pub cross_ctx: AttnParams<T>,
    pub norm_ctx: NormParams<T>,
    pub cross_img: AttnParams<T>,
    pub norm_img: NormParams<T>,
    /// Gate over `[h_R; h_CR]`.
    pub gate_ctx: Linear<T>,
    /// Gate over `[h_R; h_IR]`.
    pub gate_img: Linear<T>,
    /// Combiner over `[h_R; gc*h_CR; gi*h_IR]`.
    pub fuse: Linear<T>,
    pub ffn: FfnParams<T>,
}

impl<T: Scalar> DecoderLayerParams<T> {
    fn new(d: usize, d_ff: usize, rng: &mut Rng) -> Self {
        DecoderLayerParams {
            self_attn: AttnParams::new(d, rng),
            norm_self: NormParams::identity(d),
            cross_ctx: AttnParams::new(d, rng),
            norm_ctx: NormParams::identity(d),
            cross_img: AttnParams::new(d, rng),
            norm_img: NormParams::identity(d),
            gate_ctx: Linear::new(2 * d, d, rng),
            gate_img: Linear::new(2 * d, d, rng),
            fuse: Linear::new(3 * d, d, rng),
            ffn: FfnParams::new(d, d_ff, rng),
        }
    }
}

impl<T: Scalar> ParamGroup<T> for DecoderLayerParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.self_attn.visit(&format!("{prefix}.self_attn"), f);
        self.norm_self.visit(&format!("{prefix}.norm_self"), f);
        self.cross_ctx.visit(&format!("{prefix}.cross_ctx"), f);
        self.norm_ctx.visit(&format!("{prefix}.norm_ctx"), f);
        self.cross_img.visit(&format!("{prefix}.cross_img"), f);
        self.norm_img.visit(&format!("{prefix}.norm_img"), f);
        self.gate_ctx.visit(&format!("{prefix}.gate_ctx"), f);
        self.gate_img.visit(&format!("{prefix}.gate_img"), f);
        self.fuse.visit(&format!("{prefix}.fuse"), f);
        self.ffn.visit(&format!("{prefix}.ffn"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.self_attn.visit_mut(&format!("{prefix}.self_attn"), f);
        self.norm_self.visit_mut(&format!("{prefix}.norm_self"), f);
        self.cross_ctx.visit_mut(&format!("{prefix}.cross_ctx"), f);
        self.norm_ctx.visit_mut(&format!("{prefix}.norm_ctx"), f);
        self.cross_img.visit_mut(&format!("{prefix}.cross_img"), f);
        self.norm_img.visit_mut(&format!("{prefix}.norm_img"), f);
        self.gate_ctx.visit_mut(&format!("{prefix}.gate_ctx"), f);
        self.gate_img.visit_mut(&format!("{prefix}.gate_img"), f);
        self.fuse.visit_mut(&format!("{prefix}.fuse"), f);
        self.ffn.visit_mut(&format!("{prefix}.ffn"), f);
    }
}

/// Training stages; stage 1 freezes the text encoder and decoder, stage 2
/// trains every parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Contrastive,
    Generative,
}

/// Every parameter of the model: both encoders, the shared word embedding
/// (also the tied output projection), the matching projections with their
/// temperature, the masked-reconstruction head, the two fusion blocks and
/// the gated decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle<T> {
    pub cfg: ModelConfig,
    pub word_emb: EmbeddingTable<T>,
    pub text_pos: Tensor<T>,
    pub text_blocks: Vec<TransformerBlockParams<T>>,
    pub text_norm: NormParams<T>,
    pub patch_embed: Linear<T>,
    pub cls_token: Tensor<T>,
    pub img_pos: Tensor<T>,
    pub img_blocks: Vec<TransformerBlockParams<T>>,
    pub img_norm: NormParams<T>,
    pub proj_img: Linear<T>,
    pub proj_txt: Linear<T>,
    pub log_tau: Tensor<T>,
    pub tamim_block: TransformerBlockParams<T>,
    /// 1x1 conv kernel of the reconstruction head: `[p^2*3, d_model, 1, 1]`.
    pub mip_kernel: Tensor<T>,
    pub mf_block_img: TransformerBlockParams<T>,
    pub mf_block_ctx: TransformerBlockParams<T>,
    pub dec_layers: Vec<DecoderLayerParams<T>>,
    pub resp_pos: Tensor<T>,
    pub out_bias: Tensor<T>,
}

impl<T: Scalar> ModelBundle<T> {
    pub fn new(cfg: &ModelConfig, vocab_size: usize, tau_init: f64, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        if vocab_size == 0 {
            return Err(Error::Config("vocab_size must be positive".into()));
        }
        if tau_init <= 0.0 {
            return Err(Error::Config(format!("tau must be positive, got {tau_init}")));
        }
        let d = cfg.d_model;
        let mut bundle = ModelBundle {
            cfg: cfg.clone(),
            word_emb: EmbeddingTable::new(vocab_size, d, rng),
            text_pos: Tensor::randn(&[cfg.max_text_len, d], INIT_STD, rng).param(),
            text_blocks: (0..cfg.n_enc_layers)
                .map(|_| TransformerBlockParams::new(d, cfg.d_ff, cfg.n_heads, rng))
                .collect(),
            text_norm: NormParams::identity(d),
            patch_embed: Linear::new(cfg.patch_dim(), d, rng),
            cls_token: Tensor::randn(&[1, d], INIT_STD, rng).param(),
            img_pos: Tensor::randn(&[cfg.n_patches() + 1, d], INIT_STD, rng).param(),
            img_blocks: (0..cfg.n_enc_layers)
                .map(|_| TransformerBlockParams::new(d, cfg.d_ff, cfg.n_heads, rng))
                .collect(),
            img_norm: NormParams::identity(d),
            proj_img: Linear::new(d, cfg.d_shared, rng),
            proj_txt: Linear::new(d, cfg.d_shared, rng),
            log_tau: Tensor::scalar(T::from_f64(libm::log(tau_init))).param(),
            tamim_block: TransformerBlockParams::new(d, cfg.d_ff, cfg.n_heads, rng),
            mip_kernel: Tensor::randn(&[cfg.patch_dim(), d, 1, 1], INIT_STD, rng).param(),
            mf_block_img: TransformerBlockParams::new(d, cfg.d_ff, cfg.n_heads, rng),
            mf_block_ctx: TransformerBlockParams::new(d, cfg.d_ff, cfg.n_heads, rng),
            dec_layers: (0..cfg.n_dec_layers).map(|_| DecoderLayerParams::new(d, cfg.d_ff, rng)).collect(),
            resp_pos: Tensor::randn(&[cfg.max_resp_len, d], INIT_STD, rng).param(),
            out_bias: Tensor::zeros(&[vocab_size]).param(),
        };
        bundle.apply_stage_freeze(Stage::Generative);
        Ok(bundle)
    }

    pub fn vocab_size(&self) -> usize {
        self.word_emb.vocab_size()
    }

    pub fn layer_norm_eps(&self) -> T {
        T::from_f64(self.cfg.layer_norm_eps)
    }

    /// True for parameters belonging to the frozen stage-1 groups (text
    /// encoder, shared word embedding, decoder).
    fn frozen_in_stage1(name: &str) -> bool {
        name.starts_with("word_emb")
            || name.starts_with("text_")
            || name.starts_with("dec")
            || name.starts_with("resp_pos")
            || name.starts_with("out_bias")
            || name.starts_with("mf_")
    }

    /// Sets `requires_grad` flags for the given stage and clears gradients.
    pub fn apply_stage_freeze(&mut self, stage: Stage) {
        self.visit_params_mut(&mut |name, t| {
            t.requires_grad = match stage {
                Stage::Contrastive => !Self::frozen_in_stage1(&name),
                Stage::Generative => true,
            };
            t.grad = None;
        });
    }

    /// Clamps the stored log-temperature into its legal range; call after
    /// every optimizer step so tau can never collapse or explode.
    pub fn clamp_log_tau(&mut self) {
        let v = self.log_tau.data()[0].to_f64();
        let clamped = v.clamp(LOG_TAU_MIN, LOG_TAU_MAX);
        if clamped != v {
            self.log_tau.data_mut()[0] = T::from_f64(clamped);
        }
    }

    pub fn tau(&self) -> f64 {
        libm::exp(self.log_tau.data()[0].to_f64())
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.word_emb.visit("word_emb", f);
        f("text_pos".into(), &self.text_pos);
        for (i, b) in self.text_blocks.iter().enumerate() {
            b.visit(&format!("text_block{i}"), f);
        }
        self.text_norm.visit("text_norm", f);
        self.patch_embed.visit("patch_embed", f);
        f("cls_token".into(), &self.cls_token);
        f("img_pos".into(), &self.img_pos);
        for (i, b) in self.img_blocks.iter().enumerate() {
            b.visit(&format!("img_block{i}"), f);
        }
        self.img_norm.visit("img_norm", f);
        self.proj_img.visit("proj_img", f);
        self.proj_txt.visit("proj_txt", f);
        f("log_tau".into(), &self.log_tau);
        self.tamim_block.visit("tamim_block", f);
        f("mip_kernel".into(), &self.mip_kernel);
        self.mf_block_img.visit("mf_img", f);
        self.mf_block_ctx.visit("mf_ctx", f);
        for (i, l) in self.dec_layers.iter().enumerate() {
            l.visit(&format!("dec{i}"), f);
        }
        f("resp_pos".into(), &self.resp_pos);
        f("out_bias".into(), &self.out_bias);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.word_emb.visit_mut("word_emb", f);
        f("text_pos".into(), &mut self.text_pos);
        for (i, b) in self.text_blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("text_block{i}"), f);
        }
        self.text_norm.visit_mut("text_norm", f);
        self.patch_embed.visit_mut("patch_embed", f);
        f("cls_token".into(), &mut self.cls_token);
        f("img_pos".into(), &mut self.img_pos);
        for (i, b) in self.img_blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("img_block{i}"), f);
        }
        self.img_norm.visit_mut("img_norm", f);
        self.proj_img.visit_mut("proj_img", f);
        self.proj_txt.visit_mut("proj_txt", f);
        f("log_tau".into(), &mut self.log_tau);
        self.tamim_block.visit_mut("tamim_block", f);
        f("mip_kernel".into(), &mut self.mip_kernel);
        self.mf_block_img.visit_mut("mf_img", f);
        self.mf_block_ctx.visit_mut("mf_ctx", f);
        for (i, l) in self.dec_layers.iter_mut().enumerate() {
            l.visit_mut(&format!("dec{i}"), f);
        }
        f("resp_pos".into(), &mut self.resp_pos);
        f("out_bias".into(), &mut self.out_bias);
    }

    /// Snapshot of all parameter names, in traversal order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(&mut |n, _| names.push(n));
        names
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.numel());
        n
    }
}
