//! Two-stage training orchestration, checkpoint state and the end-to-end
//! generation path.
//!
//! Both stages share one step driver: shuffle the corpus per epoch from a
//! split RNG stream, build the batch loss on a fresh graph, backward, clip
//! the global gradient norm, and apply AdamW at the scheduled rate. Every
//! random draw at step `t` is derived from `(seed, stream, t)`, so resuming
//! from a checkpoint at step `t` continues the exact uninterrupted
//! trajectory.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::config::Config;
use crate::contrastive::{self, PairItem};
use crate::error::{Error, Result};
use crate::generative::{self, Stage2Item};
use crate::graph::Graph;
use crate::image::ImagePatchGrid;
use crate::model::{ModelBundle, Stage};
use crate::nn::Dropout;
use crate::optim::{clip_global_norm, default_no_decay, lr_schedule, AdamW};
use crate::retrieval::{self, DialogueExample, ImageIndex, RetrievalMode};
use crate::rng::{streams, Rng};
use crate::scalar::Scalar;
use crate::tokenizer::{Tokenizer, BOS, EOS};

/// Per-step training record; `aux_a`/`aux_b` are (match, recon) in stage 1
/// and (gen, preser) in stage 2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub aux_a: f64,
    pub aux_b: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Batch index ranges over a shuffled order; a trailing batch of one element
/// borrows one from its predecessor so in-batch negatives always exist,
/// keeping the step count at ceil(n / b).
pub fn batch_bounds(n: usize, b: usize) -> Vec<(usize, usize)> {
    debug_assert!(n > 0 && b > 0);
    let mut bounds = Vec::new();
    let mut lo = 0;
    while lo < n {
        let hi = (lo + b).min(n);
        bounds.push((lo, hi));
        lo = hi;
    }
    let k = bounds.len();
    if k >= 2 && bounds[k - 1].1 - bounds[k - 1].0 == 1 {
        bounds[k - 1].0 -= 1;
        bounds[k - 2].1 -= 1;
    }
    bounds
}

fn epoch_order(root: &Rng, stage_tag: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = root.split(streams::SHUFFLE).split(stage_tag).split(epoch);
    rng.shuffle(&mut order);
    order
}

/// Collects trainable gradients from the graph, verifies finiteness, clips
/// the global norm, and applies one AdamW update across the bundle.
fn optimize_step<T: Scalar>(
    bundle: &mut ModelBundle<T>,
    graph: &Graph<T>,
    opt: &mut AdamW,
    lr: f64,
    weight_decay: f64,
    grad_clip: f64,
) -> Result<f64> {
    let mut names = Vec::new();
    let mut grads: Vec<Vec<f64>> = Vec::new();
    bundle.visit_params(&mut |name, t| {
        if t.requires_grad {
            if let Some(g) = graph.param_grad(t) {
                names.push(name);
                grads.push(g.iter().map(|v| v.to_f64()).collect());
            }
        }
    });
    for (name, g) in names.iter().zip(&grads) {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGrad { param: name.clone() });
        }
    }
    let norm = clip_global_norm(&mut grads, grad_clip);
    let by_name: BTreeMap<String, Vec<f64>> = names.into_iter().zip(grads).collect();
    opt.advance();
    let mut apply_err = None;
    bundle.visit_params_mut(&mut |name, t| {
        if apply_err.is_some() {
            return;
        }
        if let Some(g) = by_name.get(&name) {
            let wd = if default_no_decay(&name) { 0.0 } else { weight_decay };
            if let Err(e) = opt.update_param(&name, t, g, lr, wd) {
                apply_err = Some(e);
            }
        }
    });
    if let Some(e) = apply_err {
        return Err(e);
    }
    bundle.clamp_log_tau();
    Ok(norm)
}

fn planned_steps(n: usize, batch: usize, epochs: usize, max_steps: usize) -> u64 {
    let per_epoch = batch_bounds(n, batch).len() as u64;
    let total = per_epoch * epochs as u64;
    if max_steps > 0 {
        total.min(max_steps as u64)
    } else {
        total
    }
}

/// Optimizes the stage-1 objective with the stage-1 freeze map. Pass
/// `start_step > 0` with the matching optimizer state to resume;
/// `stop_step` interrupts early without altering the learning-rate
/// schedule's planned total.
#[allow(clippy::too_many_arguments)]
pub fn run_contrastive_stage<T: Scalar>(
    cfg: &Config,
    items: &[PairItem<T>],
    bundle: &mut ModelBundle<T>,
    opt: &mut AdamW,
    start_step: u64,
    stop_step: Option<u64>,
    root: &Rng,
    mut on_step: Option<&mut dyn FnMut(&StepLog)>,
) -> Result<Vec<StepLog>> {
    if items.is_empty() {
        return Err(Error::Config("contrastive stage requires a nonempty pair corpus".into()));
    }
    if items.len() < 2 {
        return Err(Error::Config(
            "contrastive stage requires at least 2 pairs for in-batch negatives".into(),
        ));
    }
    cfg.validate()?;
    bundle.apply_stage_freeze(Stage::Contrastive);
    let t = &cfg.train;
    let batch_size = t.batch_size_stage1.max(2).min(items.len());
    let bounds = batch_bounds(items.len(), batch_size);
    let per_epoch = bounds.len() as u64;
    let total = planned_steps(items.len(), batch_size, t.epochs_stage1, t.max_steps_stage1);
    let until = stop_step.map_or(total, |s| s.min(total));
    let mut logs = Vec::new();
    for step in start_step..until {
        let epoch = step / per_epoch;
        let (lo, hi) = bounds[(step % per_epoch) as usize];
        let order = epoch_order(root, 1, epoch, items.len());
        let batch: Vec<PairItem<T>> = order[lo..hi].iter().map(|&i| items[i].clone()).collect();

        let mut g = Graph::new();
        let mut mask_rng = root.split(streams::MASK).split(step);
        let mut drop = Dropout::new(cfg.model.dropout, root.split(streams::DROPOUT).split(step));
        let losses = contrastive::build_stage1_loss(
            &mut g,
            bundle,
            &batch,
            t.lambda1,
            t.mask_ratio,
            t.mask_block,
            t.toggles.tim,
            t.toggles.tamim,
            &mut mask_rng,
            &mut drop,
        )?;
        g.backward(losses.total)?;
        let lr = lr_schedule(step as usize, total as usize, t.warmup_fraction, t.lr);
        let grad_norm =
            optimize_step(bundle, &g, opt, lr, t.weight_decay_stage1, t.grad_clip)?;
        let log = StepLog {
            step,
            loss: g.value(losses.total).item().to_f64(),
            aux_a: g.value(losses.matching).item().to_f64(),
            aux_b: g.value(losses.recon).item().to_f64(),
            lr,
            grad_norm,
        };
        if let Some(cb) = on_step.as_deref_mut() {
            cb(&log);
        }
        logs.push(log);
    }
    Ok(logs)
}

/// Tokenizes and resolves one annotated dialogue example into a stage-2
/// item. `line` is 1-based and used in error messages.
pub fn prepare_stage2_item<T: Scalar>(
    ex: &DialogueExample,
    tokenizer: &Tokenizer,
    grids: &BTreeMap<String, ImagePatchGrid<T>>,
    k: usize,
    max_resp_len: usize,
    line: usize,
) -> Result<Stage2Item<T>> {
    let ids = ex.image_ids.as_ref().ok_or_else(|| {
        Error::Ingestion(format!("example {line}: missing image_ids (annotate the corpus first)"))
    })?;
    if ids.len() < k {
        return Err(Error::Ingestion(format!(
            "example {line}: has {} image ids, need {k}",
            ids.len()
        )));
    }
    let mut item_grids = Vec::with_capacity(k);
    for id in &ids[..k] {
        let grid = grids.get(id).ok_or_else(|| {
            Error::Ingestion(format!("example {line}: unknown image id '{id}'"))
        })?;
        item_grids.push(grid.clone());
    }
    let ctx_ids = tokenizer.encode_turns(&ex.context);
    let mut resp = tokenizer.encode(&ex.response);
    resp.truncate(max_resp_len.saturating_sub(1).max(1));
    let mut resp_input = alloc::vec![BOS];
    resp_input.extend(&resp);
    let mut resp_target = resp;
    resp_target.push(EOS);
    Ok(Stage2Item { ctx_ids, resp_input, resp_target, grids: item_grids })
}

pub fn prepare_stage2_items<T: Scalar>(
    corpus: &[DialogueExample],
    tokenizer: &Tokenizer,
    grids: &BTreeMap<String, ImagePatchGrid<T>>,
    k: usize,
    max_resp_len: usize,
) -> Result<Vec<Stage2Item<T>>> {
    corpus
        .iter()
        .enumerate()
        .map(|(i, ex)| prepare_stage2_item(ex, tokenizer, grids, k, max_resp_len, i + 1))
        .collect()
}

/// Optimizes the stage-2 objective end to end (every parameter trainable).
/// The corpus must be pre-annotated; no retrieval happens here.
#[allow(clippy::too_many_arguments)]
pub fn run_generative_stage<T: Scalar>(
    cfg: &Config,
    items: &[Stage2Item<T>],
    bundle: &mut ModelBundle<T>,
    opt: &mut AdamW,
    start_step: u64,
    stop_step: Option<u64>,
    root: &Rng,
    mut on_step: Option<&mut dyn FnMut(&StepLog)>,
) -> Result<Vec<StepLog>> {
    if items.is_empty() {
        return Err(Error::Config("generative stage requires a nonempty dialogue corpus".into()));
    }
    cfg.validate()?;
    bundle.apply_stage_freeze(Stage::Generative);
    let t = &cfg.train;
    let batch_size = t.batch_size_stage2.max(1).min(items.len());
    let bounds = batch_bounds(items.len(), batch_size);
    let per_epoch = bounds.len() as u64;
    let total = planned_steps(items.len(), batch_size, t.epochs_stage2, t.max_steps_stage2);
    let until = stop_step.map_or(total, |s| s.min(total));
    let mut logs = Vec::new();
    for step in start_step..until {
        let epoch = step / per_epoch;
        let (lo, hi) = bounds[(step % per_epoch) as usize];
        let order = epoch_order(root, 2, epoch, items.len());
        let batch: Vec<Stage2Item<T>> = order[lo..hi].iter().map(|&i| items[i].clone()).collect();

        let mut g = Graph::new();
        let mut drop = Dropout::new(cfg.model.dropout, root.split(streams::DROPOUT).split(step));
        let losses = generative::build_stage2_loss(
            &mut g,
            bundle,
            &batch,
            t.lambda2,
            t.label_smoothing,
            t.toggles.mf,
            t.toggles.it,
            &mut drop,
        )?;
        g.backward(losses.total)?;
        let lr = lr_schedule(step as usize, total as usize, t.warmup_fraction, t.lr);
        let grad_norm =
            optimize_step(bundle, &g, opt, lr, t.weight_decay_stage2, t.grad_clip)?;
        let log = StepLog {
            step,
            loss: g.value(losses.total).item().to_f64(),
            aux_a: g.value(losses.gen).item().to_f64(),
            aux_b: g.value(losses.preser).item().to_f64(),
            lr,
            grad_norm,
        };
        if let Some(cb) = on_step.as_deref_mut() {
            cb(&log);
        }
        logs.push(log);
    }
    Ok(logs)
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

/// Where generation gets its k images from.
pub enum ImageSource<'a> {
    /// Context-only retrieval from the index (the inference path).
    Retrieve,
    /// Fixed ids, e.g. precomputed annotations or ablation swaps.
    Fixed(&'a [String]),
    /// k zeroed patch grids (the no-image baseline).
    Zeroed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationOutput {
    pub text: String,
    pub token_ids: Vec<u32>,
    pub image_ids: Vec<String>,
    /// Ranked retrieval cosine scores, aligned with `image_ids` (empty for
    /// fixed/zeroed sources).
    pub scores: Vec<f64>,
    /// Diagnostic softmax over `scores`.
    pub score_softmax: Vec<f64>,
}

/// Full inference path: retrieve (or accept) k images, encode, fuse, beam
/// search, detokenize.
#[allow(clippy::too_many_arguments)]
pub fn generate_response<T: Scalar>(
    bundle: &ModelBundle<T>,
    tokenizer: &Tokenizer,
    index: &ImageIndex,
    grids: &BTreeMap<String, ImagePatchGrid<T>>,
    cfg: &Config,
    context: &[String],
    source: ImageSource<'_>,
) -> Result<GenerationOutput> {
    let t = &cfg.train;
    let ctx_ids = tokenizer.encode_turns(context);
    let (image_ids, scores) = match source {
        ImageSource::Retrieve => {
            let result = retrieval::retrieve_top_k(
                index,
                bundle,
                &ctx_ids,
                t.top_k,
                RetrievalMode::ContextOnly,
            )?;
            (
                result.ranked.iter().map(|s| s.image_id.clone()).collect::<Vec<_>>(),
                result.ranked.iter().map(|s| s.score).collect::<Vec<_>>(),
            )
        }
        ImageSource::Fixed(ids) => (ids.to_vec(), Vec::new()),
        ImageSource::Zeroed => (Vec::new(), Vec::new()),
    };
    let item_grids: Vec<ImagePatchGrid<T>> = match source {
        ImageSource::Zeroed => {
            let side = bundle.cfg.patches_per_side();
            (0..t.top_k)
                .map(|_| ImagePatchGrid {
                    patch_size: bundle.cfg.patch_size,
                    side,
                    patches: crate::tensor::Tensor::zeros(&[
                        bundle.cfg.n_patches(),
                        bundle.cfg.patch_dim(),
                    ]),
                })
                .collect()
        }
        _ => {
            let mut out = Vec::with_capacity(image_ids.len());
            for id in &image_ids {
                let grid = grids
                    .get(id)
                    .ok_or_else(|| Error::Ingestion(format!("unknown image id '{id}'")))?;
                out.push(grid.clone());
            }
            out
        }
    };
    let mut g = Graph::new();
    let mut drop = Dropout::off();
    let fused = generative::encode_and_fuse(
        &mut g,
        bundle,
        &ctx_ids,
        &item_grids,
        t.toggles.mf,
        &mut drop,
    )?;
    let token_ids = generative::beam_search(
        &mut g,
        bundle,
        fused.h_ctx_img,
        fused.h_img_ctx,
        t.beam_size,
        t.max_gen_len,
        t.toggles.it,
    )?;
    let text = tokenizer.decode(&token_ids);
    let score_softmax =
        if scores.is_empty() { Vec::new() } else { softmax_of(&scores) };
    Ok(GenerationOutput { text, token_ids, image_ids, scores, score_softmax })
}

fn softmax_of(scores: &[f64]) -> Vec<f64> {
    let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| libm::exp(s - mx)).collect();
    let denom: f64 = exps.iter().sum();
    exps.iter().map(|e| e / denom).collect()
}

// ---------------------------------------------------------------------------
// Checkpoint state
// ---------------------------------------------------------------------------

/// Which stage a checkpoint was captured in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointStage {
    Contrastive,
    Generative,
}

impl CheckpointStage {
    pub fn tag(self) -> u8 {
        match self {
            CheckpointStage::Contrastive => 1,
            CheckpointStage::Generative => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(CheckpointStage::Contrastive),
            2 => Some(CheckpointStage::Generative),
            _ => None,
        }
    }
}

/// Complete serializable training state. The byte-level file format lives in
/// the companion crate; this holds the data.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config: Config,
    pub vocab: Vec<String>,
    pub stage: CheckpointStage,
    /// Steps completed within the stage.
    pub stage_step: u64,
    pub arrays: Vec<(String, Vec<usize>, Vec<T>)>,
    /// AdamW first/second moments by parameter name.
    pub moments: Vec<(String, Vec<f64>, Vec<f64>)>,
    pub opt_step: u64,
    pub rng_state: (u64, u64),
}

impl<T: Scalar> Checkpoint<T> {
    pub fn capture(
        cfg: &Config,
        bundle: &ModelBundle<T>,
        tokenizer: &Tokenizer,
        opt: &AdamW,
        stage: CheckpointStage,
        stage_step: u64,
        root: &Rng,
    ) -> Self {
        let mut arrays = Vec::new();
        bundle.visit_params(&mut |name, t| {
            arrays.push((name, t.shape().to_vec(), t.data().to_vec()));
        });
        let moments = opt
            .moments
            .iter()
            .map(|(name, m)| (name.clone(), m.m.clone(), m.v.clone()))
            .collect();
        Checkpoint {
            config: cfg.clone(),
            vocab: tokenizer.vocab().to_vec(),
            stage,
            stage_step,
            arrays,
            moments,
            opt_step: opt.step,
            rng_state: root.state(),
        }
    }

    /// Rebuilds the bundle, tokenizer, optimizer and root RNG. Fails with a
    /// format error naming the first mismatched tensor.
    pub fn restore(&self) -> Result<(ModelBundle<T>, Tokenizer, AdamW, Rng)> {
        let tokenizer = Tokenizer::from_vocab(self.vocab.clone());
        let mut init_rng = Rng::new(self.config.train.seed).split(streams::INIT);
        let mut bundle = ModelBundle::new(
            &self.config.model,
            tokenizer.vocab_size(),
            self.config.train.tau_init,
            &mut init_rng,
        )?;
        let by_name: BTreeMap<&str, (&Vec<usize>, &Vec<T>)> =
            self.arrays.iter().map(|(n, s, d)| (n.as_str(), (s, d))).collect();
        let mut missing = None;
        bundle.visit_params_mut(&mut |name, t| {
            if missing.is_some() {
                return;
            }
            match by_name.get(name.as_str()) {
                Some((shape, data)) if shape.as_slice() == t.shape() => {
                    t.data_mut().copy_from_slice(data);
                    t.grad = None;
                }
                Some((shape, _)) => {
                    missing = Some(Error::Format(format!(
                        "tensor '{name}': checkpoint shape {shape:?} does not match model {:?}",
                        t.shape()
                    )));
                }
                None => {
                    missing = Some(Error::Format(format!("tensor '{name}' absent from checkpoint")));
                }
            }
        });
        if let Some(e) = missing {
            return Err(e);
        }
        if self.arrays.len() != bundle.param_names().len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, model has {}",
                self.arrays.len(),
                bundle.param_names().len()
            )));
        }
        bundle.apply_stage_freeze(match self.stage {
            CheckpointStage::Contrastive => Stage::Contrastive,
            CheckpointStage::Generative => Stage::Generative,
        });
        let mut opt = AdamW::new();
        opt.step = self.opt_step;
        for (name, m, v) in &self.moments {
            opt.moments.insert(
                name.clone(),
                crate::optim::Moments { m: m.clone(), v: v.clone() },
            );
        }
        let root = Rng::from_state(self.rng_state.0, self.rng_state.1);
        Ok((bundle, tokenizer, opt, root))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::image::patchify;
    use crate::tensor::Tensor;

    fn tiny_config() -> Config {
        let mut cfg = Config::default();
        cfg.model = ModelConfig {
            d_model: 8,
            d_shared: 4,
            n_heads: 2,
            d_ff: 16,
            n_enc_layers: 1,
            n_dec_layers: 1,
            image_size: 8,
            patch_size: 4,
            max_text_len: 12,
            max_resp_len: 10,
            ..Default::default()
        };
        cfg.train.lr = 1e-3;
        cfg.train.batch_size_stage1 = 4;
        cfg.train.batch_size_stage2 = 2;
        cfg.train.epochs_stage1 = 1;
        cfg.train.epochs_stage2 = 1;
        cfg.train.mask_block = 1;
        cfg
    }

    fn pair_items(n: usize, vocab: usize) -> Vec<PairItem<f64>> {
        let mut rng = Rng::new(77);
        (0..n)
            .map(|i| {
                let pixels = Tensor::<f64>::randn(&[3, 8, 8], 0.5, &mut rng);
                PairItem {
                    grid: patchify(&pixels, 4).unwrap(),
                    caption_ids: alloc::vec![BOS, 5 + (i % (vocab - 6)) as u32, EOS],
                }
            })
            .collect()
    }

    #[test]
    fn batch_bounds_cover_all_and_avoid_singletons() {
        assert_eq!(batch_bounds(10, 4), alloc::vec![(0, 4), (4, 8), (8, 10)]);
        // 9 = 4 + 4 + 1 -> 4 + 3 + 2.
        assert_eq!(batch_bounds(9, 4), alloc::vec![(0, 4), (4, 7), (7, 9)]);
        assert_eq!(batch_bounds(1, 4), alloc::vec![(0, 1)]);
        assert_eq!(batch_bounds(4, 4), alloc::vec![(0, 4)]);
    }

    #[test]
    fn stage1_performs_ceil_n_over_b_steps() {
        let cfg = tiny_config();
        let items = pair_items(10, 12);
        let mut bundle = ModelBundle::<f64>::new(&cfg.model, 12, 0.07, &mut Rng::new(0)).unwrap();
        let mut opt = AdamW::new();
        let logs = run_contrastive_stage(
            &cfg,
            &items,
            &mut bundle,
            &mut opt,
            0,
            None,
            &Rng::new(cfg.train.seed),
            None,
        )
        .unwrap();
        assert_eq!(logs.len(), 3); // ceil(10 / 4)
        assert_eq!(opt.step, 3);
    }

    #[test]
    fn stage1_freezes_text_encoder_bitwise() {
        let cfg = tiny_config();
        let items = pair_items(6, 12);
        let mut bundle = ModelBundle::<f64>::new(&cfg.model, 12, 0.07, &mut Rng::new(0)).unwrap();
        let before: Vec<f64> = bundle.word_emb.table.data().to_vec();
        let text_block_before: Vec<f64> = bundle.text_blocks[0].attn.wq.weight.data().to_vec();
        let img_before: Vec<f64> = bundle.img_blocks[0].attn.wq.weight.data().to_vec();
        let mut opt = AdamW::new();
        run_contrastive_stage(&cfg, &items, &mut bundle, &mut opt, 0, None, &Rng::new(0), None)
            .unwrap();
        assert_eq!(bundle.word_emb.table.data(), before.as_slice());
        assert_eq!(bundle.text_blocks[0].attn.wq.weight.data(), text_block_before.as_slice());
        assert_ne!(bundle.img_blocks[0].attn.wq.weight.data(), img_before.as_slice());
        // Frozen parameters acquired no optimizer state.
        assert!(opt.moments.keys().all(|k| !k.starts_with("text_block")));
    }

    #[test]
    fn empty_corpus_rejected() {
        let cfg = tiny_config();
        let mut bundle = ModelBundle::<f64>::new(&cfg.model, 12, 0.07, &mut Rng::new(0)).unwrap();
        let mut opt = AdamW::new();
        assert!(matches!(
            run_contrastive_stage(&cfg, &[], &mut bundle, &mut opt, 0, None, &Rng::new(0), None),
            Err(Error::Config(_))
        ));
    }

    fn stage2_items(n: usize) -> Vec<Stage2Item<f64>> {
        let mut rng = Rng::new(5);
        (0..n)
            .map(|i| {
                let g1 = patchify(&Tensor::<f64>::randn(&[3, 8, 8], 0.5, &mut rng), 4).unwrap();
                let g2 = patchify(&Tensor::<f64>::randn(&[3, 8, 8], 0.5, &mut rng), 4).unwrap();
                Stage2Item {
                    ctx_ids: alloc::vec![BOS, 5 + (i % 3) as u32, EOS],
                    resp_input: alloc::vec![BOS, 8, 9],
                    resp_target: alloc::vec![8, 9, EOS],
                    grids: alloc::vec![g1, g2],
                }
            })
            .collect()
    }

    #[test]
    fn stage2_trains_and_all_params_move() {
        let cfg = tiny_config();
        let items = stage2_items(4);
        let mut bundle = ModelBundle::<f64>::new(&cfg.model, 12, 0.07, &mut Rng::new(0)).unwrap();
        let text_before: Vec<f64> = bundle.text_blocks[0].attn.wq.weight.data().to_vec();
        let mut opt = AdamW::new();
        let logs =
            run_generative_stage(&cfg, &items, &mut bundle, &mut opt, 0, None, &Rng::new(0), None)
                .unwrap();
        assert_eq!(logs.len(), 2);
        // Stage 2 trains everything, including the text encoder.
        assert_ne!(bundle.text_blocks[0].attn.wq.weight.data(), text_before.as_slice());
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let mut cfg = tiny_config();
        cfg.train.epochs_stage1 = 2;
        let items = pair_items(8, 12);
        let root = Rng::new(cfg.train.seed);

        let mut full_bundle =
            ModelBundle::<f64>::new(&cfg.model, 12, 0.07, &mut Rng::new(3)).unwrap();
        let mut full_opt = AdamW::new();
        let full_logs =
            run_contrastive_stage(
                &cfg, &items, &mut full_bundle, &mut full_opt, 0, None, &root, None,
            )
            .unwrap();

        // Interrupted: stop after 2 steps, then resume from there.
        let mut part_bundle =
            ModelBundle::<f64>::new(&cfg.model, 12, 0.07, &mut Rng::new(3)).unwrap();
        let mut part_opt = AdamW::new();
        let part_logs = run_contrastive_stage(
            &cfg, &items, &mut part_bundle, &mut part_opt, 0, Some(2), &root, None,
        )
        .unwrap();
        let resumed_logs = run_contrastive_stage(
            &cfg, &items, &mut part_bundle, &mut part_opt, 2, None, &root, None,
        )
        .unwrap();
        let rejoined: Vec<StepLog> =
            part_logs.into_iter().chain(resumed_logs).collect();
        assert_eq!(full_logs.len(), rejoined.len());
        for (a, b) in full_logs.iter().zip(&rejoined) {
            assert_eq!(a.loss.to_bits(), b.loss.to_bits(), "step {}", a.step);
        }
        assert_eq!(full_bundle, part_bundle);
    }

    #[test]
    fn checkpoint_roundtrip_restores_everything() {
        let cfg = tiny_config();
        let items = pair_items(6, 12);
        let tokenizer = Tokenizer::from_texts(["a b c d e f g"]);
        let mut bundle =
            ModelBundle::<f64>::new(&cfg.model, tokenizer.vocab_size(), 0.07, &mut Rng::new(0))
                .unwrap();
        let mut opt = AdamW::new();
        let root = Rng::new(cfg.train.seed);
        run_contrastive_stage(&cfg, &items, &mut bundle, &mut opt, 0, None, &root, None).unwrap();

        let ckpt = Checkpoint::capture(
            &cfg,
            &bundle,
            &tokenizer,
            &opt,
            CheckpointStage::Contrastive,
            2,
            &root,
        );
        let (restored, tok2, opt2, root2) = ckpt.restore().unwrap();
        assert_eq!(tok2.vocab(), tokenizer.vocab());
        assert_eq!(opt2.step, opt.step);
        assert_eq!(opt2.moments, opt.moments);
        assert_eq!(root2, root);
        let mut equal = true;
        let mut count = 0;
        restored.visit_params(&mut |name, t| {
            count += 1;
            let mut orig = None;
            bundle.visit_params(&mut |n2, t2| {
                if n2 == name {
                    orig = Some(t2.data().to_vec());
                }
            });
            equal &= orig.as_deref() == Some(t.data());
        });
        assert!(equal && count > 0);
    }

    #[test]
    fn checkpoint_shape_mismatch_names_tensor() {
        let cfg = tiny_config();
        let tokenizer = Tokenizer::from_texts(["a b"]);
        let bundle =
            ModelBundle::<f64>::new(&cfg.model, tokenizer.vocab_size(), 0.07, &mut Rng::new(0))
                .unwrap();
        let opt = AdamW::new();
        let mut ckpt = Checkpoint::capture(
            &cfg,
            &bundle,
            &tokenizer,
            &opt,
            CheckpointStage::Contrastive,
            0,
            &Rng::new(0),
        );
        // Corrupt one tensor's shape.
        let pos = ckpt.arrays.iter().position(|(n, _, _)| n == "cls_token").unwrap();
        ckpt.arrays[pos].1 = alloc::vec![2, 8];
        match ckpt.restore() {
            Err(Error::Format(msg)) => assert!(msg.contains("cls_token"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn prepare_stage2_requires_annotations() {
        let tokenizer = Tokenizer::from_texts(["hello world"]);
        let grids: BTreeMap<String, ImagePatchGrid<f64>> = BTreeMap::new();
        let ex = DialogueExample {
            context: alloc::vec!["hello".into()],
            response: "world".into(),
            image_ids: None,
            retrieval_mode: None,
        };
        match prepare_stage2_item(&ex, &tokenizer, &grids, 3, 10, 7) {
            Err(Error::Ingestion(msg)) => assert!(msg.contains("example 7"), "{msg}"),
            other => panic!("expected ingestion error, got {other:?}"),
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = tiny_config();
        let tokenizer = Tokenizer::from_texts(["look what red square it is a"]);
        let bundle =
            ModelBundle::<f64>::new(&cfg.model, tokenizer.vocab_size(), 0.07, &mut Rng::new(1))
                .unwrap();
        let mut rng = Rng::new(8);
        let mut grids = BTreeMap::new();
        let mut index = ImageIndex::new(cfg.model.d_shared);
        for i in 0..4 {
            let pixels = Tensor::<f64>::randn(&[3, 8, 8], 0.5, &mut rng);
            let grid = patchify(&pixels, 4).unwrap();
            let id = alloc::format!("im{i}");
            let emb: Vec<f32> =
                (0..cfg.model.d_shared).map(|_| rng.uniform() as f32).collect();
            index.insert(id.clone(), emb).unwrap();
            grids.insert(id, grid);
        }
        let context = alloc::vec![String::from("look"), String::from("what")];
        let a = generate_response(
            &bundle, &tokenizer, &index, &grids, &cfg, &context, ImageSource::Retrieve,
        )
        .unwrap();
        let b = generate_response(
            &bundle, &tokenizer, &index, &grids, &cfg, &context, ImageSource::Retrieve,
        )
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.image_ids.len(), cfg.train.top_k);

        // Zeroed source runs without touching the index.
        let z = generate_response(
            &bundle, &tokenizer, &index, &grids, &cfg, &context, ImageSource::Zeroed,
        )
        .unwrap();
        assert!(z.image_ids.is_empty());
    }

    #[test]
    fn generation_surfaces_bounded_index_error() {
        let mut cfg = tiny_config();
        cfg.train.top_k = 9;
        let tokenizer = Tokenizer::from_texts(["look"]);
        let bundle =
            ModelBundle::<f64>::new(&cfg.model, tokenizer.vocab_size(), 0.07, &mut Rng::new(1))
                .unwrap();
        let mut index = ImageIndex::new(cfg.model.d_shared);
        index.insert("only".into(), alloc::vec![1.0; cfg.model.d_shared]).unwrap();
        let grids = BTreeMap::new();
        let context = alloc::vec![String::from("look")];
        assert!(matches!(
            generate_response(
                &bundle, &tokenizer, &index, &grids, &cfg, &context, ImageSource::Retrieve
            ),
            Err(Error::BoundedIndex { k: 9, size: 1 })
        ));
    }
}
