//! Corpus evaluation: perplexity, the automatic-metric report, and the
//! ablation harness (irrelevant images, vary-k, module disabling).

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::generative::{self, Stage2Item};
use crate::graph::Graph;
use crate::image::ImagePatchGrid;
use crate::metrics::{self, metric_tokens};
use crate::model::ModelBundle;
use crate::nn::Dropout;
use crate::pipeline::{generate_response, GenerationOutput, ImageSource};
use crate::retrieval::{DialogueExample, ImageIndex};
use crate::rng::{streams, Rng};
use crate::scalar::Scalar;
use crate::tokenizer::{Tokenizer, PAD};

/// Per-corpus automatic evaluation results.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub ppl: f64,
    pub bleu1: f64,
    pub rouge_l: f64,
    pub average: f64,
    pub extrema: f64,
    pub greedy: f64,
    pub dist1: f64,
    pub dist2: f64,
    pub n_examples: usize,
}

/// Teacher-forced mean per-token negative log-likelihood (no label
/// smoothing) over non-pad gold tokens.
pub fn corpus_nll<T: Scalar>(
    bundle: &ModelBundle<T>,
    items: &[Stage2Item<T>],
    use_mf: bool,
    use_it: bool,
) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Contract("perplexity over an empty corpus".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for item in items {
        let mut g = Graph::new();
        let mut drop = Dropout::off();
        let fused =
            generative::encode_and_fuse(&mut g, bundle, &item.ctx_ids, &item.grids, use_mf, &mut drop)?;
        let hidden = generative::decoder_hidden(
            &mut g,
            bundle,
            &item.resp_input,
            fused.h_ctx_img,
            fused.h_img_ctx,
            use_it,
            &mut drop,
        )?;
        let logits = generative::decoder_logits(&mut g, bundle, hidden)?;
        let lsm = g.log_softmax(logits, 1)?;
        let vals = g.value(lsm);
        let vocab = vals.cols();
        for (t, &gold) in item.resp_target.iter().enumerate() {
            if gold == PAD {
                continue;
            }
            total -= vals.data()[t * vocab + gold as usize].to_f64();
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// `exp(mean per-token NLL)`.
pub fn perplexity<T: Scalar>(
    bundle: &ModelBundle<T>,
    items: &[Stage2Item<T>],
    use_mf: bool,
    use_it: bool,
) -> Result<f64> {
    Ok(libm::exp(corpus_nll(bundle, items, use_mf, use_it)?))
}

/// Builds the full metric report from teacher-forced items, generated texts
/// and gold responses (all three aligned).
pub fn metric_report<T: Scalar>(
    bundle: &ModelBundle<T>,
    tokenizer: &Tokenizer,
    items: &[Stage2Item<T>],
    generated: &[String],
    gold: &[String],
    use_mf: bool,
    use_it: bool,
) -> Result<MetricReport> {
    if generated.len() != gold.len() || generated.is_empty() {
        return Err(Error::Contract(format!(
            "metric report needs aligned nonempty corpora, got {} generated / {} gold",
            generated.len(),
            gold.len()
        )));
    }
    let ppl = perplexity(bundle, items, use_mf, use_it)?;
    let pairs: Vec<(Vec<String>, Vec<String>)> = generated
        .iter()
        .zip(gold)
        .map(|(c, r)| (metric_tokens(c), metric_tokens(r)))
        .collect();
    let bleu1 = metrics::bleu1_corpus(&pairs);
    let mut rouge_sum = 0.0;
    let mut avg_sum = 0.0;
    let mut ext_sum = 0.0;
    let mut gre_sum = 0.0;
    for (cand, reference) in &pairs {
        rouge_sum += metrics::rouge_l(cand, reference).0;
        let (a, e, gr, _) = metrics::embedding_metrics(cand, reference, tokenizer, &bundle.word_emb);
        avg_sum += a;
        ext_sum += e;
        gre_sum += gr;
    }
    let n = pairs.len() as f64;
    let responses: Vec<Vec<String>> = pairs.iter().map(|(c, _)| c.clone()).collect();
    Ok(MetricReport {
        ppl,
        bleu1,
        rouge_l: rouge_sum / n,
        average: avg_sum / n,
        extrema: ext_sum / n,
        greedy: gre_sum / n,
        dist1: metrics::distinct_n(&responses, 1).0,
        dist2: metrics::distinct_n(&responses, 2).0,
        n_examples: pairs.len(),
    })
}

// ---------------------------------------------------------------------------
// Ablation harness
// ---------------------------------------------------------------------------

/// Exactly one mode per run.
#[derive(Debug, Clone, PartialEq)]
pub enum AblationMode {
    /// Relevant vs seeded-random vs zeroed images.
    IrrelevantImages,
    /// Re-run generation at each k.
    VaryK(Vec<usize>),
    /// Disable one module at a time.
    DisableModule(Vec<ModuleKind>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModuleKind {
    Tim,
    Tamim,
    Mf,
    It,
}

impl ModuleKind {
    pub fn all() -> [ModuleKind; 4] {
        [ModuleKind::Tim, ModuleKind::Tamim, ModuleKind::Mf, ModuleKind::It]
    }

    pub fn name(self) -> &'static str {
        match self {
            ModuleKind::Tim => "tim",
            ModuleKind::Tamim => "tamim",
            ModuleKind::Mf => "mf",
            ModuleKind::It => "it",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationConfig {
    pub mode: AblationMode,
    pub seed: u64,
}

/// One evaluated condition: its label, metric report and raw generations
/// (kept so task-specific scores, like concept accuracy, can be layered on).
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionReport {
    pub condition: String,
    pub report: MetricReport,
    pub generations: Vec<GenerationOutput>,
}

/// The evaluation corpus plus everything needed to re-generate under a
/// condition.
pub struct EvalSetup<'a, T: Scalar> {
    pub cfg: &'a Config,
    pub bundle: &'a ModelBundle<T>,
    pub tokenizer: &'a Tokenizer,
    pub index: &'a ImageIndex,
    pub grids: &'a BTreeMap<String, ImagePatchGrid<T>>,
    /// Annotated eval corpus (image_ids present = the "relevant" images).
    pub corpus: &'a [DialogueExample],
}

fn evaluate_condition<T: Scalar>(
    setup: &EvalSetup<'_, T>,
    condition: &str,
    cfg: &Config,
    ids_for: &dyn Fn(usize, &DialogueExample) -> Result<Option<Vec<String>>>,
) -> Result<ConditionReport> {
    let mut generations = Vec::with_capacity(setup.corpus.len());
    let mut gold = Vec::with_capacity(setup.corpus.len());
    let mut items = Vec::with_capacity(setup.corpus.len());
    for (i, ex) in setup.corpus.iter().enumerate() {
        let ids = ids_for(i, ex)?;
        let source = match &ids {
            Some(ids) => ImageSource::Fixed(ids),
            None => ImageSource::Zeroed,
        };
        let output = generate_response(
            setup.bundle,
            setup.tokenizer,
            setup.index,
            setup.grids,
            cfg,
            &ex.context,
            source,
        )?;
        generations.push(output);
        gold.push(ex.response.clone());
        let annotated = DialogueExample {
            image_ids: ids.or_else(|| ex.image_ids.clone()),
            ..ex.clone()
        };
        // Teacher-forced item for perplexity; zeroed conditions reuse the
        // relevant annotation so ppl stays comparable across conditions.
        items.push(crate::pipeline::prepare_stage2_item(
            &annotated,
            setup.tokenizer,
            setup.grids,
            cfg.train.top_k,
            cfg.model.max_resp_len,
            i + 1,
        )?);
    }
    let texts: Vec<String> = generations.iter().map(|o| o.text.clone()).collect();
    let report = metric_report(
        setup.bundle,
        setup.tokenizer,
        &items,
        &texts,
        &gold,
        cfg.train.toggles.mf,
        cfg.train.toggles.it,
    )?;
    Ok(ConditionReport { condition: condition.into(), report, generations })
}

fn relevant_ids(ex: &DialogueExample, k: usize, line: usize) -> Result<Vec<String>> {
    let ids = ex.image_ids.as_ref().ok_or_else(|| {
        Error::Ingestion(format!("example {line}: missing image_ids for ablation"))
    })?;
    if ids.len() < k {
        return Err(Error::Ingestion(format!(
            "example {line}: has {} image ids, need {k}",
            ids.len()
        )));
    }
    Ok(ids[..k].to_vec())
}

/// Seeded uniform draw of replacement ids, excluding the example's own ids
/// when the index is large enough to allow it.
fn random_ids(index: &ImageIndex, exclude: &[String], k: usize, rng: &mut Rng) -> Vec<String> {
    let all: Vec<&str> = index.ids().collect();
    let pool: Vec<&str> = if all.len() > exclude.len() {
        all.iter().filter(|id| !exclude.iter().any(|e| e == **id)).copied().collect()
    } else {
        all.clone()
    };
    let pool = if pool.is_empty() { all } else { pool };
    (0..k).map(|_| String::from(pool[rng.below(pool.len())])).collect()
}

/// Runs every condition of the configured ablation mode and returns one
/// report per condition.
pub fn run_ablation<T: Scalar>(
    setup: &EvalSetup<'_, T>,
    ablation: &AblationConfig,
) -> Result<Vec<ConditionReport>> {
    let cfg = setup.cfg;
    let k = cfg.train.top_k;
    let mut out = Vec::new();
    match &ablation.mode {
        AblationMode::IrrelevantImages => {
            if k > setup.index.len() {
                return Err(Error::BoundedIndex { k, size: setup.index.len() });
            }
            out.push(evaluate_condition(setup, "relevant", cfg, &|i, ex| {
                relevant_ids(ex, k, i + 1).map(Some)
            })?);
            out.push(evaluate_condition(setup, "no-image", cfg, &|_, _| Ok(None))?);
            let seed = ablation.seed;
            out.push(evaluate_condition(setup, "random-image", cfg, &move |i, ex| {
                let relevant = relevant_ids(ex, k, i + 1)?;
                let mut rng = Rng::new(seed).split(streams::ABLATION).split(i as u64);
                Ok(Some(random_ids(setup.index, &relevant, k, &mut rng)))
            })?);
        }
        AblationMode::VaryK(ks) => {
            for &kk in ks {
                if kk == 0 || kk > setup.index.len() {
                    return Err(Error::BoundedIndex { k: kk, size: setup.index.len() });
                }
                let mut cfg_k = cfg.clone();
                cfg_k.train.top_k = kk;
                // Context-only retrieval at this k.
                let mut generations = Vec::new();
                let mut gold = Vec::new();
                let mut items = Vec::new();
                for (i, ex) in setup.corpus.iter().enumerate() {
                    let output = generate_response(
                        setup.bundle,
                        setup.tokenizer,
                        setup.index,
                        setup.grids,
                        &cfg_k,
                        &ex.context,
                        ImageSource::Retrieve,
                    )?;
                    let annotated = DialogueExample {
                        image_ids: Some(output.image_ids.clone()),
                        ..ex.clone()
                    };
                    items.push(crate::pipeline::prepare_stage2_item(
                        &annotated,
                        setup.tokenizer,
                        setup.grids,
                        kk,
                        cfg.model.max_resp_len,
                        i + 1,
                    )?);
                    gold.push(ex.response.clone());
                    generations.push(output);
                }
                let texts: Vec<String> = generations.iter().map(|o| o.text.clone()).collect();
                let report = metric_report(
                    setup.bundle,
                    setup.tokenizer,
                    &items,
                    &texts,
                    &gold,
                    cfg.train.toggles.mf,
                    cfg.train.toggles.it,
                )?;
                out.push(ConditionReport {
                    condition: format!("k={kk}"),
                    report,
                    generations,
                });
            }
        }
        AblationMode::DisableModule(modules) => {
            for &module in modules {
                let mut cfg_m = cfg.clone();
                let mut bundle_override: Option<ModelBundle<T>> = None;
                match module {
                    ModuleKind::Tim => {
                        // Untrained matching space: re-randomize both
                        // projections from the ablation seed.
                        let mut b = setup.bundle.clone();
                        let mut rng = Rng::new(ablation.seed).split(streams::ABLATION);
                        b.proj_img =
                            crate::nn::Linear::new(b.cfg.d_model, b.cfg.d_shared, &mut rng);
                        b.proj_txt =
                            crate::nn::Linear::new(b.cfg.d_model, b.cfg.d_shared, &mut rng);
                        bundle_override = Some(b);
                    }
                    ModuleKind::Tamim => {
                        // A training-time loss term; generation is unchanged.
                        cfg_m.train.toggles.tamim = false;
                    }
                    ModuleKind::Mf => cfg_m.train.toggles.mf = false,
                    ModuleKind::It => cfg_m.train.toggles.it = false,
                }
                let bundle_ref = bundle_override.as_ref().unwrap_or(setup.bundle);
                let sub = EvalSetup { bundle: bundle_ref, cfg: &cfg_m, ..*setup };
                let mut report = evaluate_condition(&sub, module.name(), &cfg_m, &|i, ex| {
                    relevant_ids(ex, cfg_m.train.top_k, i + 1).map(Some)
                })?;
                report.condition = format!("-{}", module.name());
                out.push(report);
            }
        }
    }
    Ok(out)
}
