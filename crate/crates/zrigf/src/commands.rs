//! CLI subcommand implementations.
//!
//! Data goes to stdout (or `--out` files); progress and diagnostics go to
//! stderr through `log`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::Serialize;

use zrigf_core::config::Config;
use zrigf_core::contrastive::PairItem;
use zrigf_core::eval::{
    run_ablation, AblationConfig, AblationMode, ConditionReport, EvalSetup, MetricReport,
    ModuleKind,
};
use zrigf_core::generative::Stage2Item;
use zrigf_core::gradcheck::{check_gradients, GradCheckConfig, GradCheckReport, ParamSet};
use zrigf_core::graph::{Graph, NodeId};
use zrigf_core::image::{normalize_image, patchify, ImagePatchGrid};
use zrigf_core::model::{ModelBundle, Stage};
use zrigf_core::nn::Dropout;
use zrigf_core::optim::AdamW;
use zrigf_core::pipeline::{
    generate_response, prepare_stage2_items, run_contrastive_stage, run_generative_stage,
    Checkpoint, CheckpointStage, GenerationOutput, ImageSource, StepLog,
};
use zrigf_core::retrieval::{self, DialogueExample, ImageIndex, RetrievalMode};
use zrigf_core::rng::{streams, Rng};
use zrigf_core::scalar::{Precision, Scalar};
use zrigf_core::synth::{self, SyntheticCorpusSpec};
use zrigf_core::tokenizer::Tokenizer;

use crate::formats::checkpoint_file::{load_checkpoint, save_checkpoint, AnyCheckpoint};
use crate::formats::index_file::{load_index, save_index};
use crate::formats::jsonl::{read_jsonl, write_jsonl, DialogueRecord, GenerationRecord, PairRecord};
use crate::formats::ppm::write_ppm;
use crate::store;

/// Flags shared by every subcommand; explicit flags override the config
/// file, which overrides the defaults.
#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Flat key=value configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// RNG seed (overrides the config file).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Numeric precision: f32 or f64 (overrides the config file).
    #[arg(long, global = true)]
    pub precision: Option<String>,
}

impl GlobalArgs {
    pub fn load(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                Config::parse(&text)?
            }
            None => Config::default(),
        };
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        if let Some(p) = &self.precision {
            cfg.train.precision = Precision::parse(p)
                .ok_or_else(|| anyhow!("invalid precision '{p}' (expected f32 or f64)"))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

// ---------------------------------------------------------------------------
// synth-data
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct SynthDataArgs {
    /// Output directory (created if absent).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub concepts: usize,
    #[arg(long, default_value_t = 36)]
    pub images_per_concept: usize,
    #[arg(long, default_value_t = 44)]
    pub dialogues_per_concept: usize,
    /// Held-out caption pairs per concept.
    #[arg(long, default_value_t = 4)]
    pub heldout_pairs: usize,
    /// Evaluation dialogues per concept.
    #[arg(long, default_value_t = 4)]
    pub eval_dialogues: usize,
    /// Fraction of captions written as dialogue transcripts.
    #[arg(long, default_value_t = 0.5)]
    pub transcript_fraction: f64,
}

#[derive(Serialize)]
struct ConceptsFile {
    concepts: Vec<String>,
    image_concepts: BTreeMap<String, String>,
}

pub fn synth_data(global: &GlobalArgs, args: &SynthDataArgs) -> Result<()> {
    let cfg = global.load()?;
    let spec = SyntheticCorpusSpec {
        n_concepts: args.concepts,
        images_per_concept: args.images_per_concept,
        dialogues_per_concept: args.dialogues_per_concept,
        image_size: cfg.model.image_size,
        transcript_fraction: args.transcript_fraction,
    };
    let root = Rng::new(cfg.train.seed).split(streams::SYNTH);
    let data = synth::generate_synthetic_corpus(&spec, &root);

    let img_dir = args.out.join("images");
    std::fs::create_dir_all(&img_dir)?;
    for img in &data.images {
        write_ppm(&img_dir.join(format!("{}.ppm", img.id)), &img.pixels)?;
    }

    let pair_record = |p: &synth::SynthPair| PairRecord {
        image: format!("images/{}.ppm", p.image_id),
        caption: p.caption.clone(),
    };
    let (train_pairs, held_pairs) = data.split_pairs(args.heldout_pairs);
    write_jsonl(
        &args.out.join("pairs.train.jsonl"),
        &train_pairs.iter().map(|p| pair_record(p)).collect::<Vec<_>>(),
    )?;
    write_jsonl(
        &args.out.join("pairs.heldout.jsonl"),
        &held_pairs.iter().map(|p| pair_record(p)).collect::<Vec<_>>(),
    )?;

    let dialogue_record = |d: &synth::SynthDialogue| DialogueRecord {
        context: d.context.clone(),
        response: d.response.clone(),
        image_ids: None,
        retrieval_mode: None,
    };
    let (train_d, eval_d) = data.split_dialogues(args.eval_dialogues);
    write_jsonl(
        &args.out.join("dialogues.train.jsonl"),
        &train_d.iter().map(|d| dialogue_record(d)).collect::<Vec<_>>(),
    )?;
    write_jsonl(
        &args.out.join("dialogues.eval.jsonl"),
        &eval_d.iter().map(|d| dialogue_record(d)).collect::<Vec<_>>(),
    )?;

    let concepts = ConceptsFile {
        concepts: data.concepts.iter().map(|c| c.phrase()).collect(),
        image_concepts: data
            .images
            .iter()
            .map(|i| (i.id.clone(), data.concepts[i.concept].phrase()))
            .collect(),
    };
    std::fs::write(
        args.out.join("concepts.json"),
        serde_json::to_string_pretty(&concepts)?,
    )?;
    log::info!(
        "wrote {} images, {}+{} pairs, {}+{} dialogues to {}",
        data.images.len(),
        train_pairs.len(),
        held_pairs.len(),
        train_d.len(),
        eval_d.len(),
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// contrastive-pretrain
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct ContrastiveArgs {
    /// Image-caption pair corpus (JSONL).
    #[arg(long)]
    pub pairs: PathBuf,
    /// Extra dialogue corpora whose words join the vocabulary.
    #[arg(long = "vocab-from")]
    pub vocab_from: Vec<PathBuf>,
    /// Output checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Resume from an existing stage-1 checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Interrupt after this many total steps (the schedule is unchanged).
    #[arg(long)]
    pub stop_after: Option<u64>,
}

fn log_step(prefix: &str) -> impl FnMut(&StepLog) {
    let label = prefix.to_string();
    move |log: &StepLog| {
        if log.step % 10 == 0 {
            log::info!(
                "{label} step {}: loss {:.4} ({:.4} / {:.4}) lr {:.2e} |g| {:.3}",
                log.step,
                log.loss,
                log.aux_a,
                log.aux_b,
                log.lr,
                log.grad_norm
            );
        }
    }
}

fn build_pair_items<T: Scalar>(
    resolved: &[(String, zrigf_core::image::PixelImage, String)],
    tokenizer: &Tokenizer,
    patch_size: usize,
) -> Result<Vec<PairItem<T>>> {
    resolved
        .iter()
        .map(|(id, img, caption)| {
            let grid = patchify(&normalize_image::<T>(img), patch_size)
                .with_context(|| format!("patchifying image '{id}'"))?;
            Ok(PairItem { grid, caption_ids: tokenizer.encode_text(caption) })
        })
        .collect()
}

fn contrastive_typed<T: Scalar>(
    cfg: &Config,
    args: &ContrastiveArgs,
    resolved: &[(String, zrigf_core::image::PixelImage, String)],
    tokenizer: &Tokenizer,
) -> Result<()> {
    let items = build_pair_items::<T>(resolved, tokenizer, cfg.model.patch_size)?;
    let root = Rng::new(cfg.train.seed);
    let (mut bundle, mut opt, start_step) = match &args.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let ckpt = match ckpt {
                AnyCheckpoint::F32(_) if T::DTYPE != zrigf_core::scalar::Dtype::F32 => {
                    bail!("checkpoint precision f32 does not match requested precision")
                }
                AnyCheckpoint::F64(_) if T::DTYPE != zrigf_core::scalar::Dtype::F64 => {
                    bail!("checkpoint precision f64 does not match requested precision")
                }
                AnyCheckpoint::F32(c) => unsafe_cast_checkpoint::<f32, T>(c),
                AnyCheckpoint::F64(c) => unsafe_cast_checkpoint::<f64, T>(c),
            };
            if ckpt.stage != CheckpointStage::Contrastive {
                bail!("--resume expects a stage-1 checkpoint");
            }
            let step = ckpt.stage_step;
            let (bundle, _tok, opt, _root) = ckpt.restore()?;
            (bundle, opt, step)
        }
        None => {
            let mut init_rng = root.split(streams::INIT);
            let bundle =
                ModelBundle::<T>::new(&cfg.model, tokenizer.vocab_size(), cfg.train.tau_init, &mut init_rng)?;
            (bundle, AdamW::new(), 0)
        }
    };
    let mut cb = log_step("stage1");
    let logs = run_contrastive_stage(
        cfg,
        &items,
        &mut bundle,
        &mut opt,
        start_step,
        args.stop_after,
        &root,
        Some(&mut cb),
    )?;
    let done = start_step + logs.len() as u64;
    let ckpt = Checkpoint::capture(
        cfg,
        &bundle,
        tokenizer,
        &opt,
        CheckpointStage::Contrastive,
        done,
        &root,
    );
    save_checkpoint(&args.out, &ckpt)?;
    log::info!("stage 1 complete at step {done}; checkpoint written to {}", args.out.display());
    Ok(())
}

/// The two precision paths are compiled separately; a checkpoint can only be
/// reinterpreted at its own precision, which the caller has already checked.
fn unsafe_cast_checkpoint<A: Scalar, B: Scalar>(c: Checkpoint<A>) -> Checkpoint<B> {
    debug_assert_eq!(A::DTYPE, B::DTYPE);
    Checkpoint {
        config: c.config,
        vocab: c.vocab,
        stage: c.stage,
        stage_step: c.stage_step,
        arrays: c
            .arrays
            .into_iter()
            .map(|(n, s, d)| (n, s, d.into_iter().map(|v| B::from_f64(v.to_f64())).collect()))
            .collect(),
        moments: c.moments,
        opt_step: c.opt_step,
        rng_state: c.rng_state,
    }
}

pub fn contrastive_pretrain(global: &GlobalArgs, args: &ContrastiveArgs) -> Result<()> {
    let cfg = global.load()?;
    let pairs: Vec<PairRecord> = read_jsonl(&args.pairs)?;
    if pairs.is_empty() {
        bail!("pair corpus {} is empty", args.pairs.display());
    }
    let resolved = store::resolve_pairs(&pairs, &args.pairs)?;
    let mut vocab_texts: Vec<String> = resolved.iter().map(|(_, _, c)| c.clone()).collect();
    for path in &args.vocab_from {
        let dialogues: Vec<DialogueRecord> = read_jsonl(path)?;
        for d in dialogues {
            vocab_texts.extend(d.context);
            vocab_texts.push(d.response);
        }
    }
    let tokenizer = Tokenizer::from_texts(vocab_texts.iter().map(String::as_str));
    log::info!(
        "training on {} pairs, vocab size {}, precision {}",
        resolved.len(),
        tokenizer.vocab_size(),
        cfg.train.precision.as_str()
    );
    match cfg.train.precision {
        Precision::F32 => contrastive_typed::<f32>(&cfg, args, &resolved, &tokenizer),
        Precision::F64 => contrastive_typed::<f64>(&cfg, args, &resolved, &tokenizer),
    }
}

// ---------------------------------------------------------------------------
// build-index
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct BuildIndexArgs {
    /// Stage-1 (or later) checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory of .ppm images to index.
    #[arg(long)]
    pub images: PathBuf,
    /// Output index path.
    #[arg(long)]
    pub out: PathBuf,
}

fn build_index_typed<T: Scalar>(ckpt: Checkpoint<T>, args: &BuildIndexArgs) -> Result<()> {
    let (bundle, _tok, _opt, _rng) = ckpt.restore()?;
    let images = store::load_image_dir(&args.images)?;
    let index = retrieval::build_index(
        images.iter().map(|(id, img)| (id.as_str(), img)),
        &bundle,
    )?;
    retrieval::validate_index(&index)?;
    save_index(&args.out, &index)?;
    log::info!("indexed {} images into {}", index.len(), args.out.display());
    Ok(())
}

pub fn build_index_cmd(_global: &GlobalArgs, args: &BuildIndexArgs) -> Result<()> {
    match load_checkpoint(&args.checkpoint)? {
        AnyCheckpoint::F32(c) => build_index_typed(c, args),
        AnyCheckpoint::F64(c) => build_index_typed(c, args),
    }
}

// ---------------------------------------------------------------------------
// retrieve
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub index: PathBuf,
    /// Query text (whitespace-tokenized).
    #[arg(long)]
    pub text: String,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    pub k: u64,
}

#[derive(Serialize)]
struct RetrieveOut {
    image_id: String,
    score: f64,
    softmax: f64,
}

fn retrieve_typed<T: Scalar>(ckpt: Checkpoint<T>, args: &RetrieveArgs) -> Result<()> {
    let (bundle, tokenizer, _opt, _rng) = ckpt.restore()?;
    let index = load_index(&args.index)?;
    let ids = tokenizer.encode_text(&args.text);
    let result = retrieval::retrieve_top_k(
        &index,
        &bundle,
        &ids,
        args.k as usize,
        RetrievalMode::ContextOnly,
    )?;
    let probs = retrieval::softmax_scores(&result.ranked);
    let stdout = std::io::stdout();
    let mut w = stdout.lock();
    for (s, p) in result.ranked.iter().zip(probs) {
        let line = RetrieveOut { image_id: s.image_id.clone(), score: s.score, softmax: p };
        writeln!(w, "{}", serde_json::to_string(&line)?)?;
    }
    Ok(())
}

pub fn retrieve(_global: &GlobalArgs, args: &RetrieveArgs) -> Result<()> {
    match load_checkpoint(&args.checkpoint)? {
        AnyCheckpoint::F32(c) => retrieve_typed(c, args),
        AnyCheckpoint::F64(c) => retrieve_typed(c, args),
    }
}

// ---------------------------------------------------------------------------
// annotate-corpus
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    #[value(name = "context-only")]
    ContextOnly,
    #[value(name = "context+response")]
    ContextAndResponse,
}

impl From<ModeArg> for RetrievalMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::ContextOnly => RetrievalMode::ContextOnly,
            ModeArg::ContextAndResponse => RetrievalMode::ContextAndResponse,
        }
    }
}

#[derive(Debug, Args)]
pub struct AnnotateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub index: PathBuf,
    /// Dialogue corpus to annotate (JSONL).
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "context+response")]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    pub k: u64,
}

fn annotate_typed<T: Scalar>(ckpt: Checkpoint<T>, args: &AnnotateArgs) -> Result<()> {
    let (bundle, tokenizer, _opt, _rng) = ckpt.restore()?;
    let index = load_index(&args.index)?;
    let records: Vec<DialogueRecord> = read_jsonl(&args.corpus)?;
    let corpus: Vec<DialogueExample> = records.into_iter().map(Into::into).collect();
    let annotated = retrieval::precompute_corpus_retrievals(
        &index,
        &bundle,
        &tokenizer,
        &corpus,
        args.k as usize,
        args.mode.into(),
    )?;
    let out: Vec<DialogueRecord> = annotated.iter().map(Into::into).collect();
    write_jsonl(&args.out, &out)?;
    log::info!("annotated {} examples into {}", out.len(), args.out.display());
    Ok(())
}

pub fn annotate_corpus(_global: &GlobalArgs, args: &AnnotateArgs) -> Result<()> {
    match load_checkpoint(&args.checkpoint)? {
        AnyCheckpoint::F32(c) => annotate_typed(c, args),
        AnyCheckpoint::F64(c) => annotate_typed(c, args),
    }
}

// ---------------------------------------------------------------------------
// generative-pretrain
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct GenerativeArgs {
    /// Annotated dialogue corpus (JSONL with image_ids).
    #[arg(long)]
    pub corpus: PathBuf,
    /// Directory of the corpus' images (.ppm).
    #[arg(long)]
    pub images: PathBuf,
    /// Stage-1 checkpoint to initialize from.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Resume from an existing stage-2 checkpoint instead.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub stop_after: Option<u64>,
}

fn generative_typed<T: Scalar>(
    init: Checkpoint<T>,
    cfg_override: Option<&Config>,
    args: &GenerativeArgs,
) -> Result<()> {
    let cfg = cfg_override.cloned().unwrap_or_else(|| init.config.clone());
    let (mut bundle, tokenizer, init_opt, _rng) = init.restore()?;
    let (mut opt, start_step) = match init.stage {
        CheckpointStage::Generative => (init_opt, init.stage_step),
        CheckpointStage::Contrastive => (AdamW::new(), 0),
    };
    let records: Vec<DialogueRecord> = read_jsonl(&args.corpus)?;
    let corpus: Vec<DialogueExample> = records.into_iter().map(Into::into).collect();
    let images = store::load_image_dir(&args.images)?;
    let grids = store::grids_of::<T>(&images, cfg.model.patch_size)?;
    let items = prepare_stage2_items(&corpus, &tokenizer, &grids, cfg.train.top_k, cfg.model.max_resp_len)?;
    let root = Rng::new(cfg.train.seed);
    let mut cb = log_step("stage2");
    let logs = run_generative_stage(
        &cfg,
        &items,
        &mut bundle,
        &mut opt,
        start_step,
        args.stop_after,
        &root,
        Some(&mut cb),
    )?;
    let done = start_step + logs.len() as u64;
    let ckpt = Checkpoint::capture(
        &cfg,
        &bundle,
        &tokenizer,
        &opt,
        CheckpointStage::Generative,
        done,
        &root,
    );
    save_checkpoint(&args.out, &ckpt)?;
    log::info!("stage 2 complete at step {done}; checkpoint written to {}", args.out.display());
    Ok(())
}

pub fn generative_pretrain(global: &GlobalArgs, args: &GenerativeArgs) -> Result<()> {
    let source = args.resume.as_ref().unwrap_or(&args.checkpoint);
    let cfg_override = if global.config.is_some() || global.seed.is_some() {
        Some(global.load()?)
    } else {
        None
    };
    match load_checkpoint(source)? {
        AnyCheckpoint::F32(c) => generative_typed(c, cfg_override.as_ref(), args),
        AnyCheckpoint::F64(c) => generative_typed(c, cfg_override.as_ref(), args),
    }
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub images: PathBuf,
    /// One dialogue context; turns separated by `||`.
    #[arg(long, conflicts_with = "input")]
    pub context: Option<String>,
    /// Dialogue corpus whose contexts are answered (JSONL).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Use each record's image_ids annotations instead of retrieving.
    #[arg(long, default_value_t = false)]
    pub use_annotations: bool,
    /// Output JSONL (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn generation_record(context: &[String], output: &GenerationOutput) -> GenerationRecord {
    GenerationRecord {
        context: context.to_vec(),
        generated: output.text.clone(),
        image_ids: output.image_ids.clone(),
        scores: output
            .image_ids
            .iter()
            .cloned()
            .zip(output.scores.iter().copied())
            .collect(),
    }
}

fn generate_typed<T: Scalar>(ckpt: Checkpoint<T>, args: &GenerateArgs) -> Result<()> {
    let cfg = ckpt.config.clone();
    let (bundle, tokenizer, _opt, _rng) = ckpt.restore()?;
    let index = load_index(&args.index)?;
    let images = store::load_image_dir(&args.images)?;
    let grids = store::grids_of::<T>(&images, cfg.model.patch_size)?;
    let contexts: Vec<(Vec<String>, Option<Vec<String>>)> = match (&args.context, &args.input) {
        (Some(c), None) => {
            vec![(c.split("||").map(|s| s.trim().to_string()).collect(), None)]
        }
        (None, Some(path)) => {
            let records: Vec<DialogueRecord> = read_jsonl(path)?;
            records.into_iter().map(|r| (r.context, r.image_ids)).collect()
        }
        _ => bail!("provide exactly one of --context or --input"),
    };
    let mut lines = Vec::with_capacity(contexts.len());
    for (i, (context, annotated)) in contexts.iter().enumerate() {
        let source = if args.use_annotations {
            let ids = annotated.as_ref().ok_or_else(|| {
                anyhow!("record {}: --use-annotations requires image_ids", i + 1)
            })?;
            ImageSource::Fixed(ids)
        } else {
            ImageSource::Retrieve
        };
        let output =
            generate_response(&bundle, &tokenizer, &index, &grids, &cfg, context, source)?;
        lines.push(generation_record(context, &output));
    }
    match &args.out {
        Some(path) => write_jsonl(path, &lines)?,
        None => {
            let stdout = std::io::stdout();
            let mut w = stdout.lock();
            for l in &lines {
                writeln!(w, "{}", serde_json::to_string(l)?)?;
            }
        }
    }
    Ok(())
}

pub fn generate(_global: &GlobalArgs, args: &GenerateArgs) -> Result<()> {
    match load_checkpoint(&args.checkpoint)? {
        AnyCheckpoint::F32(c) => generate_typed(c, args),
        AnyCheckpoint::F64(c) => generate_typed(c, args),
    }
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub images: PathBuf,
    /// Evaluation dialogue corpus (JSONL).
    #[arg(long)]
    pub corpus: PathBuf,
    /// Use the corpus' image_ids annotations instead of retrieving.
    #[arg(long, default_value_t = false)]
    pub use_annotations: bool,
    /// Also write the report row as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Serialize)]
pub struct ReportJson {
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

impl From<&MetricReport> for ReportJson {
    fn from(r: &MetricReport) -> Self {
        ReportJson {
            ppl: r.ppl,
            bleu1: r.bleu1,
            rouge_l: r.rouge_l,
            average: r.average,
            extrema: r.extrema,
            greedy: r.greedy,
            dist1: r.dist1,
            dist2: r.dist2,
            n_examples: r.n_examples,
        }
    }
}

pub fn report_csv(report: &MetricReport) -> String {
    format!(
        "ppl,bleu1,rouge_l,average,extrema,greedy,dist1,dist2,n_examples\n{},{},{},{},{},{},{},{},{}\n",
        report.ppl,
        report.bleu1,
        report.rouge_l,
        report.average,
        report.extrema,
        report.greedy,
        report.dist1,
        report.dist2,
        report.n_examples
    )
}

/// Generates responses plus teacher-forced items for a corpus, using either
/// the annotations or fresh context-only retrieval for the images.
pub fn evaluate_corpus<T: Scalar>(
    cfg: &Config,
    bundle: &ModelBundle<T>,
    tokenizer: &Tokenizer,
    index: &ImageIndex,
    grids: &BTreeMap<String, ImagePatchGrid<T>>,
    corpus: &[DialogueExample],
    use_annotations: bool,
) -> Result<(MetricReport, Vec<GenerationOutput>)> {
    let mut generations = Vec::with_capacity(corpus.len());
    let mut items: Vec<Stage2Item<T>> = Vec::with_capacity(corpus.len());
    let mut gold = Vec::with_capacity(corpus.len());
    for (i, ex) in corpus.iter().enumerate() {
        let source = if use_annotations {
            let ids = ex.image_ids.as_ref().ok_or_else(|| {
                anyhow!("example {}: --use-annotations requires image_ids", i + 1)
            })?;
            ImageSource::Fixed(ids)
        } else {
            ImageSource::Retrieve
        };
        let output =
            generate_response(bundle, tokenizer, index, grids, cfg, &ex.context, source)?;
        let annotated =
            DialogueExample { image_ids: Some(output.image_ids.clone()), ..ex.clone() };
        items.push(zrigf_core::pipeline::prepare_stage2_item(
            &annotated,
            tokenizer,
            grids,
            cfg.train.top_k,
            cfg.model.max_resp_len,
            i + 1,
        )?);
        gold.push(ex.response.clone());
        generations.push(output);
    }
    let texts: Vec<String> = generations.iter().map(|o| o.text.clone()).collect();
    let report = zrigf_core::eval::metric_report(
        bundle,
        tokenizer,
        &items,
        &texts,
        &gold,
        cfg.train.toggles.mf,
        cfg.train.toggles.it,
    )?;
    Ok((report, generations))
}

fn evaluate_typed<T: Scalar>(ckpt: Checkpoint<T>, args: &EvaluateArgs) -> Result<()> {
    let cfg = ckpt.config.clone();
    let (bundle, tokenizer, _opt, _rng) = ckpt.restore()?;
    let index = load_index(&args.index)?;
    let images = store::load_image_dir(&args.images)?;
    let grids = store::grids_of::<T>(&images, cfg.model.patch_size)?;
    let records: Vec<DialogueRecord> = read_jsonl(&args.corpus)?;
    let corpus: Vec<DialogueExample> = records.into_iter().map(Into::into).collect();
    let (report, _) = evaluate_corpus(
        &cfg,
        &bundle,
        &tokenizer,
        &index,
        &grids,
        &corpus,
        args.use_annotations,
    )?;
    println!("{}", serde_json::to_string_pretty(&ReportJson::from(&report))?);
    if let Some(path) = &args.csv {
        std::fs::write(path, report_csv(&report))?;
    }
    Ok(())
}

pub fn evaluate(_global: &GlobalArgs, args: &EvaluateArgs) -> Result<()> {
    match load_checkpoint(&args.checkpoint)? {
        AnyCheckpoint::F32(c) => evaluate_typed(c, args),
        AnyCheckpoint::F64(c) => evaluate_typed(c, args),
    }
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AblationModeArg {
    #[value(name = "irrelevant-images")]
    IrrelevantImages,
    #[value(name = "vary-k")]
    VaryK,
    #[value(name = "disable-module")]
    DisableModule,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub images: PathBuf,
    /// Annotated evaluation corpus (JSONL with image_ids).
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum)]
    pub mode: AblationModeArg,
    /// k values for vary-k mode.
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 3, 5])]
    pub k_values: Vec<usize>,
    /// Modules for disable-module mode.
    #[arg(long, value_delimiter = ',', default_values_t = ["tim".to_string(), "tamim".to_string(), "mf".to_string(), "it".to_string()])]
    pub modules: Vec<String>,
    /// Output JSONL (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct AblateOut {
    condition: String,
    report: ReportJson,
}

fn parse_modules(names: &[String]) -> Result<Vec<ModuleKind>> {
    names
        .iter()
        .map(|n| match n.as_str() {
            "tim" => Ok(ModuleKind::Tim),
            "tamim" => Ok(ModuleKind::Tamim),
            "mf" => Ok(ModuleKind::Mf),
            "it" => Ok(ModuleKind::It),
            other => Err(anyhow!("unknown module '{other}' (expected tim|tamim|mf|it)")),
        })
        .collect()
}

fn ablate_typed<T: Scalar>(
    ckpt: Checkpoint<T>,
    args: &AblateArgs,
    seed: u64,
) -> Result<Vec<ConditionReport>> {
    let cfg = ckpt.config.clone();
    let (bundle, tokenizer, _opt, _rng) = ckpt.restore()?;
    let index = load_index(&args.index)?;
    let images = store::load_image_dir(&args.images)?;
    let grids = store::grids_of::<T>(&images, cfg.model.patch_size)?;
    let records: Vec<DialogueRecord> = read_jsonl(&args.corpus)?;
    let corpus: Vec<DialogueExample> = records.into_iter().map(Into::into).collect();
    let mode = match args.mode {
        AblationModeArg::IrrelevantImages => AblationMode::IrrelevantImages,
        AblationModeArg::VaryK => AblationMode::VaryK(args.k_values.clone()),
        AblationModeArg::DisableModule => AblationMode::DisableModule(parse_modules(&args.modules)?),
    };
    let setup = EvalSetup {
        cfg: &cfg,
        bundle: &bundle,
        tokenizer: &tokenizer,
        index: &index,
        grids: &grids,
        corpus: &corpus,
    };
    Ok(run_ablation(&setup, &AblationConfig { mode, seed })?)
}

pub fn ablate(global: &GlobalArgs, args: &AblateArgs) -> Result<()> {
    let seed = global.seed.unwrap_or(0);
    let reports = match load_checkpoint(&args.checkpoint)? {
        AnyCheckpoint::F32(c) => ablate_typed(c, args, seed)?,
        AnyCheckpoint::F64(c) => ablate_typed(c, args, seed)?,
    };
    let lines: Vec<AblateOut> = reports
        .iter()
        .map(|r| AblateOut { condition: r.condition.clone(), report: (&r.report).into() })
        .collect();
    match &args.out {
        Some(path) => write_jsonl(path, &lines)?,
        None => {
            let stdout = std::io::stdout();
            let mut w = stdout.lock();
            for l in &lines {
                writeln!(w, "{}", serde_json::to_string(l)?)?;
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// grad-check
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Objective {
    Eq7,
    Eq16,
    Both,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    /// Which stage objective to differentiate.
    #[arg(long, value_enum, default_value = "both")]
    pub objective: Objective,
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    /// Components sampled per parameter tensor (0 = all).
    #[arg(long, default_value_t = 16)]
    pub max_components: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value_t = 1)]
    pub enc_layers: usize,
}

/// Builds the toy geometry used for gradient verification. Checks run in
/// 64-bit regardless of the configured training precision.
pub fn grad_check_config(d_model: usize, enc_layers: usize) -> Config {
    let mut cfg = Config::default();
    cfg.model.d_model = d_model;
    cfg.model.d_shared = (d_model / 2).max(2);
    cfg.model.d_ff = d_model * 2;
    cfg.model.n_heads = if d_model % 4 == 0 { 4 } else { 1 };
    cfg.model.n_enc_layers = enc_layers;
    cfg.model.n_dec_layers = enc_layers;
    cfg.model.image_size = 8;
    cfg.model.patch_size = 4;
    cfg.model.max_text_len = 12;
    cfg.model.max_resp_len = 10;
    cfg.train.mask_block = 1;
    cfg
}

fn synthetic_fixture(cfg: &Config, batch: usize, seed: u64) -> (Tokenizer, Vec<PairItem<f64>>, Vec<Stage2Item<f64>>) {
    let spec = SyntheticCorpusSpec {
        n_concepts: 4,
        images_per_concept: 2,
        dialogues_per_concept: 2,
        image_size: cfg.model.image_size,
        transcript_fraction: 0.5,
    };
    let data = synth::generate_synthetic_corpus(&spec, &Rng::new(seed).split(streams::SYNTH));
    let texts: Vec<String> = data
        .pairs
        .iter()
        .map(|p| p.caption.clone())
        .chain(data.dialogues.iter().flat_map(|d| {
            d.context.iter().cloned().chain(std::iter::once(d.response.clone()))
        }))
        .collect();
    let tokenizer = Tokenizer::from_texts(texts.iter().map(String::as_str));
    let grid_of = |id: &str| {
        let img = &data.image_by_id(id).unwrap().pixels;
        patchify(&normalize_image::<f64>(img), cfg.model.patch_size).unwrap()
    };
    let pair_items: Vec<PairItem<f64>> = data.pairs[..batch.min(data.pairs.len())]
        .iter()
        .map(|p| PairItem {
            grid: grid_of(&p.image_id),
            caption_ids: tokenizer.encode_text(&p.caption),
        })
        .collect();
    let k = 2;
    let stage2: Vec<Stage2Item<f64>> = data.dialogues[..batch.min(data.dialogues.len())]
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let ids: Vec<String> = (0..k)
                .map(|j| data.images[(i * k + j) % data.images.len()].id.clone())
                .collect();
            let ex = DialogueExample {
                context: d.context.clone(),
                response: d.response.clone(),
                image_ids: Some(ids),
                retrieval_mode: Some("context+response".into()),
            };
            let grids: BTreeMap<String, ImagePatchGrid<f64>> = data
                .images
                .iter()
                .map(|im| (im.id.clone(), grid_of(&im.id)))
                .collect();
            zrigf_core::pipeline::prepare_stage2_item(
                &ex,
                &tokenizer,
                &grids,
                k,
                cfg.model.max_resp_len,
                i + 1,
            )
            .unwrap()
        })
        .collect();
    (tokenizer, pair_items, stage2)
}

fn snapshot_params(bundle: &ModelBundle<f64>) -> ParamSet {
    let mut params = ParamSet::default();
    bundle.visit_params(&mut |name, t| {
        if t.requires_grad {
            params.push(name, t.clone());
        }
    });
    params
}

fn load_params(bundle: &ModelBundle<f64>, ps: &ParamSet) -> ModelBundle<f64> {
    let by_name: BTreeMap<&str, &zrigf_core::tensor::Tensor<f64>> =
        ps.names.iter().map(String::as_str).zip(ps.tensors.iter()).collect();
    let mut out = bundle.clone();
    out.visit_params_mut(&mut |name, t| {
        if let Some(src) = by_name.get(name.as_str()) {
            t.data_mut().copy_from_slice(src.data());
        }
    });
    out
}

fn nodes_for(g: &mut Graph<f64>, bundle: &ModelBundle<f64>, ps: &ParamSet) -> Vec<NodeId> {
    let mut by_name = BTreeMap::new();
    bundle.visit_params(&mut |name, t| {
        if t.requires_grad {
            by_name.insert(name, g.param(t));
        }
    });
    ps.names.iter().map(|n| by_name[n]).collect()
}

/// Verifies the full stage-1 objective's gradients against central
/// differences; every trainable tensor is covered, sampling components.
pub fn grad_check_stage1(
    cfg: &Config,
    batch: usize,
    max_components: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport> {
    let (tokenizer, pair_items, _) = synthetic_fixture(cfg, batch, seed);
    let mut init = Rng::new(seed).split(streams::INIT);
    let mut bundle =
        ModelBundle::<f64>::new(&cfg.model, tokenizer.vocab_size(), cfg.train.tau_init, &mut init)?;
    bundle.apply_stage_freeze(Stage::Contrastive);
    let params = snapshot_params(&bundle);
    let t = cfg.train.clone();
    let program = move |g: &mut Graph<f64>, ps: &ParamSet| {
        let loaded = load_params(&bundle, ps);
        let nodes = nodes_for(g, &loaded, ps);
        let mut mask_rng = Rng::new(seed).split(streams::MASK);
        let losses = zrigf_core::contrastive::build_stage1_loss(
            g,
            &loaded,
            &pair_items,
            t.lambda1,
            t.mask_ratio,
            t.mask_block,
            true,
            true,
            &mut mask_rng,
            &mut Dropout::off(),
        )
        .expect("stage-1 loss builds");
        (nodes, losses.total)
    };
    let check = GradCheckConfig {
        max_components: max_components.filter(|c| *c > 0),
        seed,
        ..Default::default()
    };
    Ok(check_gradients(&program, &params, &check))
}

/// Verifies the full stage-2 objective's gradients the same way.
pub fn grad_check_stage2(
    cfg: &Config,
    batch: usize,
    max_components: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport> {
    let (tokenizer, _, items) = synthetic_fixture(cfg, batch, seed);
    let mut init = Rng::new(seed).split(streams::INIT);
    let bundle =
        ModelBundle::<f64>::new(&cfg.model, tokenizer.vocab_size(), cfg.train.tau_init, &mut init)?;
    let params = snapshot_params(&bundle);
    let t = cfg.train.clone();
    let program = move |g: &mut Graph<f64>, ps: &ParamSet| {
        let loaded = load_params(&bundle, ps);
        let nodes = nodes_for(g, &loaded, ps);
        let losses = zrigf_core::generative::build_stage2_loss(
            g,
            &loaded,
            &items,
            t.lambda2,
            t.label_smoothing,
            true,
            true,
            &mut Dropout::off(),
        )
        .expect("stage-2 loss builds");
        (nodes, losses.total)
    };
    let check = GradCheckConfig {
        max_components: max_components.filter(|c| *c > 0),
        seed,
        ..Default::default()
    };
    Ok(check_gradients(&program, &params, &check))
}

#[derive(Serialize)]
struct GradCheckOut {
    objective: String,
    max_rel_err: f64,
    tol: f64,
    pass: bool,
    params_checked: usize,
    worst_param: String,
}

fn emit_report(objective: &str, report: &GradCheckReport, tol: f64) -> Result<bool> {
    for p in &report.params {
        log::info!(
            "{objective} {:<40} checked {:>4} max rel err {:.3e}",
            p.name,
            p.checked,
            p.max_rel_err
        );
    }
    let worst = report
        .params
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .map(|p| p.name.clone())
        .unwrap_or_default();
    let pass = report.passes(tol);
    let out = GradCheckOut {
        objective: objective.into(),
        max_rel_err: report.max_rel_err,
        tol,
        pass,
        params_checked: report.params.len(),
        worst_param: worst,
    };
    println!("{}", serde_json::to_string(&out)?);
    Ok(pass)
}

pub fn grad_check(global: &GlobalArgs, args: &GradCheckArgs) -> Result<()> {
    let seed = global.seed.unwrap_or(0);
    let cfg = grad_check_config(args.d_model, args.enc_layers);
    let cap = if args.max_components == 0 { None } else { Some(args.max_components) };
    let mut all_pass = true;
    if matches!(args.objective, Objective::Eq7 | Objective::Both) {
        let report = grad_check_stage1(&cfg, args.batch, cap, seed)?;
        all_pass &= emit_report("stage1", &report, args.tol)?;
    }
    if matches!(args.objective, Objective::Eq16 | Objective::Both) {
        let report = grad_check_stage2(&cfg, args.batch, cap, seed)?;
        all_pass &= emit_report("stage2", &report, args.tol)?;
    }
    if !all_pass {
        bail!("gradient check exceeded tolerance {}", args.tol);
    }
    Ok(())
}
