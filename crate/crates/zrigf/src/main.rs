use clap::{Parser, Subcommand};

use zrigf::commands::{self, GlobalArgs};

/// Two-stage multimodal dialogue pipeline: contrastive text-image
/// pre-training, retrieval-grounded generative pre-training, and evaluation.
#[derive(Parser)]
#[command(name = "zrigf", version, about, max_term_width = 100)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic grounded corpus (images, pairs, dialogues).
    SynthData(commands::SynthDataArgs),
    /// Stage 1: contrastive matching + masked-reconstruction training.
    ContrastivePretrain(commands::ContrastiveArgs),
    /// Encode images with a trained checkpoint into a retrieval index.
    BuildIndex(commands::BuildIndexArgs),
    /// Query the index with a text.
    Retrieve(commands::RetrieveArgs),
    /// Attach top-k image ids to a dialogue corpus, once, before stage 2.
    AnnotateCorpus(commands::AnnotateArgs),
    /// Stage 2: retrieval-grounded response generation training.
    GenerativePretrain(commands::GenerativeArgs),
    /// Generate responses for dialogue contexts.
    Generate(commands::GenerateArgs),
    /// Automatic metrics over an evaluation corpus.
    Evaluate(commands::EvaluateArgs),
    /// Ablation harness: irrelevant images, vary-k, or module disabling.
    Ablate(commands::AblateArgs),
    /// Verify autodiff gradients against central differences (64-bit).
    GradCheck(commands::GradCheckArgs),
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::SynthData(args) => commands::synth_data(&cli.global, args),
        Command::ContrastivePretrain(args) => commands::contrastive_pretrain(&cli.global, args),
        Command::BuildIndex(args) => commands::build_index_cmd(&cli.global, args),
        Command::Retrieve(args) => commands::retrieve(&cli.global, args),
        Command::AnnotateCorpus(args) => commands::annotate_corpus(&cli.global, args),
        Command::GenerativePretrain(args) => commands::generative_pretrain(&cli.global, args),
        Command::Generate(args) => commands::generate(&cli.global, args),
        Command::Evaluate(args) => commands::evaluate(&cli.global, args),
        Command::Ablate(args) => commands::ablate(&cli.global, args),
        Command::GradCheck(args) => commands::grad_check(&cli.global, args),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
