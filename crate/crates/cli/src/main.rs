use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use deskmt::corpus::{read_lines, read_parallel_tsv, write_lines, write_parallel_tsv, MonoCorpus};
use deskmt::ensemble::average_checkpoints;
use deskmt::eval::{bleu, Tokenization};
use deskmt::model::{BeamOptions, Checkpoint};
use deskmt::pipeline::{prepare_data, run, Manifest, RunError, RunOptions, DIRECTIONS};
use deskmt::synthesis::{back_translate, translate};
use deskmt::textkit::{learn_bpe, BpeOptions, Vocabulary};
use deskmt::training::train;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_VALIDATION: u8 = 2;
const EXIT_STAGE: u8 = 3;

#[derive(Parser)]
#[command(name = "deskmt", version, about = "Desk-scale NMT pipeline: baselines, back-translation, distillation, ensembles")]
struct Cli {
    /// Log level (error, warn, info, debug).
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct PipelineArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Experiment directory; defaults to `experiments/<experiment id>` next to the manifest.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
    /// Continue after an interrupted stage.
    #[arg(long)]
    resume: bool,
    /// Replace the manifest seed; only allowed in an empty experiment directory.
    #[arg(long)]
    seed_override: Option<u64>,
}

#[derive(Copy, Clone, ValueEnum)]
enum Tok {
    Intl,
    Char,
    None,
}

impl From<Tok> for Tokenization {
    fn from(t: Tok) -> Self {
        match t {
            Tok::Intl => Tokenization::Intl,
            Tok::Char => Tokenization::Char,
            Tok::None => Tokenization::None,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage of a manifest, skipping the ones already done.
    Run {
        #[command(flatten)]
        args: PipelineArgs,
        /// Run a single stage; the stages before it must be done.
        #[arg(long)]
        stage: Option<String>,
    },
    /// Check a manifest and list every violation.
    Validate {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Learn a joint BPE vocabulary from one text file per language.
    LearnBpe {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value_t = 6000)]
        merges: usize,
        #[arg(long, default_value_t = 1)]
        min_frequency: usize,
        #[arg(long)]
        upsample_low_resource: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the manifest's vocabulary and corpora as text files.
    MakeData {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one roster model on the manifest's natural data.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model: String,
        #[arg(long, default_value = "s2t")]
        direction: String,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Translate target-side monolingual text into synthetic source sentences.
    Backtranslate {
        /// Target-to-source checkpoint.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "src")]
        source_language: String,
        #[arg(long, default_value_t = 4)]
        beam: usize,
        /// Prepend the back-translation tag to synthetic sources.
        #[arg(long)]
        tag: bool,
        /// Output `source<TAB>target` file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the joint-training stage of a manifest.
    JointTrain {
        #[command(flatten)]
        args: PipelineArgs,
    },
    /// Run the distillation stage of a manifest.
    Distill {
        #[command(flatten)]
        args: PipelineArgs,
    },
    /// Run the in-domain fine-tuning stage of a manifest.
    Finetune {
        #[command(flatten)]
        args: PipelineArgs,
    },
    /// Run the ensemble-search stage of a manifest.
    EnsembleSearch {
        #[command(flatten)]
        args: PipelineArgs,
    },
    /// Average checkpoints of one run.
    Average {
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Corpus BLEU of a hypothesis file, or of checkpoints decoding a `source<TAB>reference` file.
    Score {
        /// Reference file, or `source<TAB>reference` pairs with `--model`.
        #[arg(long)]
        reference: PathBuf,
        #[arg(long, conflicts_with = "model")]
        hypothesis: Option<PathBuf>,
        /// Checkpoints to ensemble; requires `--vocab`.
        #[arg(long, requires = "vocab")]
        model: Vec<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        beam: usize,
        #[arg(long, value_enum, default_value = "intl")]
        tokenize: Tok,
    },
}

enum Failure {
    Validation(Vec<String>),
    Stage(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Stage(e)
    }
}

fn load_manifest(path: &Path) -> Result<Manifest, Failure> {
    Manifest::load(path).map_err(|e| Failure::Validation(vec![format!("{}: {e}", path.display())]))
}

fn run_pipeline(args: &PipelineArgs, stage: Option<String>) -> Result<(), Failure> {
    let manifest = load_manifest(&args.manifest)?;
    let base = args.manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let root = args.out.clone().unwrap_or_else(|| base.join("experiments").join(&manifest.experiment));
    let opts = RunOptions { stage, jobs: args.jobs.unwrap_or(0), resume: args.resume, seed_override: args.seed_override };
    match run(&manifest, &base, &root, &opts) {
        Ok(report) => {
            print!("{}", report.table());
            eprintln!("report written to {}", root.join("report.txt").display());
            Ok(())
        }
        Err(RunError::Validation(v)) => Err(Failure::Validation(v)),
        Err(e @ RunError::Stage { .. }) => Err(Failure::Stage(anyhow::Error::new(e))),
    }
}

fn execute(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Run { args, stage } => run_pipeline(&args, stage),
        Command::JointTrain { args } => run_pipeline(&args, Some("joint_train".into())),
        Command::Distill { args } => run_pipeline(&args, Some("distill".into())),
        Command::Finetune { args } => run_pipeline(&args, Some("finetune".into())),
        Command::EnsembleSearch { args } => run_pipeline(&args, Some("ensemble_search".into())),
        Command::Validate { manifest } => {
            let v = load_manifest(&manifest)?.validate();
            if !v.is_empty() {
                return Err(Failure::Validation(v));
            }
            println!("{}: ok", manifest.display());
            Ok(())
        }
        Command::LearnBpe { inputs, merges, min_frequency, upsample_low_resource, out } => {
            let texts = inputs.iter().map(|p| read_lines(p).with_context(|| p.display().to_string())).collect::<anyhow::Result<Vec<_>>>()?;
            let opts = BpeOptions { merges, min_frequency, upsample_low_resource, ..Default::default() };
            let vocab = learn_bpe(&texts, &opts).context("learning BPE")?;
            vocab.save(&out).context("writing vocabulary")?;
            println!("{} entries", vocab.len());
            Ok(())
        }
        Command::MakeData { manifest, out } => {
            let m = load_manifest(&manifest)?;
            let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
            let data = prepare_data(&m, &base).context("preparing data")?;
            std::fs::create_dir_all(&out).with_context(|| out.display().to_string())?;
            let v = &data.vocab;
            let pairs = |c: &deskmt::corpus::ParallelCorpus| c.pairs().iter().map(|(s, t)| (v.decode(s), v.decode(t))).collect::<Vec<_>>();
            let lines = |c: &MonoCorpus| c.sentences.iter().map(|s| v.decode(s)).collect::<Vec<_>>();
            v.save(&out.join("vocab.txt")).context("vocab")?;
            write_parallel_tsv(&out.join("parallel.tsv"), &pairs(&data.natural)).context("parallel")?;
            write_parallel_tsv(&out.join("dev.tsv"), &pairs(&data.dev)).context("dev")?;
            write_lines(&out.join("mono_src.txt"), &lines(&data.mono_src)).context("mono_src")?;
            write_lines(&out.join("mono_tgt.txt"), &lines(&data.mono_tgt)).context("mono_tgt")?;
            if let Some(c) = &data.indomain {
                write_parallel_tsv(&out.join("indomain.tsv"), &pairs(c)).context("indomain")?;
            }
            println!("{} parallel, {} dev, {}+{} mono", data.natural.len(), data.dev.len(), data.mono_src.len(), data.mono_tgt.len());
            Ok(())
        }
        Command::Train { manifest, model, direction, steps, out } => {
            let m = load_manifest(&manifest)?;
            let Some(d) = DIRECTIONS.iter().position(|x| *x == direction) else {
                return Err(Failure::Validation(vec![format!("unknown direction `{direction}`")]));
            };
            let Some(entry) = m.models.iter().find(|e| e.name == model) else {
                return Err(Failure::Validation(vec![format!("no model `{model}` in the roster")]));
            };
            let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
            let data = prepare_data(&m, &base).context("preparing data")?;
            let cfg = m.model_config(entry, data.vocab.len(), data.vocab.num_specials()).context("model config")?;
            let mut plan = m.plan(steps.or(m.baseline.steps));
            plan.seed = deskmt::seed::derive(m.seed(), &format!("baseline.{model}.{direction}"));
            let corpus = entry.sampling.apply(&data.natural(d), deskmt::seed::derive(plan.seed, "sampling")).context("sampling")?;
            let outcome = train(&cfg, None, &[corpus], &plan).context("training")?;
            outcome.save(&out).context("writing checkpoints")?;
            println!("{} checkpoints in {}", outcome.checkpoints.len(), out.display());
            Ok(())
        }
        Command::Backtranslate { model, vocab, input, source_language, beam, tag, out } => {
            let ckpt = Checkpoint::load(&model).context("loading model")?;
            let vocab = Vocabulary::load(&vocab).context("loading vocabulary")?;
            let lines = read_lines(&input).context("reading input")?;
            let mono = MonoCorpus::new("tgt", lines.iter().map(|l| vocab.encode(l)).collect());
            let corpus = back_translate(&ckpt, &mono, &source_language, &BeamOptions::with_beam(beam), tag, "cli").context("back-translating")?;
            let pairs: Vec<(String, String)> = corpus.pairs().iter().map(|(s, t)| (vocab.decode(s), vocab.decode(t))).collect();
            write_parallel_tsv(&out, &pairs).context("writing output")?;
            Ok(())
        }
        Command::Average { checkpoints, out } => {
            let ckpts = checkpoints.iter().map(|p| Checkpoint::load(p).with_context(|| p.display().to_string())).collect::<anyhow::Result<Vec<_>>>()?;
            let refs: Vec<&Checkpoint> = ckpts.iter().collect();
            average_checkpoints(&refs).context("averaging")?.save(&out).context("writing")?;
            Ok(())
        }
        Command::Score { reference, hypothesis, model, vocab, beam, tokenize } => {
            let report = if let Some(h) = hypothesis {
                let hyps = read_lines(&h).context("hypothesis")?;
                let refs = read_lines(&reference).context("reference")?;
                bleu(&hyps, &refs, tokenize.into()).context("scoring")?
            } else if let Some(v) = vocab {
                let vocab = Vocabulary::load(&v).context("loading vocabulary")?;
                let ckpts = model.iter().map(|p| Checkpoint::load(p).with_context(|| p.display().to_string())).collect::<anyhow::Result<Vec<_>>>()?;
                let refs: Vec<&Checkpoint> = ckpts.iter().collect();
                let pairs = read_parallel_tsv(&reference).context("reference")?;
                let sources: Vec<Vec<u32>> = pairs.iter().map(|(s, _)| vocab.encode(s)).collect();
                let out = translate(&refs, &sources, &BeamOptions::with_beam(beam)).context("decoding")?;
                let hyps: Vec<String> = out.iter().map(|s| vocab.decode(s)).collect();
                let gold: Vec<&str> = pairs.iter().map(|(_, t)| t.as_str()).collect();
                bleu(&hyps, &gold, tokenize.into()).context("scoring")?
            } else {
                return Err(Failure::Validation(vec!["score needs --hypothesis or --model with --vocab".into()]));
            };
            println!("{report}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).format_timestamp(None).init();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(v)) => {
            eprintln!("invalid manifest:");
            for x in v {
                eprintln!("  - {x}");
            }
            ExitCode::from(EXIT_VALIDATION)
        }
        Err(Failure::Stage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_STAGE)
        }
    }
}
