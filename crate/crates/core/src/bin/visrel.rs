use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use visrel::checkpoint::Checkpoint;
use visrel::eval::{
    evaluate_rank, export_gates, make_rank_trials, read_answers, read_eval_pairs, resolve_pairs, score_answers,
    EvalReport, Label,
};
use visrel::image::load_features;
use visrel::loss::LossKind;
use visrel::model::ModelParams;
use visrel::synth::{generate, write_dataset, SynthConfig};
use visrel::train::{rng_from_seed, train_from, Hyperparams, PairDataset};
use visrel::vocab::{build_vocab, load_pretrained, read_captions, tokenize, Vocabulary};
use visrel::{Error, Result};

#[derive(Parser)]
#[command(name = "visrel", version, about = "Score how well sentences describe images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a vocabulary from a captions file.
    BuildVocab {
        #[arg(long)]
        captions: PathBuf,
        #[arg(long, default_value_t = 1)]
        min_count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model, keeping the epoch with the best dev ranking accuracy.
    Train(TrainArgs),
    /// Evaluate a checkpoint on labeled pairs or by 1-of-6 image ranking.
    Evaluate(EvaluateArgs),
    /// Print `answer_id<TAB>image_id<TAB>score` lines.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        answers: PathBuf,
        #[arg(long)]
        features: PathBuf,
        /// Pairs to score (`answer_id<TAB>image_id[<TAB>label]`); default is
        /// every answer against every image.
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the gate activations of every answer sentence.
    ExportGates {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        answers: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic caption/feature dataset.
    GenSynth {
        #[arg(long, default_value_t = 8)]
        clusters: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 500)]
        train_pairs: usize,
        #[arg(long, default_value_t = 150)]
        dev_pairs: usize,
        #[arg(long, default_value_t = 150)]
        test_pairs: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Pairs,
    Rank6,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    captions: PathBuf,
    #[arg(long)]
    dev_captions: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// JSON hyperparameters; flags given on the command line take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Word vectors (`token v1 .. vd` per line) to initialize embeddings.
    #[arg(long)]
    pretrained: Option<PathBuf>,
    #[arg(long)]
    loss: Option<LossKind>,
    #[arg(long, value_enum)]
    gating: Option<Switch>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long, value_enum, default_value = "pairs")]
    mode: Mode,
    /// Answers file (pairs mode).
    #[arg(long)]
    answers: Option<PathBuf>,
    /// Labeled pairs file (pairs mode).
    #[arg(long)]
    pairs: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    k: usize,
    /// Captions file of true sentence/image pairs (rank6 mode).
    #[arg(long)]
    captions: Option<PathBuf>,
    /// Number of ranking trials; default one per caption.
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the report as `key=value` lines.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn required<'a>(value: &'a Option<PathBuf>, flag: &str, mode: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| Error::Usage(format!("--{flag} is required with --mode {mode}")))
}

fn resolve_hyperparams(args: &TrainArgs) -> Result<Hyperparams> {
    let mut hp = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.display().to_string(),
                source: e,
            })?;
            serde_json::from_str(&text).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))?
        }
        None => Hyperparams::default(),
    };
    if let Some(v) = args.loss {
        hp.loss = v;
    }
    if let Some(v) = args.gating {
        hp.gating = matches!(v, Switch::On);
    }
    if let Some(v) = args.dropout {
        hp.dropout = v;
    }
    if let Some(v) = args.seed {
        hp.seed = v;
    }
    if let Some(v) = args.epochs {
        hp.epochs = v;
    }
    if let Some(v) = args.batch_size {
        hp.batch_size = v;
    }
    if let Some(v) = args.margin {
        hp.margin = v;
    }
    if let Some(v) = args.learning_rate {
        hp.learning_rate = v;
    }
    if let Some(v) = args.embed_dim {
        hp.embed_dim = v;
    }
    if let Some(v) = args.hidden {
        hp.hidden = v;
    }
    hp.validate()?;
    Ok(hp)
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let hp = resolve_hyperparams(args)?;
    let vocab = Vocabulary::load(&args.vocab)?;
    let train_set = PairDataset::from_captions(&read_captions(&args.captions)?, &vocab)?;
    let dev = PairDataset::from_captions(&read_captions(&args.dev_captions)?, &vocab)?;
    let features = load_features(&args.features)?;
    let feature_dim = features
        .dim()
        .ok_or_else(|| Error::Data(format!("{}: no image features", args.features.display())))?;

    fs::create_dir_all(&args.out_dir).map_err(|e| Error::Io {
        path: args.out_dir.display().to_string(),
        source: e,
    })?;
    let config = serde_json::to_string_pretty(&hp).expect("hyperparameters serialize") + "\n";
    write(&args.out_dir.join("config.json"), &config)?;

    let mut rng = rng_from_seed(hp.seed);
    let mut init = ModelParams::random(hp.dims(vocab.len(), feature_dim), &mut rng);
    if let Some(path) = &args.pretrained {
        let n = load_pretrained(path, &vocab, &mut init.embeddings)?;
        log::info!("initialized {n} of {} embeddings from {}", vocab.len(), path.display());
    }
    let outcome = train_from(init, &train_set, &dev, &features, &hp, &mut rng)?;
    write(&args.out_dir.join("train.log"), &outcome.log_text())?;
    Checkpoint {
        hyperparams: hp,
        vocab,
        params: outcome.best,
    }
    .save(&args.out_dir.join("checkpoint.bin"))?;
    match outcome.best_dev_metric {
        Some(m) => println!("best epoch {} dev accuracy {m:.2}", outcome.best_epoch),
        None => println!("no epochs run; saved initial parameters"),
    }
    Ok(())
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let model = ck.model();
    let features = load_features(&args.features)?;
    let report = match args.mode {
        Mode::Pairs => {
            let answers = read_answers(required(&args.answers, "answers", "pairs")?, &ck.vocab)?;
            let pairs = read_eval_pairs(required(&args.pairs, "pairs", "pairs")?)?;
            let scored = score_answers(&model, &answers, &features, &resolve_pairs(&answers, &pairs)?)?;
            EvalReport::from_pairs(&scored, args.k)?
        }
        Mode::Rank6 => {
            let captions = read_captions(required(&args.captions, "captions", "rank6")?)?;
            let data = PairDataset::from_captions(&captions, &ck.vocab)?;
            let pool = data.distinct_images();
            let trials = make_rank_trials(&data.image_ids, &pool, args.trials, &mut rng_from_seed(args.seed))?;
            EvalReport::from_rank(&evaluate_rank(&model, &data.sentences, &features, &trials)?)
        }
    };
    print!("{}", report.to_table());
    if let Some(out) = &args.out {
        write(out, &report.to_key_values())?;
    }
    Ok(())
}

fn cmd_score(checkpoint: &Path, answers: &Path, features: &Path, pairs: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let answers = read_answers(answers, &ck.vocab)?;
    let features = load_features(features)?;
    let requests: Vec<(usize, String, Label)> = match pairs {
        Some(path) => resolve_pairs(&answers, &read_pairs_loose(path)?)?,
        None => (0..answers.len())
            .flat_map(|a| features.ids().map(move |id| (a, id.to_string(), Label::Unknown)))
            .collect(),
    };
    let scored = score_answers(&ck.model(), &answers, &features, &requests)?;
    let text: String = scored
        .iter()
        .map(|p| format!("{}\t{}\t{}\n", p.answer_id, p.image_id, p.score))
        .collect();
    match out {
        Some(path) => write(path, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Like labeled pairs, but the label column may be absent.
fn read_pairs_loose(path: &Path) -> Result<Vec<(String, String, Label)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let (answer, image, label) = match fields[..] {
            [a, i] => (a, i, Label::Unknown),
            [a, i, l] => (a, i, l.trim().parse().unwrap_or(Label::Unknown)),
            _ => {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    line: n + 1,
                    msg: format!("expected 2 or 3 tab-separated fields, found {}", fields.len()),
                })
            }
        };
        out.push((answer.to_string(), image.to_string(), label));
    }
    Ok(out)
}

fn cmd_export_gates(checkpoint: &Path, answers: &Path, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let answers = read_answers(answers, &ck.vocab)?;
    let sentences: Vec<_> = answers
        .iter()
        .flat_map(|a| {
            a.sentences
                .iter()
                .enumerate()
                .map(move |(i, s)| (format!("{}#{i}", a.answer_id), s.clone()))
        })
        .collect();
    let n = export_gates(&ck.model(), &sentences, out)?;
    println!("wrote {n} gate rows to {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildVocab { captions, min_count, out } => {
            let corpus: Vec<Vec<String>> = read_captions(&captions)?.iter().map(|c| tokenize(&c.text)).collect();
            let vocab = build_vocab(&corpus, min_count)?;
            vocab.save(&out)?;
            println!("{} tokens written to {}", vocab.len(), out.display());
            Ok(())
        }
        Command::Train(args) => cmd_train(&args),
        Command::Evaluate(args) => cmd_evaluate(&args),
        Command::Score {
            checkpoint,
            answers,
            features,
            pairs,
            out,
        } => cmd_score(&checkpoint, &answers, &features, pairs.as_deref(), out.as_deref()),
        Command::ExportGates { checkpoint, answers, out } => cmd_export_gates(&checkpoint, &answers, &out),
        Command::GenSynth {
            clusters,
            dim,
            seed,
            train_pairs,
            dev_pairs,
            test_pairs,
            out_dir,
        } => {
            let cfg = SynthConfig {
                clusters,
                dim,
                seed,
                train_pairs,
                dev_pairs,
                test_pairs,
                ..SynthConfig::default()
            };
            let data = generate(&cfg)?;
            write_dataset(&data, &out_dir)?;
            println!(
                "wrote {} train, {} dev, {} test captions and {} images to {}",
                data.train.len(),
                data.dev.len(),
                data.test.len(),
                data.features.len(),
                out_dir.display()
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
