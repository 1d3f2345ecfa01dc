mod config;

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use kbqa_core::checkpoint::{Checkpoint, CheckpointHeader};
use kbqa_core::infer::{answer, evaluate, heatmap};
use kbqa_core::kb::KbStore;
use kbqa_core::model::{Mode, Model};
use kbqa_core::qa::{read_qa_records, resolve_questions, split_words, Question, WordVocab};
use kbqa_core::synth::generate;
use kbqa_core::trainer::{multitask_train, Corpus, PreparedSplit, TrainConfig};
use sha2::{Digest, Sha256};

use config::{RunConfig, CONFIG_ENV};

#[derive(Parser, Debug)]
#[command(name = "kbqa", version, about = "Attention-based KB question answering")]
struct Cli {
    /// TOML configuration file laid over the preset.
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    /// Preset used when the config file names none: desk or full.
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    /// Seed for generation and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel scoring and gradient evaluation.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Directory holding kb.tsv and the train/valid/test splits.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic KB and QA splits.
    Gen(GenArgs),
    /// Train a model, writing per-epoch checkpoints and a metrics log.
    Train(TrainArgs),
    /// Averaged F1 of a checkpoint on a split.
    Eval(EvalArgs),
    /// Rank the candidate answers of one question.
    Answer(AnswerArgs),
    /// Export the attention grid of one question and candidate.
    Heatmap(HeatmapArgs),
    /// Print the effective configuration as TOML.
    Config,
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Output directory (defaults to the data directory).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    oov_fraction: Option<f64>,
    #[arg(long)]
    questions: Option<usize>,
    /// Replace existing files.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    negatives: Option<usize>,
    /// Output directory for checkpoints and metrics.log.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Answer-selection margin; defaults to the checkpoint's training value.
    #[arg(long)]
    margin: Option<f64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// `train`, `valid`, `test` or a path to a QA file.
    #[arg(long, default_value = "test")]
    split: String,
    /// Per-question report (defaults to `<checkpoint>.<split>.tsv`).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AnswerArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    topic: String,
    question: String,
}

#[derive(Args, Debug)]
struct HeatmapArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    topic: String,
    /// Candidate answer to explain; defaults to the top-ranked one.
    #[arg(long)]
    answer: Option<String>,
    /// Output prefix; `.tsv` and `.svg` are appended.
    #[arg(long)]
    out: PathBuf,
    question: String,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut config = RunConfig::load(cli.config.as_deref(), &cli.preset)?;
    if let Some(seed) = cli.seed {
        config.train.seed = seed;
        config.synth.seed = seed;
    }
    if let Some(w) = cli.workers {
        config.workers = Some(w);
    }
    if let Some(d) = cli.data {
        config.data.dir = d;
    }
    if let Some(w) = config.workers {
        if w == 0 {
            bail!("--workers must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(w).build_global().context("configuring worker threads")?;
    }
    match cli.command {
        Command::Gen(args) => cmd_gen(config, args),
        Command::Train(args) => cmd_train(config, args),
        Command::Eval(args) => cmd_eval(&config, args),
        Command::Answer(args) => cmd_answer(&config, args),
        Command::Heatmap(args) => cmd_heatmap(&config, args),
        Command::Config => {
            print!("{}", config.to_toml()?);
            Ok(())
        }
    }
}

fn cmd_gen(mut config: RunConfig, args: GenArgs) -> Result<()> {
    if let Some(f) = args.oov_fraction {
        config.synth.oov_fraction = f;
    }
    if let Some(n) = args.questions {
        config.synth.questions = n;
    }
    let dataset = generate(&config.synth)?;
    let dir = args.out.unwrap_or(config.data.dir);
    let files = dataset.files();
    if !args.overwrite {
        let existing: Vec<String> =
            files.iter().map(|(name, _)| dir.join(name)).filter(|p| p.exists()).map(|p| p.display().to_string()).collect();
        if !existing.is_empty() {
            bail!("refusing to overwrite {} (pass --overwrite)", existing.join(", "));
        }
    }
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    for (name, text) in &files {
        let path = dir.join(name);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        println!("{}  {}", hex(&Sha256::digest(text.as_bytes())), path.display());
    }
    let s = &dataset.stats;
    eprintln!(
        "{} facts, {} train / {} valid / {} test questions, {:.0}% of test answers unseen in train",
        s.facts,
        dataset.train.len(),
        dataset.valid.len(),
        dataset.test.len(),
        s.test_unseen_answer_share * 100.0
    );
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn load_store(config: &RunConfig) -> Result<KbStore> {
    let path = config.data.kb();
    Ok(KbStore::load_triples(&path, config.kb.clone())?)
}

fn split_path(config: &RunConfig, split: &str) -> PathBuf {
    config.data.split(split).unwrap_or_else(|| PathBuf::from(split))
}

fn cmd_train(mut config: RunConfig, args: TrainArgs) -> Result<()> {
    let t = &mut config.train;
    if let Some(m) = args.mode {
        t.mode = m;
    }
    if let Some(e) = args.epochs {
        t.epochs = e;
    }
    if let Some(d) = args.dim {
        t.dim = d;
    }
    if let Some(lr) = args.learning_rate {
        t.learning_rate = lr;
    }
    if let Some(k) = args.negatives {
        t.negatives = k;
    }
    let train = config.train.clone();
    train.validate()?;
    let out = args.out.unwrap_or_else(|| config.out_dir.clone());

    let store = load_store(&config)?;
    let records = |name: &str| -> Result<_> {
        let path = split_path(&config, name);
        read_qa_records(&path).with_context(|| format!("loading {name} split"))
    };
    let corpus = Corpus::new(store, &records("train")?, &records("valid")?, &records("test")?, train.max_hops);
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let log_path = out.join("metrics.log");
    let mut log = fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let config_json = serde_json::to_value(&train)?;
    let header = |epoch: usize, valid_f1: f64| CheckpointHeader {
        mode: train.mode,
        epoch,
        valid_f1,
        config: config_json.clone(),
        word_vocab: corpus.vocab.words().to_vec(),
        kb_vocab: corpus.store.resources().iter().map(|r| r.surface.clone()).collect(),
    };
    eprintln!(
        "training {} on {} questions ({} valid), d={} k={} epochs={}",
        train.mode,
        corpus.train.split.questions.len(),
        corpus.valid.split.questions.len(),
        train.dim,
        train.negatives,
        train.epochs
    );
    let started = Instant::now();
    let mut failure: Option<anyhow::Error> = None;
    let outcome = multitask_train(&corpus.train_data(), &train, |rec, model| {
        if failure.is_some() {
            return;
        }
        let line = rec.log_line();
        println!("{line} seconds={:.2}", rec.seconds);
        let path = out.join(format!("epoch-{:03}.ckpt", rec.epoch));
        let res = writeln!(log, "{line}")
            .map_err(anyhow::Error::from)
            .and_then(|_| Ok(Checkpoint::new(model, header(rec.epoch, rec.valid_f1)).save(&path)?));
        if let Err(e) = res {
            failure = Some(e.context(format!("writing {}", path.display())));
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    let best = out.join("best.ckpt");
    let best_f1 = outcome.history.iter().find(|r| r.epoch == outcome.best_epoch).map_or(0.0, |r| r.valid_f1);
    Checkpoint::new(&outcome.best_model, header(outcome.best_epoch, best_f1)).save(&best)?;
    println!(
        "best epoch {} (valid F1 {best_f1:.4}) saved to {}; {:.1}s total",
        outcome.best_epoch,
        best.display(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

/// A checkpoint with the KB it was trained on.
struct Loaded {
    model: Model,
    store: KbStore,
    vocab: WordVocab,
    margin: f64,
    max_hops: usize,
}

fn load_model(config: &RunConfig, args: &ModelArgs) -> Result<Loaded> {
    let ckpt = Checkpoint::load(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let trained: TrainConfig = serde_json::from_value(ckpt.header.config.clone()).context("checkpoint configuration")?;
    let store = load_store(config)?;
    let surfaces: Vec<&str> = store.resources().iter().map(|r| r.surface.as_str()).collect();
    if surfaces != ckpt.header.kb_vocab.iter().map(String::as_str).collect::<Vec<_>>() {
        bail!("{} does not match the KB this checkpoint was trained on", config.data.kb().display());
    }
    let vocab = WordVocab::from_list(ckpt.header.word_vocab.clone()).context("checkpoint word vocabulary is malformed")?;
    let model = ckpt.model()?;
    if model.word_vocab_size() != vocab.len() || model.kb_vocab_size() != store.vocab_size() {
        bail!("checkpoint embedding tables do not match its vocabularies");
    }
    Ok(Loaded { model, store, vocab, margin: args.margin.unwrap_or(trained.answer_margin()), max_hops: trained.max_hops })
}

fn cmd_eval(config: &RunConfig, args: EvalArgs) -> Result<()> {
    let l = load_model(config, &args.model)?;
    let path = split_path(config, &args.split);
    let records = read_qa_records(&path)?;
    if records.is_empty() {
        bail!("split {} is empty", path.display());
    }
    let prepared = PreparedSplit::new(&l.store, resolve_questions(&records, &l.store, &l.vocab), l.max_hops);
    let report = evaluate(&l.model, &l.store, &prepared.split, &prepared.sets, l.margin)?;
    let report_path = args.report.unwrap_or_else(|| {
        let stem = Path::new(&args.split).file_stem().map_or("split".into(), |s| s.to_string_lossy().into_owned());
        PathBuf::from(format!("{}.{stem}.tsv", args.model.checkpoint.display()))
    });
    fs::write(&report_path, report.to_tsv()).with_context(|| format!("writing {}", report_path.display()))?;
    eprintln!("{} questions, report written to {}", report.rows.len(), report_path.display());
    println!("{:.6}", report.mean_f1);
    Ok(())
}

fn ad_hoc_question(l: &Loaded, topic: &str, text: &str) -> Result<Question> {
    let Some(topic_id) = l.store.entity(topic) else { bail!("unknown topic `{topic}`") };
    Ok(Question {
        id: "q".into(),
        text: text.to_string(),
        words: split_words(text),
        tokens: l.vocab.tokenize(text),
        topic: topic_id,
        gold: Default::default(),
    })
}

fn cmd_answer(config: &RunConfig, args: AnswerArgs) -> Result<()> {
    let l = load_model(config, &args.model)?;
    let q = ad_hoc_question(&l, &args.topic, &args.question)?;
    let cands = l.store.candidate_set(q.topic, l.max_hops);
    if cands.is_empty() {
        println!("no candidate answers within {} hops of `{}`", l.max_hops, args.topic);
        return Ok(());
    }
    let picked = answer(&l.model, &q, &cands, l.margin)?;
    for (i, (e, s)) in picked.ranked.iter().enumerate() {
        if i == picked.answers.len() {
            println!("---- margin {} (cut at {:.4})", l.margin, picked.s_max.unwrap_or(0.0) - l.margin);
        }
        println!("{s:.4}\t{}", l.store.surface(*e));
    }
    if picked.answers.len() == picked.ranked.len() {
        println!("---- margin {} (every candidate selected)", l.margin);
    }
    Ok(())
}

fn cmd_heatmap(config: &RunConfig, args: HeatmapArgs) -> Result<()> {
    let l = load_model(config, &args.model)?;
    if !l.model.mode().attention() {
        bail!("mode {} has no attention; heat maps need bilstm-att or bilstm-att-gki", l.model.mode());
    }
    let q = ad_hoc_question(&l, &args.topic, &args.question)?;
    let cands = l.store.candidate_set(q.topic, l.max_hops);
    let target = match &args.answer {
        Some(name) => l.store.entity(name).with_context(|| format!("unknown answer `{name}`"))?,
        None => match answer(&l.model, &q, &cands, l.margin)?.ranked.first() {
            Some(&(e, _)) => e,
            None => bail!("no candidate answers for topic `{}`", args.topic),
        },
    };
    let Some(cand) = cands.candidates.iter().find(|c| c.answer == target) else {
        bail!("`{}` is not a candidate answer for topic `{}`", l.store.surface(target), args.topic);
    };
    let map = heatmap(&l.model, &l.store, &q, cand)?;
    let with_ext = |ext: &str| {
        let mut s = args.out.clone().into_os_string();
        s.push(ext);
        PathBuf::from(s)
    };
    let (tsv, svg) = (with_ext(".tsv"), with_ext(".svg"));
    fs::write(&tsv, map.to_tsv()).with_context(|| format!("writing {}", tsv.display()))?;
    fs::write(&svg, map.to_svg()).with_context(|| format!("writing {}", svg.display()))?;
    println!("{}\n{}", tsv.display(), svg.display());
    Ok(())
}
