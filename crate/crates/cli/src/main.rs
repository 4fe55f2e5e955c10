mod settings;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use dua::data::{
    decode, encode, encode_corpus, load_pool, load_pretrained_embeddings, load_tsv_corpus, negative_sample,
    write_tsv_corpus, RawDialogue, SamplingMode, Vocabulary,
};
use dua::eval::{evaluate_model, MetricsReport};
use dua::export::{attention_exports, write_exports};
use dua::model::Dua;
use dua::training::{load_checkpoint, train_from, LogRecord};

use settings::Settings;

/// Deep utterance aggregation for multi-turn response selection.
#[derive(Parser, Debug)]
#[command(name = "dua", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Adds labelled negatives to a file of positive dialogues.
    PrepareData(PrepareArgs),
    /// Trains a model and writes the best checkpoint.
    Train(TrainArgs),
    /// Prints ranking metrics of a checkpoint on a grouped test file.
    Eval(EvalArgs),
    /// Scores candidate responses for one context.
    Rank(RankArgs),
    /// Writes attention matrices of one test sample as CSV and JSON.
    InspectAttention(InspectArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Train,
    Test,
}

#[derive(clap::Args, Debug)]
struct PrepareArgs {
    /// Response pool, one response per line.
    #[arg(long)]
    pool: PathBuf,
    /// TSV file of positive dialogues.
    #[arg(long)]
    positives: PathBuf,
    /// `train` draws negatives uniformly, `test` retrieves them.
    #[arg(long, value_enum, default_value = "train")]
    mode: Mode,
    /// Negatives per positive.
    #[arg(long, default_value_t = 1)]
    ratio: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    valid: PathBuf,
    /// key=value settings file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for the checkpoint, log, vocabulary and settings.
    #[arg(long)]
    out: PathBuf,
    /// Extra key=value settings, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    ablate_cf: bool,
    #[arg(long)]
    ablate_maf: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Tokens seen fewer times map to the unknown id.
    #[arg(long, default_value_t = 1)]
    min_count: usize,
    /// Pretrained vectors: a `count dim` header, then `token v1 .. vdim` lines.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Print the resolved settings and parameter shapes, then exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(clap::Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long, default_value_t = 10)]
    group_size: usize,
    /// Print `key=value` lines instead of a table.
    #[arg(long)]
    kv: bool,
}

#[derive(clap::Args, Debug)]
struct RankArgs {
    #[arg(long)]
    model: PathBuf,
    /// Utterances separated by `||`, oldest first.
    #[arg(long)]
    context: String,
    /// Candidate responses, one per line.
    #[arg(long)]
    candidates: PathBuf,
}

#[derive(clap::Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    model: PathBuf,
    /// 1-based line of the test file.
    #[arg(long)]
    sample_line: usize,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::PrepareData(a) => prepare_data(a).context("prepare-data failed"),
        Command::Train(a) => train_cmd(a).context("train failed"),
        Command::Eval(a) => eval_cmd(a).context("eval failed"),
        Command::Rank(a) => rank_cmd(a).context("rank failed"),
        Command::InspectAttention(a) => inspect(a).context("inspect-attention failed"),
    }
}

fn read_corpus(path: &Path) -> Result<Vec<RawDialogue>> {
    load_tsv_corpus(path).with_context(|| format!("reading {}", path.display()))
}

fn prepare_data(a: PrepareArgs) -> Result<()> {
    let pool = load_pool(&a.pool).with_context(|| format!("reading pool {}", a.pool.display()))?;
    let positives = read_corpus(&a.positives)?;
    if let Some(i) = positives.iter().position(|d| d.label != 1) {
        bail!("{}: line {} is not a positive", a.positives.display(), i + 1);
    }
    let mode = match a.mode {
        Mode::Train => SamplingMode::Train,
        Mode::Test => SamplingMode::Test,
    };
    let out = negative_sample(&positives, &pool, a.ratio, mode, a.seed).context("sampling negatives")?;
    fs::write(&a.out, write_tsv_corpus(&out)).with_context(|| format!("writing {}", a.out.display()))?;
    println!("wrote {} samples ({} contexts) to {}", out.len(), positives.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut s = match &a.config {
        Some(p) => Settings::load(p)?,
        None => Settings::default(),
    };
    s.apply(a.overrides.iter().map(String::as_str))?;
    if a.ablate_cf {
        s.config.ablate_cf = true;
    }
    if a.ablate_maf {
        s.config.ablate_maf = true;
    }
    if let Some(v) = a.epochs {
        s.plan.epochs = v;
    }
    if let Some(v) = a.batch_size {
        s.plan.batch_size = v;
    }
    if let Some(v) = a.lr {
        s.plan.learning_rate = v;
    }
    if let Some(v) = a.seed {
        s.config.seed = v;
        s.plan.shuffle_seed = v;
    }

    let train_raw = read_corpus(&a.train)?;
    let valid_raw = read_corpus(&a.valid)?;
    let vocab = Vocabulary::build(&train_raw, a.min_count);
    s.config.vocab_size = vocab.len();
    s.config.validate()?;
    s.plan.validate()?;
    s.plan.checkpoint_dir = Some(a.out.clone());

    let mut model = Dua::new(s.config.clone())?;
    if let Some(p) = &a.embeddings {
        let mut table = model.params.get(dua::model::EMBEDDING)?.clone();
        let found = load_pretrained_embeddings(p, &vocab, &mut table)
            .with_context(|| format!("reading embeddings {}", p.display()))?;
        model.set_embeddings(table)?;
        println!("pretrained vectors for {found} of {} tokens", vocab.len());
    }
    print_banner(&s, &model);
    if a.dry_run {
        return Ok(());
    }

    let train_set = encode_corpus(&train_raw, &vocab, &s.config)?;
    let valid_set = encode_strict(&valid_raw, &vocab, &s.config, &a.valid)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("settings.txt"), s.to_text())?;
    vocab.save(a.out.join("vocab.txt"))?;

    let outcome = train_from(
        &s.plan,
        &s.config,
        &vocab,
        model.params,
        &train_set,
        &valid_set,
        |r| {
            if let LogRecord::Epoch { .. } = r {
                println!("{r}");
            }
        },
    )?;
    println!(
        "best epoch {} ({}={}) saved to {}",
        outcome.best.meta.epoch,
        outcome.best.meta.metric,
        outcome.best.meta.validation_score,
        a.out.join("best.dua").display()
    );
    Ok(())
}

fn print_banner(s: &Settings, model: &Dua) {
    println!("settings:");
    for line in s.to_text().lines() {
        println!("  {line}");
    }
    println!("parameters ({} scalars):", model.param_count());
    for (name, t) in model.params.iter() {
        println!("  {name} {:?}", t.shape());
    }
}

/// Encodes every line or fails naming it, so that groups stay aligned.
fn encode_strict(
    raw: &[RawDialogue],
    vocab: &Vocabulary,
    config: &dua::model::DuaConfig,
    path: &Path,
) -> Result<Vec<dua::data::EncodedSample>> {
    raw.iter()
        .enumerate()
        .map(|(i, d)| encode(d, vocab, config).with_context(|| format!("{} line {}", path.display(), i + 1)))
        .collect()
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let raw = read_corpus(&a.test)?;
    ensure!(
        a.group_size > 0 && raw.len() % a.group_size == 0,
        "{} lines do not form groups of {}",
        raw.len(),
        a.group_size
    );
    let samples = encode_strict(&raw, &ckpt.vocab, &ckpt.config, &a.test)?;
    let categories: Vec<Option<String>> = raw.iter().map(|d| d.category.clone()).collect();
    let cats = categories.iter().any(Option::is_some).then_some(categories.as_slice());
    let report: MetricsReport = evaluate_model(&ckpt.model(), &samples, cats, a.group_size)?;
    if a.kv {
        print!("{}", report.to_kv());
    } else {
        print!("{report}");
    }
    Ok(())
}

fn parse_context(text: &str) -> Result<Vec<String>> {
    let turns: Vec<String> = text.split("||").map(|u| u.trim().to_string()).collect();
    ensure!(
        turns.iter().all(|u| !u.is_empty()),
        "context `{text}` has an empty utterance"
    );
    Ok(turns)
}

fn rank_cmd(a: RankArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let context = parse_context(&a.context)?;
    let candidates = load_pool(&a.candidates).with_context(|| format!("reading {}", a.candidates.display()))?;
    ensure!(!candidates.is_empty(), "no candidates in {}", a.candidates.display());
    let model = ckpt.model();
    let mut scored = Vec::with_capacity(candidates.len());
    for c in &candidates {
        let sample = encode(&RawDialogue::new(0, context.clone(), c.as_str()), &ckpt.vocab, &ckpt.config)?;
        scored.push((model.score(&sample)?, c));
    }
    scored.sort_by(|x, y| y.0.total_cmp(&x.0));
    for (score, c) in scored {
        println!("{score:.6}\t{c}");
    }
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let raw = read_corpus(&a.test)?;
    ensure!(
        a.sample_line >= 1 && a.sample_line <= raw.len(),
        "line {} is outside {} ({} lines)",
        a.sample_line,
        a.test.display(),
        raw.len()
    );
    let sample = encode(&raw[a.sample_line - 1], &ckpt.vocab, &ckpt.config)?;
    let out = ckpt.model().forward(&sample, true)?;
    let diag = out.diagnostics.context("model returned no diagnostics")?;
    let (context_tokens, response_tokens) = decode(&sample, &ckpt.vocab);
    let exports = attention_exports(&diag, &context_tokens, &response_tokens)?;
    let written = write_exports(&a.out, &exports)?;
    println!("score {:.6}", out.score);
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}
