//! `reviewgan`: data preparation, training, evaluation and sweeps.
//!
//! Every command prints JSON (or JSON lines) on stdout. On failure the
//! process exits nonzero and writes one JSON error record to stderr:
//! `{"error": {"kind": "...", "message": "..."}}`.

mod overrides;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use reviewgan::classifier::predict;
use reviewgan::corpus::{decode, read_labeled_tsv, read_unlabeled_lines, split_and_subsample, SplitSpec};
use reviewgan::eval::{emit_plot_data, run_grid, GridSpec, Pool};
use reviewgan::generator::{greedy_decode, sample_context};
use reviewgan::synthetic::MarkovSource;
use reviewgan::trainer::{adversarial_train, pretrain, Hooks};
use reviewgan::{
    evaluate, load_checkpoint, save_checkpoint, Class, ClassPrior, DatasetBundle, Error, MetricsReport, RunState,
    TrainConfig, TrainingData,
};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Usage(_) => "usage",
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "reviewgan", version, about = "Semi-supervised adversarial review-spam classifier")]
struct Cli {
    /// Log filter for progress messages on stderr (e.g. `info`, `debug`).
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

/// Configuration: a TOML file, then named flags, then `--set` overrides.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any configuration field, e.g. `--set schedule.beta=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    pretrain_g: Option<usize>,
    #[arg(long)]
    pretrain_d: Option<usize>,
    #[arg(long)]
    pretrain_c: Option<usize>,
    #[arg(long)]
    training_epochs: Option<usize>,
    #[arg(long)]
    test_fraction: Option<f64>,
    #[arg(long)]
    labeled_fraction: Option<f64>,
    #[arg(long)]
    unlabeled_fraction: Option<f64>,
    #[arg(long)]
    split_seed: Option<u64>,
}

impl ConfigArgs {
    fn named(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut push = |key: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push(format!("{key}={v}"));
            }
        };
        let f = |v: Option<f64>| v.map(|x| format!("{x:?}"));
        push("seed", self.seed.map(|v| v.to_string()));
        push("model.max_len", self.max_len.map(|v| v.to_string()));
        push("model.vocab_size", self.vocab_size.map(|v| v.to_string()));
        push("schedule.batch_size", self.batch_size.map(|v| v.to_string()));
        push("schedule.beta", f(self.beta));
        push("schedule.pretrain_g", self.pretrain_g.map(|v| v.to_string()));
        push("schedule.pretrain_d", self.pretrain_d.map(|v| v.to_string()));
        push("schedule.pretrain_c", self.pretrain_c.map(|v| v.to_string()));
        push("schedule.training_epochs", self.training_epochs.map(|v| v.to_string()));
        push("data.test_fraction", f(self.test_fraction));
        push("data.labeled_fraction", f(self.labeled_fraction));
        push("data.unlabeled_fraction", f(self.unlabeled_fraction));
        push("data.split_seed", self.split_seed.map(|v| v.to_string()));
        out
    }

    fn resolve_over(&self, base: TrainConfig) -> CliResult<TrainConfig> {
        let base = match &self.config {
            Some(path) => TrainConfig::load(path)?,
            None => base,
        };
        let mut sets = self.named();
        sets.extend(self.sets.iter().cloned());
        Ok(overrides::apply(&base, &sets)?)
    }

    fn resolve(&self) -> CliResult<TrainConfig> {
        self.resolve_over(TrainConfig::default())
    }
}

#[derive(Args)]
struct RunArgs {
    /// Prepared dataset (`dataset.json` from `prepare-data`).
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint; its configuration is the base.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Append per-epoch metric records (JSON lines) here.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum ClassChoice {
    Spam,
    Nonspam,
    /// Draw from the configured class prior.
    Prior,
}

#[derive(Subcommand)]
enum Command {
    /// Tokenize, build the vocabulary and write a stratified split.
    PrepareData {
        /// TSV with `text` and `label` columns (defaults to `data.labeled_path`).
        #[arg(long)]
        labeled: Option<PathBuf>,
        /// Unlabeled reviews, one per line (defaults to `data.unlabeled_path`).
        #[arg(long)]
        unlabeled: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Pretrain generator, discriminator and classifier.
    Pretrain(RunArgs),
    /// Pretraining (unless already done) followed by adversarial training.
    Train(RunArgs),
    /// Accuracy, F1 and perplexity on the held-out split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Classify reviews read one per line from a text file.
    Classify {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Sample reviews from the generator.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, value_enum, default_value_t = ClassChoice::Prior)]
        class: ClassChoice,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        /// Argmax decoding with a zero noise vector.
        #[arg(long)]
        greedy: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Sweep labeled and unlabeled fractions over several seeds.
    Grid {
        #[arg(long)]
        labeled: PathBuf,
        #[arg(long)]
        unlabeled: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.3,0.5,0.7,0.9,1.0")]
        labeled_fractions: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0,0.5,0.7,1.0")]
        unlabeled_fractions: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        /// Skip the labeled-only baseline classifier.
        #[arg(long)]
        no_baseline: bool,
        /// Report file (JSON).
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Write plot tables (TSV) from a grid report.
    PlotData {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic two-class corpus (`labeled.tsv`, `unlabeled.txt`).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        labeled: usize,
        #[arg(long, default_value_t = 2000)]
        unlabeled: usize,
        #[arg(long, default_value_t = 50)]
        words: usize,
        #[arg(long, default_value_t = 6)]
        branching: usize,
        #[arg(long, default_value_t = 1.2)]
        strength: f64,
        #[arg(long, default_value_t = 18)]
        length: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn print_json(value: &serde_json::Value) -> CliResult {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn read_pool_texts(labeled: &Path, unlabeled: Option<&Path>) -> CliResult<(Vec<(String, Class)>, Vec<String>)> {
    let lab = read_labeled_tsv(labeled)?;
    let unl = match unlabeled {
        Some(p) => read_unlabeled_lines(p)?,
        None => Vec::new(),
    };
    Ok((lab, unl))
}

fn prepare_data(
    labeled: Option<PathBuf>,
    unlabeled: Option<PathBuf>,
    out: &Path,
    args: &ConfigArgs,
) -> CliResult {
    let config = args.resolve()?;
    let labeled = labeled
        .or_else(|| config.data.labeled_path.clone())
        .ok_or_else(|| CliError::Usage("no labeled data: pass --labeled or set data.labeled_path".into()))?;
    let unlabeled = unlabeled.or_else(|| config.data.unlabeled_path.clone());
    let (lab, unl) = read_pool_texts(&labeled, unlabeled.as_deref())?;
    let pool = Pool::from_texts(&lab, &unl, config.model.vocab_size, config.model.max_len)?;
    let split = SplitSpec {
        test_fraction: config.data.test_fraction,
        labeled_fraction: config.data.labeled_fraction,
        unlabeled_fraction: config.data.unlabeled_fraction,
        seed: config.data.split_seed,
    };
    let bundle = split_and_subsample(&pool.labeled, &pool.unlabeled, pool.vocabulary, split)?;
    fs::create_dir_all(out)?;
    bundle.save(&out.join("dataset.json"))?;
    bundle.vocabulary.save(&out.join("vocab.json"))?;
    let manifest = serde_json::to_value(bundle.manifest())?;
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    fs::write(out.join("config.toml"), config.to_toml())?;
    print_json(&manifest)
}

fn run(args: &RunArgs, adversarial: bool) -> CliResult {
    let resumed = args.resume.as_deref().map(load_checkpoint).transpose()?;
    let config = match &resumed {
        Some(ckpt) => args.config.resolve_over(ckpt.config.clone())?,
        None => args.config.resolve()?,
    };
    let bundle = DatasetBundle::load(&args.data)?;
    let data = TrainingData::from_bundle(&bundle)?;
    let mut state = match resumed {
        Some(ckpt) => ckpt.state,
        None => RunState::new(&config, bundle.vocabulary.len())?,
    };
    if state.vocab_size() != bundle.vocabulary.len() {
        return Err(CliError::Usage(format!(
            "checkpoint vocabulary has {} tokens, dataset has {}",
            state.vocab_size(),
            bundle.vocabulary.len()
        )));
    }
    let mut metrics_file = match &args.metrics {
        Some(p) => Some(BufWriter::new(fs::OpenOptions::new().create(true).append(true).open(p)?)),
        None => None,
    };
    let mut hooks = Hooks {
        metrics: metrics_file.as_mut().map(|w| w as &mut dyn Write),
        checkpoint: Some((args.out.as_path(), Some(&bundle.vocabulary))),
    };
    let result = pretrain(&config, &data, &mut state, &mut hooks).and_then(|()| {
        if adversarial {
            adversarial_train(&config, &data, &mut state, &mut hooks)
        } else {
            Ok(())
        }
    });
    if let Some(w) = metrics_file.as_mut() {
        w.flush()?;
    }
    result?;
    save_checkpoint(&args.out, &config, Some(&bundle.vocabulary), &state)?;
    print_json(&json!({
        "checkpoint": args.out,
        "config_hash": config.hash(),
        "progress": state.progress,
        "skipped_updates": state.progress.skipped_updates,
    }))
}

fn evaluate_cmd(checkpoint: &Path, data: &Path) -> CliResult {
    let ckpt = load_checkpoint(checkpoint)?;
    let bundle = DatasetBundle::load(data)?;
    let test = bundle.test_pairs();
    if test.is_empty() {
        return Err(Error::EmptyCorpus.into());
    }
    let e = evaluate(&ckpt.state, &test, ckpt.config.schedule.tie_break)?;
    print_json(&json!({
        "accuracy": e.accuracy,
        "f1": e.f1,
        "perplexity": e.perplexity,
        "confusion": e.confusion,
        "test_size": test.len(),
    }))
}

fn checkpoint_vocabulary(ckpt: &reviewgan::Checkpoint, path: &Path) -> CliResult<reviewgan::Vocabulary> {
    ckpt.vocabulary.clone().ok_or_else(|| {
        CliError::Usage(format!("{} carries no vocabulary", path.display()))
    })
}

fn classify(checkpoint: &Path, input: &Path) -> CliResult {
    let ckpt = load_checkpoint(checkpoint)?;
    let vocab = checkpoint_vocabulary(&ckpt, checkpoint)?;
    let texts = read_unlabeled_lines(input)?;
    let seqs = texts
        .iter()
        .map(|t| vocab.encode(t, ckpt.config.model.max_len))
        .collect::<reviewgan::Result<Vec<_>>>()?;
    let tie = ckpt.config.schedule.tie_break;
    let dists = ckpt.state.classifier.distributions(&seqs)?;
    let mut out = std::io::stdout().lock();
    for (i, d) in dists.iter().enumerate() {
        let class = predict(d, tie);
        let rec = json!({
            "index": i,
            "class": class,
            "confidence": d[class.index()],
            "p_spam": d[Class::Spam.index()],
        });
        serde_json::to_writer(&mut out, &rec)?;
        writeln!(out)?;
    }
    Ok(())
}

fn generate(
    checkpoint: &Path,
    count: usize,
    class: ClassChoice,
    temperature: f64,
    greedy: bool,
    seed: u64,
) -> CliResult {
    let ckpt = load_checkpoint(checkpoint)?;
    let vocab = checkpoint_vocabulary(&ckpt, checkpoint)?;
    let cfg = &ckpt.config;
    let prior = match class {
        ClassChoice::Spam => ClassPrior::only(Class::Spam),
        ClassChoice::Nonspam => ClassPrior::only(Class::NonSpam),
        ClassChoice::Prior => cfg.class_prior()?,
    };
    let g = &ckpt.state.generator;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let contexts: Vec<_> = (0..count)
        .map(|_| {
            let mut c = sample_context(&prior, cfg.model.z_dim, &mut rng);
            if greedy {
                c.z.iter_mut().for_each(|z| *z = 0.0);
            }
            c
        })
        .collect();
    let seqs = if greedy {
        contexts
            .iter()
            .map(|c| greedy_decode(g, c, cfg.model.max_len))
            .collect::<reviewgan::Result<Vec<_>>>()?
    } else {
        g.generate(&contexts, cfg.model.max_len, temperature, &mut rng)?.sequences
    };
    let mut out = std::io::stdout().lock();
    for (seq, ctx) in seqs.iter().zip(&contexts) {
        let rec = json!({ "class": ctx.class, "text": decode(seq, &vocab, cfg.data.keep_unk)? });
        serde_json::to_writer(&mut out, &rec)?;
        writeln!(out)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn grid(
    labeled: &Path,
    unlabeled: Option<&Path>,
    labeled_fractions: Vec<f64>,
    unlabeled_fractions: Vec<f64>,
    seeds: Vec<u64>,
    no_baseline: bool,
    out: &Path,
    args: &ConfigArgs,
) -> CliResult {
    let config = args.resolve()?;
    let (lab, unl) = read_pool_texts(labeled, unlabeled)?;
    let pool = Pool::from_texts(&lab, &unl, config.model.vocab_size, config.model.max_len)?;
    let spec = GridSpec {
        labeled_fractions,
        unlabeled_fractions,
        seeds,
        test_fraction: config.data.test_fraction,
        include_baseline: !no_baseline,
    };
    let report = run_grid(&config, &pool, &spec)?;
    report.save(out)?;
    let failures: usize = report.aggregates.iter().map(|a| a.failures).sum();
    print_json(&json!({
        "report": out,
        "records": report.records.len(),
        "baseline_records": report.baseline_records.len(),
        "failures": failures,
    }))
}

fn plot_data(report: &Path, out: &Path) -> CliResult {
    let report = MetricsReport::load(report)?;
    let written = emit_plot_data(&report, out)?;
    for w in &written.warnings {
        eprintln!("{}", json!({ "warning": w }));
    }
    print_json(&json!({ "files": written.files, "warnings": written.warnings }))
}

#[allow(clippy::too_many_arguments)]
fn synth(
    out: &Path,
    labeled: usize,
    unlabeled: usize,
    words: usize,
    branching: usize,
    strength: f64,
    length: usize,
    seed: u64,
) -> CliResult {
    let source = MarkovSource::new(words, branching, strength, length, seed)?;
    let (lab, unl) = source.corpus(labeled, unlabeled, seed.wrapping_add(1));
    fs::create_dir_all(out)?;
    let mut tsv = String::from("text\tlabel\n");
    for (text, class) in &lab {
        tsv.push_str(&format!("{text}\t{class}\n"));
    }
    fs::write(out.join("labeled.tsv"), tsv)?;
    fs::write(out.join("unlabeled.txt"), unl.join("\n") + "\n")?;
    print_json(&json!({ "labeled": lab.len(), "unlabeled": unl.len(), "dir": out }))
}

fn dispatch(command: Command) -> CliResult {
    match command {
        Command::PrepareData {
            labeled,
            unlabeled,
            out,
            config,
        } => prepare_data(labeled, unlabeled, &out, &config),
        Command::Pretrain(args) => run(&args, false),
        Command::Train(args) => run(&args, true),
        Command::Evaluate { checkpoint, data } => evaluate_cmd(&checkpoint, &data),
        Command::Classify { checkpoint, input } => classify(&checkpoint, &input),
        Command::Generate {
            checkpoint,
            count,
            class,
            temperature,
            greedy,
            seed,
        } => generate(&checkpoint, count, class, temperature, greedy, seed),
        Command::Grid {
            labeled,
            unlabeled,
            labeled_fractions,
            unlabeled_fractions,
            seeds,
            no_baseline,
            out,
            config,
        } => grid(
            &labeled,
            unlabeled.as_deref(),
            labeled_fractions,
            unlabeled_fractions,
            seeds,
            no_baseline,
            &out,
            &config,
        ),
        Command::PlotData { report, out } => plot_data(&report, &out),
        Command::Synth {
            out,
            labeled,
            unlabeled,
            words,
            branching,
            strength,
            length,
            seed,
        } => synth(&out, labeled, unlabeled, words, branching, strength, length, seed),
    }
}

fn fail(kind: &str, message: &str, code: u8) -> ExitCode {
    eprintln!("{}", json!({ "error": { "kind": kind, "message": message } }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string().trim(), 2),
    };
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::new(&cli.log))
        .with_writer(std::io::stderr)
        .init();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), &e.to_string(), 1),
    }
}
