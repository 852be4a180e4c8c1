//! Command-line entry point: `gen-data`, `train`, `distill`, `decode`,
//! `eval` and `bench`.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::eval::{benchmark, corpus_bleu, estimate_pmi, perplexity, sequence_accuracy, BenchConfig};
use crate::model::Model;
use crate::search::{decode_sources, BeamConfig, StopRule};
use crate::tasks::{generate, read_dataset, read_sources, write_dataset, TaskKind, TaskSpec};
use crate::train::{distill, evaluate_loss, train, TrainConfig};
use crate::vocab::Token;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "bidecoder", version, about = "Bidirectional and semi-autoregressive sequence decoding")]
struct Cli {
    /// Directory every relative path is resolved against.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    /// Overrides the seed of data generation and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
    /// Train a model from a config file.
    Train(TrainArgs),
    /// Decode the training sources with a teacher, then train a student on its outputs.
    Distill(DistillArgs),
    /// Beam-decode a source file.
    Decode(DecodeArgs),
    /// Accuracy, BLEU, perplexity and optionally PMI on a dataset.
    Eval(EvalArgs),
    /// Time decoding of several models on the same sources.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long)]
    task: TaskKind,
    /// Vocabulary size including the four reserved symbols.
    #[arg(long, default_value_t = 64)]
    vocab: usize,
    #[arg(long, default_value_t = 2)]
    min_len: usize,
    #[arg(long, default_value_t = 20)]
    max_len: usize,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0.0)]
    dependency_strength: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's `train` path.
    #[arg(long)]
    train: Option<PathBuf>,
    /// Overrides the config's `output` path.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DistillArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's `teacher` path.
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Where to write the distilled dataset.
    #[arg(long)]
    distilled: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    max_len: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
}

#[derive(Debug, Args)]
struct SearchArgs {
    #[arg(long, default_value_t = 4)]
    beam: usize,
    /// Maximum generated slots.
    #[arg(long, default_value_t = 256)]
    max_len: usize,
    /// Remove repeated n-grams up to this order from outputs.
    #[arg(long)]
    dedup_n: Option<usize>,
    /// Sentences decoded together.
    #[arg(long, default_value_t = 32)]
    batch: usize,
    /// Stop as soon as `beam` hypotheses have finished, even if a live one could still win.
    #[arg(long)]
    stop_first_b: bool,
}

impl SearchArgs {
    fn beam_config(&self) -> BeamConfig {
        let stop = if self.stop_first_b { StopRule::FirstB } else { StopRule::Settled };
        BeamConfig { dedup: self.dedup_n, stop, ..BeamConfig::new(self.beam, self.max_len) }
    }
}

#[derive(Debug, Args)]
struct DecodeArgs {
    #[arg(long)]
    model: PathBuf,
    /// One source per line; anything after a tab is ignored.
    #[arg(long)]
    input: PathBuf,
    /// Hypotheses, one per line; stdout when absent.
    #[arg(long)]
    output: Option<PathBuf>,
    #[command(flatten)]
    search: SearchArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Model decoding the same order one slot per step; enables the PMI estimate.
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[command(flatten)]
    search: SearchArgs,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// `name=checkpoint`; the first is the speedup baseline.
    #[arg(long = "model", required = true)]
    models: Vec<String>,
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "4")]
    beams: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    batches: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long, default_value_t = 128)]
    max_len: usize,
    /// Also write JSON lines here.
    #[arg(long)]
    jsonl: Option<PathBuf>,
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numeric() {
                EXIT_NUMERIC
            } else {
                EXIT_DATA
            }
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    let at = |p: &Path| cli.workdir.join(p);
    match &cli.command {
        Command::GenData(a) => {
            let spec = TaskSpec {
                kind: a.task,
                vocab_size: a.vocab,
                min_len: a.min_len,
                max_len: a.max_len,
                count: a.count,
                seed: cli.seed.unwrap_or(1),
                dependency_strength: a.dependency_strength,
            };
            write_dataset(&at(&a.out), &generate(&spec)?)
        }
        Command::Train(a) => {
            let cfg = load_config(cli, &a.config, a.train.as_deref(), a.output.as_deref())?;
            let data = read_dataset(required(&cfg.train, "train")?)?;
            let output = required(&cfg.output, "output")?;
            let outcome = train(&data, &cfg, report)?;
            report_valid(&outcome.model, &cfg)?;
            outcome.model.save(output)
        }
        Command::Distill(a) => {
            let mut cfg = load_config(cli, &a.config, a.train.as_deref(), a.output.as_deref())?;
            if let Some(t) = &a.teacher {
                cfg.teacher = Some(at(t));
            }
            let teacher = Model::load(required(&cfg.teacher, "teacher")?)?;
            let data = read_dataset(required(&cfg.train, "train")?)?;
            let output = required(&cfg.output, "output")?.to_path_buf();
            let distilled = distill(&teacher, &data.sources(), cfg.distill_beam, a.max_len, a.batch)?;
            eprintln!("distilled {} pairs, dropped {} unterminated", distilled.data.len(), distilled.dropped);
            if let Some(path) = &a.distilled {
                write_dataset(&at(path), &distilled.data)?;
            }
            let outcome = train(&distilled.data, &cfg, report)?;
            report_valid(&outcome.model, &cfg)?;
            outcome.model.save(&output)
        }
        Command::Decode(a) => {
            let model = Model::load(&at(&a.model))?;
            let sources = read_sources(&at(&a.input), model.config().vocab_src)?;
            let results = decode_sources(&model, &sources, &a.search.beam_config(), a.search.batch)?;
            let mut text = String::new();
            for r in &results {
                text.push_str(&join(&r.output));
                text.push('\n');
            }
            match &a.output {
                Some(path) => std::fs::write(at(path), text)?,
                None => std::io::stdout().write_all(text.as_bytes())?,
            }
            Ok(())
        }
        Command::Eval(a) => {
            let model = Model::load(&at(&a.model))?;
            let data = read_dataset(&at(&a.data))?;
            let results = decode_sources(&model, &data.sources(), &a.search.beam_config(), a.search.batch)?;
            let hyps: Vec<Vec<Token>> = results.into_iter().map(|r| r.output).collect();
            let refs: Vec<Vec<Token>> = data.pairs.iter().map(|p| p.tgt.clone()).collect();
            println!("accuracy\t{:.4}", sequence_accuracy(&hyps, &refs)?);
            println!("bleu\t{:.2}", corpus_bleu(&hyps, &refs)?);
            println!("perplexity\t{:.4}", perplexity(&model, &data)?);
            if let Some(b) = &a.baseline {
                let baseline = Model::load(&at(b))?;
                let pmi = estimate_pmi(&model, &baseline, &data)?;
                println!("baseline_perplexity\t{:.4}", pmi.ppl_baseline);
                println!("pmi\t{:.4}", pmi.pmi);
            }
            Ok(())
        }
        Command::Bench(a) => {
            let mut loaded = Vec::new();
            for spec in &a.models {
                let (name, path) = spec
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("expected name=checkpoint, got '{spec}'")))?;
                loaded.push((name.to_string(), Model::load(&at(Path::new(path)))?));
            }
            let sources = read_sources(&at(&a.input), loaded[0].1.config().vocab_src)?;
            let models: Vec<(&str, &Model)> = loaded.iter().map(|(n, m)| (n.as_str(), m)).collect();
            let cfg = BenchConfig {
                beams: a.beams.clone(),
                batches: a.batches.clone(),
                repeats: a.repeats,
                max_len: a.max_len,
                ..BenchConfig::default()
            };
            let report = benchmark(&models, &sources, &cfg)?;
            print!("{}", report.to_table());
            if let Some(path) = &a.jsonl {
                std::fs::write(at(path), report.to_jsonl()?)?;
            }
            Ok(())
        }
    }
}

/// Reads the config and resolves its paths against the working directory.
fn load_config(cli: &Cli, path: &Path, train: Option<&Path>, output: Option<&Path>) -> Result<TrainConfig> {
    let at = |p: &Path| cli.workdir.join(p);
    let mut cfg = TrainConfig::from_file(&at(path))?;
    if let Some(p) = train {
        cfg.train = Some(p.to_path_buf());
    }
    if let Some(p) = output {
        cfg.output = Some(p.to_path_buf());
    }
    for p in [&mut cfg.train, &mut cfg.valid, &mut cfg.output, &mut cfg.teacher].into_iter().flatten() {
        *p = at(p);
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn required<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    path.as_deref().ok_or_else(|| Error::Config(format!("missing '{key}' path")))
}

fn report(p: &crate::train::Progress) {
    eprintln!("step {:>6}  epoch {:>3}  loss {:.4}  lr {:.2e}", p.step, p.epoch, p.loss, p.lr);
}

fn report_valid(model: &Model, cfg: &TrainConfig) -> Result<()> {
    if let Some(valid) = &cfg.valid {
        let loss = evaluate_loss(model, &read_dataset(valid)?, cfg.optim.tokens_per_batch)?;
        eprintln!("valid loss {loss:.4}");
    }
    Ok(())
}

fn join(tokens: &[Token]) -> String {
    tokens.iter().map(Token::to_string).collect::<Vec<_>>().join(" ")
}
