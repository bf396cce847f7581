//! Command-line entry point. [`dispatch`] parses arguments, runs one
//! subcommand and maps the outcome to an exit code: 0 success, 1 usage
//! error, 2 data error, 3 numeric failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::corpus::{gen_synthetic, load_dataset, split_train_valid, write_records, CorpusStats, SampleRecord, SplitTag};
use crate::error::{Error, Result};
use crate::evaluation::{
    evaluate, fit_with_vocab, run_ablation, run_sample_sweep, train_tokenizer, ExperimentConfig, Sampling,
};
use crate::generation::beam_search;
use crate::model::{CRepair, ModelConfig};
use crate::numerics::CHECKPOINT_FORMAT_VERSION;
use crate::preproc::{prepare, prompt_input, PromptMode};
use crate::tokenizer::BpeVocab;
use crate::training::TrainConfig;

pub const SEED_ENV: &str = "CREPAIR_SEED";

fn version() -> String {
    format!("{} (checkpoint format {CHECKPOINT_FORMAT_VERSION})", env!("CARGO_PKG_VERSION"))
}

#[derive(Parser, Debug)]
#[command(name = "crepair", about = "Train and run a conditional-variational vulnerability repair model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write prompted examples as JSON lines.
    Preprocess {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "full")]
        mode: Mode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Learn a BPE vocabulary from a corpus.
    TrainTokenizer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 2000)]
        vocab_size: usize,
        #[arg(long, value_enum, default_value = "full")]
        mode: Mode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write its checkpoint.
    Train(RunArgs),
    /// Print ranked candidate patches for one function.
    Repair {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 50)]
        beam: usize,
        /// Source file holding the vulnerable function.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        cwe: String,
        /// Character range `start:end` of the vulnerable span.
        #[arg(long)]
        span: String,
        #[arg(long, default_value_t = 64)]
        max_len: usize,
        #[arg(long, value_enum, default_value = "full")]
        mode: Mode,
    },
    /// Score a checkpoint on a record file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 10)]
        beam: usize,
        #[arg(long, default_value_t = 64)]
        max_len: usize,
        #[arg(long, value_enum, default_value = "full")]
        mode: Mode,
        /// Where to write the per-record result as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and score the sampling x prompt ablation matrix.
    Ablate(RunArgs),
    /// Train and score one model per sample count.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "1,3,5,7,9")]
        counts: Vec<usize>,
    },
    /// Write a synthetic corpus.
    GenSynthetic {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Corpus size and length summary.
    Stats {
        #[arg(long)]
        data: PathBuf,
        /// Measure token lengths with this vocabulary instead of characters.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, default_value_t = 512)]
        max_len: usize,
    },
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum Mode {
    Full,
    Stripped,
}

impl From<Mode> for PromptMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Full => PromptMode::Full,
            Mode::Stripped => PromptMode::Stripped,
        }
    }
}

/// Flags shared by the training subcommands; each overrides the config file.
#[derive(Args, Debug, Default)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train_data: Option<PathBuf>,
    #[arg(long)]
    valid_data: Option<PathBuf>,
    #[arg(long)]
    test_data: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    sample_count: Option<usize>,
    /// Train with `Z = mu`.
    #[arg(long)]
    no_noise: bool,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
}

/// Flat run configuration: model, training and path settings in one document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub vocab_size: usize,
    pub sample_count: Option<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub kl_warmup_fraction: f64,
    pub condition_dropout: f64,
    pub grad_clip: f64,
    pub latent_noise: bool,
    pub seed: Option<u64>,
    pub valid_fraction: f64,
    pub beam_width: usize,
    pub decode_max_len: usize,
    pub mode: PromptMode,
    pub train_data: Option<PathBuf>,
    pub valid_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let e = ExperimentConfig::default();
        RunConfig {
            preset: e.preset,
            vocab_size: e.vocab_size,
            sample_count: None,
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            kl_warmup_fraction: t.kl_warmup_fraction,
            condition_dropout: t.condition_dropout,
            grad_clip: t.grad_clip,
            latent_noise: t.latent_noise,
            seed: None,
            valid_fraction: 0.1,
            beam_width: e.beam_width,
            decode_max_len: e.decode_max_len,
            mode: PromptMode::Full,
            train_data: None,
            valid_data: None,
            test_data: None,
            vocab: None,
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))
    }

    /// Seed from the config, then the environment, then 0.
    pub fn resolved_seed(&self) -> Result<u64> {
        if let Some(s) = self.seed {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("{SEED_ENV}={v} is not an unsigned integer"))),
            Err(_) => Ok(0),
        }
    }

    pub fn experiment(&self, seed: u64) -> ExperimentConfig {
        ExperimentConfig {
            preset: self.preset.clone(),
            vocab_size: self.vocab_size,
            beam_width: self.beam_width,
            decode_max_len: self.decode_max_len,
            train: TrainConfig {
                epochs: self.epochs,
                learning_rate: self.learning_rate,
                batch_size: self.batch_size,
                kl_warmup_fraction: self.kl_warmup_fraction,
                condition_dropout: self.condition_dropout,
                seed,
                checkpoint_dir: Some(self.out_dir.clone()),
                grad_clip: self.grad_clip,
                latent_noise: self.latent_noise,
            },
        }
    }

    fn sampling(&self, preset_count: usize) -> Sampling {
        Sampling {
            noise: self.latent_noise,
            count: self.sample_count.unwrap_or(preset_count),
        }
    }

    /// Checks every input path and prepares the output directory.
    fn check_paths(&self, need_test: bool) -> Result<()> {
        let train = self
            .train_data
            .as_ref()
            .ok_or_else(|| Error::invalid("no training data given (train_data)"))?;
        let mut inputs = vec![train];
        inputs.extend(self.valid_data.iter());
        inputs.extend(self.vocab.iter());
        if need_test {
            inputs.push(
                self.test_data
                    .as_ref()
                    .ok_or_else(|| Error::invalid("no test data given (test_data)"))?,
            );
        }
        for p in inputs {
            if !p.is_file() {
                return Err(Error::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")));
            }
        }
        fs::create_dir_all(&self.out_dir).map_err(|e| Error::io(&self.out_dir, e))
    }
}

fn resolve(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    macro_rules! set {
        ($($field:ident),*) => {$(
            if let Some(v) = &args.$field {
                cfg.$field = v.clone().into();
            }
        )*};
    }
    set!(train_data, valid_data, test_data, vocab, preset, epochs, learning_rate, batch_size, seed);
    if let Some(v) = &args.out_dir {
        cfg.out_dir = v.clone();
    }
    if let Some(n) = args.sample_count {
        cfg.sample_count = Some(n);
    }
    if let Some(m) = args.mode {
        cfg.mode = m.into();
    }
    if args.no_noise {
        cfg.latent_noise = false;
    }
    cfg.seed = Some(cfg.resolved_seed()?);
    log::info!("resolved config: {}", serde_json::to_string(&cfg)?);
    log::info!("seed: {}", cfg.seed.unwrap_or_default());
    Ok(cfg)
}

/// Parses `argv` (including the program name), runs the command and returns the exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let version: &'static str = Box::leak(version().into_boxed_str());
    let parsed = Cli::command()
        .version(version)
        .try_get_matches_from(argv)
        .and_then(|m| Cli::from_arg_matches(&m));
    let cli = match parsed {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Invalid(_) => 1,
        Error::Numeric(_) | Error::Shape { .. } => 3,
        Error::Data(_) | Error::Record { .. } | Error::Io { .. } | Error::Json(_) => 2,
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn load_checkpoint(path: &Path) -> Result<(CRepair, BpeVocab)> {
    let (model, vocab) = CRepair::load(path)?;
    let vocab = vocab.ok_or_else(|| Error::data(format!("{}: checkpoint carries no vocabulary", path.display())))?;
    Ok((model, vocab))
}

fn parse_span(span: &str) -> Result<(usize, usize)> {
    let (a, b) = span
        .split_once(':')
        .ok_or_else(|| Error::invalid(format!("span {span:?} is not start:end")))?;
    let parse = |s: &str| {
        s.trim()
            .parse::<usize>()
            .map_err(|_| Error::invalid(format!("span {span:?} is not start:end")))
    };
    Ok((parse(a)?, parse(b)?))
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenSynthetic { count, seed, out } => {
            let seed = match seed {
                Some(s) => s,
                None => RunConfig::default().resolved_seed()?,
            };
            log::info!("seed: {seed}");
            write_records(&out, &gen_synthetic(count, seed))
        }
        Command::Preprocess { data, mode, out } => {
            let records = load_dataset(&data, SplitTag::Train)?;
            let mut buf = Vec::new();
            for r in &records {
                let p = prepare(r, mode.into())?;
                serde_json::to_writer(&mut buf, &serde_json::json!({"id": r.id, "input": p.input_text, "target": p.target_text}))?;
                buf.push(b'\n');
            }
            write_file(&out, &buf)
        }
        Command::TrainTokenizer { data, vocab_size, mode, out } => {
            let records = load_dataset(&data, SplitTag::Train)?;
            let vocab = train_tokenizer(&records, mode.into(), vocab_size)?;
            println!("{} tokens, {} merges", vocab.len(), vocab.merges.len());
            vocab.save(&out)
        }
        Command::Train(args) => {
            let cfg = resolve(&args)?;
            cfg.check_paths(false)?;
            let seed = cfg.seed.unwrap_or_default();
            let (train_set, valid_set) = load_train_valid(&cfg, seed)?;
            let preset_count = ModelConfig::preset(&cfg.preset, 1)?.sample_count;
            let vocab = match &cfg.vocab {
                Some(p) => BpeVocab::load(p)?,
                None => train_tokenizer(&train_set, cfg.mode, cfg.vocab_size)?,
            };
            let fitted = fit_with_vocab(
                &cfg.experiment(seed),
                vocab,
                cfg.mode,
                cfg.sampling(preset_count),
                &train_set,
                &valid_set,
            )?;
            print!("{}", fitted.report);
            let ckpt = cfg.out_dir.join("model.ckpt");
            fitted.model.save(&ckpt, Some(&fitted.vocab))?;
            write_file(&cfg.out_dir.join("config.json"), serde_json::to_string_pretty(&cfg)?.as_bytes())?;
            println!("checkpoint written to {}", ckpt.display());
            Ok(())
        }
        Command::Repair {
            checkpoint,
            beam,
            input,
            cwe,
            span,
            max_len,
            mode,
        } => {
            let (vuln_start, vuln_end) = parse_span(&span)?;
            let code = fs::read_to_string(&input).map_err(|e| Error::io(&input, e))?;
            let (model, vocab) = load_checkpoint(&checkpoint)?;
            let record = SampleRecord {
                id: input.display().to_string(),
                fixed_code: code.clone(),
                vulnerable_code: code,
                cwe_id: cwe,
                vuln_start,
                vuln_end,
            };
            record
                .validate()
                .map_err(|(field, message)| Error::data(format!("{field}: {message}")))?;
            let text = prompt_input(&record, mode.into())?;
            let candidates = beam_search(&model, &vocab, &vocab.encode(&text), beam, max_len)?;
            let mut out = std::io::stdout().lock();
            for c in candidates {
                writeln!(out, "{}\t{:.6}\t{}", c.rank, c.log_prob, c.text).map_err(|e| Error::io("stdout", e))?;
            }
            Ok(())
        }
        Command::Eval {
            checkpoint,
            data,
            beam,
            max_len,
            mode,
            out,
        } => {
            let (model, vocab) = load_checkpoint(&checkpoint)?;
            let records = load_dataset(&data, SplitTag::Test)?;
            let result = evaluate(&model, &vocab, &records, mode.into(), beam, max_len)?;
            println!("{result}");
            if let Some(out) = out {
                write_file(&out, serde_json::to_string_pretty(&result)?.as_bytes())?;
            }
            Ok(())
        }
        Command::Ablate(args) => {
            let cfg = resolve(&args)?;
            cfg.check_paths(true)?;
            let seed = cfg.seed.unwrap_or_default();
            let (train_set, valid_set) = load_train_valid(&cfg, seed)?;
            let test_set = load_dataset(cfg.test_data.as_deref().unwrap_or(Path::new("")), SplitTag::Test)?;
            let table = run_ablation(&cfg.experiment(seed), &train_set, &valid_set, &test_set)?;
            print!("{}", table.to_text());
            write_rows(&cfg.out_dir.join("ablation.jsonl"), &table.rows())
        }
        Command::Sweep { run, counts } => {
            let cfg = resolve(&run)?;
            cfg.check_paths(true)?;
            let seed = cfg.seed.unwrap_or_default();
            let (train_set, valid_set) = load_train_valid(&cfg, seed)?;
            let test_set = load_dataset(cfg.test_data.as_deref().unwrap_or(Path::new("")), SplitTag::Test)?;
            let table = run_sample_sweep(&cfg.experiment(seed), &counts, &train_set, &valid_set, &test_set)?;
            print!("{}", table.to_text());
            write_rows(&cfg.out_dir.join("sweep.jsonl"), &table.rows_json())
        }
        Command::Stats { data, vocab, max_len } => {
            let records = load_dataset(&data, SplitTag::Train)?;
            let vocab = vocab.map(|p| BpeVocab::load(&p)).transpose()?;
            let mut lengths = Vec::with_capacity(records.len());
            for r in &records {
                let text = prompt_input(r, PromptMode::Full)?;
                lengths.push(match &vocab {
                    Some(v) => v.encode(&text).len(),
                    None => text.chars().count(),
                });
            }
            let unit = if vocab.is_some() { "tokens" } else { "chars" };
            print!("{}", CorpusStats::compute(&records, &lengths, max_len, unit));
            Ok(())
        }
    }
}

fn load_train_valid(cfg: &RunConfig, seed: u64) -> Result<(Vec<SampleRecord>, Vec<SampleRecord>)> {
    let train = load_dataset(cfg.train_data.as_deref().unwrap_or(Path::new("")), SplitTag::Train)?;
    match &cfg.valid_data {
        Some(p) => Ok((train, load_dataset(p, SplitTag::Train)?)),
        None if cfg.valid_fraction > 0.0 => {
            let split = split_train_valid(&train, cfg.valid_fraction, seed)?;
            Ok((split.train, split.valid))
        }
        None => Ok((train, Vec::new())),
    }
}

fn write_rows(path: &Path, rows: &[serde_json::Value]) -> Result<()> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    write_file(path, &buf)
}
