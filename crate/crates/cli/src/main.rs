//! `mtkit`: train tokenizers and translation models, translate text and
//! score the output.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use mtkit_core::corpus::{
    load_parallel, CleaningPolicy, CorpusFormat, ParallelCorpus, Split,
};
use mtkit_core::decode::{translate_corpus, DecodeConfig};
use mtkit_core::metrics::{evaluate_files, render_table, EvalReport};
use mtkit_core::model::{ModelConfig, TransformerModel};
use mtkit_core::subword::SubwordModel;
use mtkit_core::train::{fit, Checkpoint, FitOptions, TrainConfig};

#[derive(Parser)]
#[command(name = "mtkit", version, about = "Machine translation workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (TOML). Paths inside are relative to this file.
    #[arg(long)]
    config: PathBuf,
    /// Override a config value, e.g. --set train.epochs=3
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Learn a subword vocabulary from the training corpus
    TokenizerTrain(ConfigArgs),
    /// Train a model from scratch
    Train(ConfigArgs),
    /// Continue training from a checkpoint
    Continue {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint to resume from (default: <output_dir>/model.ckpt)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Translate a file of source sentences, one per line
    Translate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Score a hypothesis file against a reference file
    Evaluate {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Row label in the rendered table
        #[arg(long, default_value = "system")]
        name: String,
        /// Include per-sentence scores in the JSON report
        #[arg(long)]
        per_sentence: bool,
        /// Write the full report as JSON to this path
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Render a comparison table from saved JSON reports
    Report {
        /// NAME=REPORT.json entries, one table row each
        #[arg(required = true, value_name = "NAME=PATH")]
        systems: Vec<String>,
    },
    /// Print corpus statistics for the configured splits
    Stats(ConfigArgs),
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum DataFormat {
    Tsv,
    Jsonl,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Cleaning {
    Strict,
    Drop,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
struct DataConfig {
    train: Option<String>,
    valid: Option<String>,
    test: Option<String>,
    format: DataFormat,
    cleaning: Cleaning,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: None,
            valid: None,
            test: None,
            format: DataFormat::Tsv,
            cleaning: Cleaning::Strict,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
struct TokenizerConfig {
    vocab_size: usize,
    path: String,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            vocab_size: 32_000,
            path: "subword.model".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    output_dir: String,
    /// Seed for model parameter initialization.
    init_seed: u64,
    data: DataConfig,
    tokenizer: TokenizerConfig,
    model: ModelConfig,
    train: Option<TrainConfig>,
    decode: DecodeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output_dir: "out".into(),
            init_seed: 1,
            data: DataConfig::default(),
            tokenizer: TokenizerConfig::default(),
            model: ModelConfig::default(),
            train: None,
            decode: DecodeConfig::default(),
        }
    }
}

/// A loaded config together with the directory its paths resolve against.
struct Run {
    cfg: RunConfig,
    base: PathBuf,
}

impl Run {
    fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    fn output_dir(&self) -> PathBuf {
        self.resolve(&self.cfg.output_dir)
    }

    fn tokenizer_path(&self) -> PathBuf {
        self.resolve(&self.cfg.tokenizer.path)
    }

    fn checkpoint_path(&self, explicit: Option<&PathBuf>) -> PathBuf {
        explicit
            .cloned()
            .unwrap_or_else(|| self.output_dir().join("model.ckpt"))
    }

    fn load_split(&self, split: Split) -> Result<Option<ParallelCorpus>, CliError> {
        let rel = match split {
            Split::Train => &self.cfg.data.train,
            Split::Validation => &self.cfg.data.valid,
            Split::Test => &self.cfg.data.test,
        };
        let Some(rel) = rel else { return Ok(None) };
        let path = self.resolve(rel);
        let format = match self.cfg.data.format {
            DataFormat::Tsv => CorpusFormat::Tsv,
            DataFormat::Jsonl => CorpusFormat::Jsonl,
        };
        let policy = match self.cfg.data.cleaning {
            Cleaning::Strict => CleaningPolicy::Strict,
            Cleaning::Drop => CleaningPolicy::Drop,
        };
        let outcome = load_parallel(&path, format, policy, split)
            .with_context(|| format!("loading {}", path.display()))?;
        if outcome.dropped > 0 {
            eprintln!(
                "warning: dropped {} invalid pair(s) from {}",
                outcome.dropped,
                path.display()
            );
        }
        Ok(Some(outcome.corpus))
    }

    fn require_split(&self, split: Split) -> Result<ParallelCorpus, CliError> {
        self.load_split(split)?.ok_or_else(|| {
            CliError::Usage(format!("config has no data path for split {split}").to_lowercase())
        })
    }

    /// Snapshot the fully resolved config next to the run outputs.
    fn write_snapshot(&self) -> Result<(), CliError> {
        let dir = self.output_dir();
        std::fs::create_dir_all(&dir)
            .with_context(|| format!("creating {}", dir.display()))?;
        let rendered = toml::to_string_pretty(&self.cfg)
            .map_err(|e| CliError::Runtime(anyhow!("serializing resolved config: {e}")))?;
        std::fs::write(dir.join("resolved-config.toml"), rendered)
            .context("writing resolved config snapshot")?;
        Ok(())
    }
}

fn apply_set(doc: &mut toml::Value, spec: &str) -> Result<(), CliError> {
    let (key, value) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set needs KEY=VALUE, got {spec:?}")))?;
    // parse the value with toml rules; bare words fall back to strings
    let parsed: toml::Value = format!("v = {value}")
        .parse::<toml::Table>()
        .map(|t| t["v"].clone())
        .unwrap_or_else(|_| toml::Value::String(value.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        node = node
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("--set key {key:?} crosses a non-table")))?
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    node.as_table_mut()
        .ok_or_else(|| CliError::Usage(format!("--set key {key:?} crosses a non-table")))?
        .insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

fn load_run(args: &ConfigArgs) -> Result<Run, CliError> {
    let text = std::fs::read_to_string(&args.config).map_err(|e| {
        CliError::Usage(format!("cannot read config {}: {e}", args.config.display()))
    })?;
    let mut doc: toml::Value = text
        .parse()
        .map_err(|e| CliError::Usage(format!("config parse error: {e}")))?;
    for spec in &args.sets {
        apply_set(&mut doc, spec)?;
    }
    let cfg: RunConfig = doc
        .try_into()
        .map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;
    let base = args
        .config
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| Path::new("."))
        .to_path_buf();
    Ok(Run { cfg, base })
}

fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes =
        std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// Input-file hashes recorded beside every training run.
fn write_provenance(run: &Run, subword: &SubwordModel) -> Result<(), CliError> {
    let mut files = BTreeMap::new();
    for rel in [&run.cfg.data.train, &run.cfg.data.valid, &run.cfg.data.test]
        .into_iter()
        .flatten()
    {
        files.insert(rel.clone(), sha256_file(&run.resolve(rel))?);
    }
    files.insert(run.cfg.tokenizer.path.clone(), sha256_file(&run.tokenizer_path())?);
    let doc = serde_json::json!({
        "sha256": files,
        "subword_hash": subword.content_hash(),
    });
    std::fs::write(
        run.output_dir().join("provenance.json"),
        serde_json::to_string_pretty(&doc).expect("json"),
    )
    .context("writing provenance.json")?;
    Ok(())
}

fn load_tokenizer(run: &Run) -> Result<SubwordModel, CliError> {
    let path = run.tokenizer_path();
    SubwordModel::load(&path)
        .with_context(|| format!("loading tokenizer {}", path.display()))
        .map_err(Into::into)
}

fn cmd_tokenizer_train(args: &ConfigArgs) -> Result<(), CliError> {
    let run = load_run(args)?;
    run.write_snapshot()?;
    let corpus = run.require_split(Split::Train)?;
    let texts: Vec<&str> = corpus
        .pairs
        .iter()
        .flat_map(|p| [p.source.as_str(), p.target.as_str()])
        .collect();
    let model = SubwordModel::train(texts, run.cfg.tokenizer.vocab_size)
        .context("training tokenizer")?;
    let path = run.tokenizer_path();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    model
        .save(&path)
        .with_context(|| format!("saving tokenizer {}", path.display()))?;
    println!(
        "tokenizer: {} pieces, hash {}, saved to {}",
        model.vocab_size(),
        model.content_hash(),
        path.display()
    );
    Ok(())
}

fn run_training(run: &Run, model: &TransformerModel, cfg: &TrainConfig) -> Result<(), CliError> {
    let subword = load_tokenizer(run)?;
    let train = run.require_split(Split::Train)?;
    let valid = run.load_split(Split::Validation)?;
    run.write_snapshot()?;
    write_provenance(run, &subword)?;
    let out = run.output_dir();
    let checkpoint = out.join("model.ckpt");
    let history = out.join("history.jsonl");
    let stats = fit(
        model,
        &subword,
        &train,
        valid.as_ref(),
        cfg,
        &FitOptions {
            checkpoint_path: Some(&checkpoint),
            history_path: Some(&history),
        },
    )
    .context("training")?;
    for epoch in &stats {
        match epoch.valid_loss {
            Some(v) => println!(
                "epoch {}: train loss {:.4}, valid loss {:.4}",
                epoch.epoch, epoch.train_loss, v
            ),
            None => println!("epoch {}: train loss {:.4}", epoch.epoch, epoch.train_loss),
        }
    }
    println!("checkpoint: {}", checkpoint.display());
    Ok(())
}

fn cmd_train(args: &ConfigArgs) -> Result<(), CliError> {
    let run = load_run(args)?;
    let cfg = run.cfg.train.clone().unwrap_or_else(TrainConfig::scratch);
    let model = TransformerModel::new(run.cfg.model.clone(), run.cfg.init_seed)
        .context("building model")?;
    run_training(&run, &model, &cfg)
}

fn cmd_continue(args: &ConfigArgs, checkpoint: Option<&PathBuf>) -> Result<(), CliError> {
    let run = load_run(args)?;
    let cfg = run.cfg.train.clone().unwrap_or_else(TrainConfig::continued);
    let path = run.checkpoint_path(checkpoint);
    let loaded = Checkpoint::load(&path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    let subword = load_tokenizer(&run)?;
    loaded
        .verify_subword(&subword.content_hash())
        .context("subword model mismatch")?;
    let model = loaded.into_model().context("restoring model")?;
    run_training(&run, &model, &cfg)
}

fn cmd_translate(
    args: &ConfigArgs,
    checkpoint: Option<&PathBuf>,
    input: &Path,
    output: &Path,
) -> Result<(), CliError> {
    let run = load_run(args)?;
    let subword = load_tokenizer(&run)?;
    let path = run.checkpoint_path(checkpoint);
    let loaded = Checkpoint::load(&path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    loaded
        .verify_subword(&subword.content_hash())
        .context("subword model mismatch")?;
    let model = loaded.into_model().context("restoring model")?;
    let text = std::fs::read_to_string(input)
        .with_context(|| format!("reading {}", input.display()))?;
    let sources: Vec<String> = text.lines().map(str::to_string).collect();
    let outcome = translate_corpus(&model, &subword, &sources, &run.cfg.decode);
    if outcome.failures > 0 {
        eprintln!(
            "warning: {} sentence(s) failed to decode and were left empty",
            outcome.failures
        );
    }
    let mut rendered = outcome.translations.join("\n");
    rendered.push('\n');
    std::fs::write(output, rendered)
        .with_context(|| format!("writing {}", output.display()))?;
    println!("translated {} sentence(s) to {}", sources.len(), output.display());
    Ok(())
}

fn cmd_evaluate(
    hyp: &Path,
    reference: &Path,
    name: &str,
    per_sentence: bool,
    json: Option<&PathBuf>,
) -> Result<(), CliError> {
    let report = evaluate_files(hyp, reference, per_sentence).context("evaluating")?;
    print!("{}", render_table(&[(name.to_string(), &report)]));
    if let Some(path) = json {
        std::fs::write(
            path,
            serde_json::to_string_pretty(&report).expect("report serializes"),
        )
        .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn cmd_report(systems: &[String]) -> Result<(), CliError> {
    let mut loaded: Vec<(String, EvalReport)> = Vec::new();
    for spec in systems {
        let (name, path) = spec
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("expected NAME=PATH, got {spec:?}")))?;
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading report {path}"))?;
        let report: EvalReport =
            serde_json::from_str(&text).with_context(|| format!("parsing report {path}"))?;
        loaded.push((name.to_string(), report));
    }
    let rows: Vec<(String, &EvalReport)> = loaded
        .iter()
        .map(|(name, report)| (name.clone(), report))
        .collect();
    print!("{}", render_table(&rows));
    Ok(())
}

fn cmd_stats(args: &ConfigArgs) -> Result<(), CliError> {
    let run = load_run(args)?;
    let mut corpora = Vec::new();
    for split in [Split::Train, Split::Validation, Split::Test] {
        if let Some(corpus) = run.load_split(split)? {
            corpora.push(corpus);
        }
    }
    if corpora.is_empty() {
        return Err(CliError::Usage("config defines no data paths".into()));
    }
    for (split, count) in mtkit_core::corpus::split_statistics(&corpora) {
        println!("{split}\t{count}");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::TokenizerTrain(args) => cmd_tokenizer_train(args),
        Command::Train(args) => cmd_train(args),
        Command::Continue { config, checkpoint } => cmd_continue(config, checkpoint.as_ref()),
        Command::Translate {
            config,
            checkpoint,
            input,
            output,
        } => cmd_translate(config, checkpoint.as_ref(), input, output),
        Command::Evaluate {
            hyp,
            reference,
            name,
            per_sentence,
            json,
        } => cmd_evaluate(hyp, reference, name, *per_sentence, json.as_ref()),
        Command::Report { systems } => cmd_report(systems),
        Command::Stats(args) => cmd_stats(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(err)) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}
