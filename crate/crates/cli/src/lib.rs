//! The `hlm` command line.
//!
//! Every subcommand accepts `--config FILE`, a JSON object keyed by flag name
//! (`vocab_size` or `vocab-size`). Values from the file fill in any flag not
//! given on the command line. Exit status is 0 on success, 1 on a data error
//! and 2 on a usage error.

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

mod commands;
mod tasks;

pub use commands::{BuildPretrainDataArgs, FragRatioArgs, NormalizeArgs, PretrainArgs, TokenizeArgs, TrainTokenizerArgs};
pub use tasks::{EvaluateArgs, FinetuneArgs, GridSearchArgs, ModelKind, ScorePairsArgs, Task};

pub const EFFECTIVE_CONFIG: &str = "effective_config.json";

#[derive(Parser)]
#[command(name = "hlm", version, about = "Pre-train and fine-tune small BERT models for Greek")]
struct Cli {
    /// JSON file of flag values; explicit flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Normalize a raw corpus into the corpus file format.
    Normalize(NormalizeArgs),
    /// Train a BPE vocabulary.
    TrainTokenizer(TrainTokenizerArgs),
    /// Print the word pieces of every line.
    Tokenize(TokenizeArgs),
    /// Print pieces per word over a corpus.
    FragRatio(FragRatioArgs),
    /// Build masked sentence-pair instances.
    BuildPretrainData(BuildPretrainDataArgs),
    /// Pre-train with masked tokens and next-sentence prediction.
    Pretrain(PretrainArgs),
    /// Fine-tune on tagging or inference data.
    Finetune(FinetuneArgs),
    /// Fine-tune over a grid of settings and keep the lowest dev loss.
    GridSearch(GridSearchArgs),
    /// Score prediction files against gold data.
    Evaluate(EvaluateArgs),
    /// Attach pseudo-perplexities to sentence pairs.
    ScorePairs(ScorePairsArgs),
}

/// A bad invocation, as opposed to bad data.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub(crate) fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// What every command receives besides its own flags.
pub(crate) struct Invocation {
    pub seed: u64,
    /// Effective flag values, echoed into output directories.
    pub effective: Value,
}

impl Invocation {
    pub fn write_effective(&self, dir: &Path) -> anyhow::Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(EFFECTIVE_CONFIG);
        std::fs::write(&path, serde_json::to_string_pretty(&self.effective)? + "\n").with_context(|| format!("writing {}", path.display()))
    }
}

/// Runs one command; `argv` excludes the program name.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = std::iter::once(OsString::from("hlm")).chain(argv.into_iter().map(Into::into));
    let matches = match Cli::command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(&matches) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                2
            } else {
                1
            }
        }
    }
}

fn dispatch(matches: &ArgMatches) -> anyhow::Result<()> {
    let file = match matches.get_one::<PathBuf>("config") {
        Some(path) => Some(read_config(path)?),
        None => None,
    };
    let seed = match (matches.value_source("seed"), file.as_ref().and_then(|f| f.get("seed"))) {
        (Some(ValueSource::CommandLine), _) | (_, None) => *matches.get_one::<u64>("seed").expect("has default"),
        (_, Some(v)) => v.as_u64().ok_or_else(|| usage(format!("config seed must be a non-negative integer, got {v}")))?,
    };
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    macro_rules! go {
        ($args:ty, $f:path) => {{
            let args: $args = resolve(sub, file.as_ref())?;
            let mut effective = serde_json::to_value(&args)?;
            effective["command"] = Value::from(name);
            effective["seed"] = Value::from(seed);
            $f(&args, &Invocation { seed, effective })
        }};
    }
    match name {
        "normalize" => go!(NormalizeArgs, commands::normalize),
        "train-tokenizer" => go!(TrainTokenizerArgs, commands::train_tokenizer),
        "tokenize" => go!(TokenizeArgs, commands::tokenize),
        "frag-ratio" => go!(FragRatioArgs, commands::frag_ratio),
        "build-pretrain-data" => go!(BuildPretrainDataArgs, commands::build_pretrain_data),
        "pretrain" => go!(PretrainArgs, commands::pretrain),
        "finetune" => go!(FinetuneArgs, tasks::finetune_command),
        "grid-search" => go!(GridSearchArgs, tasks::grid_search_command),
        "evaluate" => go!(EvaluateArgs, tasks::evaluate),
        "score-pairs" => go!(ScorePairsArgs, tasks::score_pairs),
        other => unreachable!("clap accepted unknown subcommand {other}"),
    }
}

fn read_config(path: &Path) -> anyhow::Result<Map<String, Value>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    match serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))? {
        Value::Object(map) => Ok(map),
        _ => Err(usage(format!("{}: config must be a JSON object", path.display()))),
    }
}

/// Parses a command's flags, then fills every flag not given on the command
/// line from the config file.
fn resolve<A>(matches: &ArgMatches, file: Option<&Map<String, Value>>) -> anyhow::Result<A>
where
    A: Args + FromArgMatches + Serialize + DeserializeOwned,
{
    let parsed = A::from_arg_matches(matches).map_err(|e| usage(e.to_string()))?;
    let Some(file) = file else { return Ok(parsed) };
    let mut value = serde_json::to_value(&parsed)?;
    let fields = value.as_object_mut().expect("arguments serialize as an object");
    for (key, v) in file {
        let key = key.replace('-', "_");
        if key == "seed" || key == "config" {
            continue;
        }
        if !fields.contains_key(&key) {
            return Err(usage(format!("config key {key:?} is not a flag of this command")));
        }
        if matches.value_source(&key) != Some(ValueSource::CommandLine) {
            fields.insert(key, v.clone());
        }
    }
    serde_json::from_value(value).map_err(|e| usage(format!("config: {e}")))
}
