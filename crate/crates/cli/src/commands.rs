use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use hlm_core::bert::{init_weights, BertConfig};
use hlm_core::pretrain_data::{build_sentence_pairs, mask_instances, read_instances, write_instances, MaskingPolicy, PairConfig};
use hlm_core::textnorm::{segment_corpus, serialize_corpus, Document, NormalizationConfig, UnicodeForm};
use hlm_core::tokenizer::{fragmentation_ratio, train_bpe, TrainerConfig, Vocabulary};
use hlm_core::trainer::{pretrain as run_pretrain, PretrainConfig};
use serde::{Deserialize, Serialize};

use crate::{usage, Invocation};

fn normalizer(keep_case: bool, keep_accents: bool) -> NormalizationConfig {
    NormalizationConfig {
        strip_diacritics: !keep_accents,
        lowercase: !keep_case,
        unicode_form: UnicodeForm::Composed,
    }
}

pub(crate) fn read_corpus(path: &Path, config: &NormalizationConfig) -> anyhow::Result<Vec<Document>> {
    let raw = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    segment_corpus(&raw, config).with_context(|| format!("{}", path.display()))
}

pub(crate) fn load_vocab(path: &Path) -> anyhow::Result<Vocabulary> {
    Vocabulary::load(path).with_context(|| format!("loading vocabulary {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[derive(Args, Serialize, Deserialize, Debug, Clone)]
pub struct NormalizeArgs {
    /// Raw UTF-8 text, one sentence per line, blank lines between documents.
    #[arg(long = "in", id = "in")]
    #[serde(rename = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Keep upper case.
    #[arg(long, default_value_t = false)]
    pub keep_case: bool,
    /// Keep accents and other combining marks.
    #[arg(long, default_value_t = false)]
    pub keep_accents: bool,
}

pub(crate) fn normalize(args: &NormalizeArgs, _: &Invocation) -> anyhow::Result<()> {
    let docs = read_corpus(&args.input, &normalizer(args.keep_case, args.keep_accents))?;
    write_text(&args.out, &serialize_corpus(&docs))?;
    let sentences: usize = docs.iter().map(|d| d.sentences.len()).sum();
    println!("{} documents, {sentences} sentences", docs.len());
    Ok(())
}

#[derive(Args, Serialize, Deserialize, Debug, Clone)]
pub struct TrainTokenizerArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Target vocabulary size, special tokens included.
    #[arg(long)]
    pub vocab_size: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Characters rarer than this are left out of the base alphabet.
    #[arg(long, default_value_t = 1)]
    pub min_char_freq: u64,
    #[arg(long, default_value_t = false)]
    pub keep_case: bool,
    #[arg(long, default_value_t = false)]
    pub keep_accents: bool,
}

pub(crate) fn train_tokenizer(args: &TrainTokenizerArgs, _: &Invocation) -> anyhow::Result<()> {
    let norm = normalizer(args.keep_case, args.keep_accents);
    let docs = read_corpus(&args.corpus, &norm)?;
    let config = TrainerConfig {
        vocab_size: args.vocab_size,
        min_char_freq: args.min_char_freq,
    };
    let vocab = train_bpe(&docs, &config, norm)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    vocab.save(&args.out).with_context(|| format!("writing {}", args.out.display()))?;
    println!("{} tokens, {} merges", vocab.len(), vocab.merges().len());
    Ok(())
}

#[derive(Args, Serialize, Deserialize, Debug, Clone)]
pub struct TokenizeArgs {
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long = "in", id = "in")]
    #[serde(rename = "in")]
    pub input: PathBuf,
    /// Write here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print token ids instead of pieces.
    #[arg(long, default_value_t = false)]
    pub ids: bool,
}

pub(crate) fn tokenize(args: &TokenizeArgs, _: &Invocation) -> anyhow::Result<()> {
    let vocab = load_vocab(&args.vocab)?;
    let text = fs::read_to_string(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let mut out = String::new();
    for line in text.lines() {
        let seq = vocab.encode(line);
        let fields: Vec<String> = if args.ids {
            seq.ids.iter().map(u32::to_string).collect()
        } else {
            seq.pieces
        };
        out.push_str(&fields.join(" "));
        out.push('\n');
    }
    match &args.out {
        Some(path) => write_text(path, &out),
        None => Ok(std::io::stdout().lock().write_all(out.as_bytes())?),
    }
}

#[derive(Args, Serialize, Deserialize, Debug, Clone)]
pub struct FragRatioArgs {
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
}

pub(crate) fn frag_ratio(args: &FragRatioArgs, _: &Invocation) -> anyhow::Result<()> {
    let vocab = load_vocab(&args.vocab)?;
    let docs = read_corpus(&args.corpus, vocab.normalizer())?;
    let ratio = fragmentation_ratio(&docs, &vocab)?;
    println!("{}", ratio.value());
    eprintln!("{} pieces over {} words", ratio.pieces, ratio.words);
    Ok(())
}

#[derive(Args, Serialize, Deserialize, Debug, Clone)]
pub struct BuildPretrainDataArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Sequence length including [CLS] and both [SEP] tokens.
    #[arg(long, default_value_t = 128)]
    pub max_len: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Probability of pairing a sentence with one from another document.
    #[arg(long, default_value_t = 0.5)]
    pub negative_prob: f64,
    /// Independently masked copies of every pair.
    #[arg(long, default_value_t = 1)]
    pub copies: u64,
}

pub(crate) fn build_pretrain_data(args: &BuildPretrainDataArgs, inv: &Invocation) -> anyhow::Result<()> {
    if args.copies == 0 {
        return Err(usage("--copies must be positive"));
    }
    let vocab = load_vocab(&args.vocab)?;
    let docs = read_corpus(&args.corpus, vocab.normalizer())?;
    let pairs = build_sentence_pairs(
        &docs,
        &vocab,
        &PairConfig {
            max_len: args.max_len,
            negative_prob: args.negative_prob,
            seed: inv.seed,
        },
    )?;
    let mut instances = Vec::with_capacity(pairs.len() * args.copies as usize);
    for copy in 0..args.copies {
        let policy = MaskingPolicy {
            rng_seed: inv.seed.wrapping_add(1 + copy),
            ..MaskingPolicy::default()
        };
        instances.extend(mask_instances(&pairs, &policy, vocab.len())?);
    }
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_instances(&instances, &args.out)?;
    println!("{} instances", instances.len());
    Ok(())
}

#[derive(Args, Serialize, Deserialize, Debug, Clone)]
pub struct PretrainArgs {
    /// Instances from build-pretrain-data.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Output directory for model.hlm, loss.csv and the effective config.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 256)]
    pub intermediate: usize,
    #[arg(long, default_value_t = 128)]
    pub max_positions: usize,
    #[arg(long, default_value_t = 0.1)]
    pub dropout: f64,
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    /// Also write step-N.hlm every this many steps.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Clip the global gradient norm to this value.
    #[arg(long)]
    pub clip_norm: Option<f64>,
}

pub(crate) fn pretrain(args: &PretrainArgs, inv: &Invocation) -> anyhow::Result<()> {
    let vocab = load_vocab(&args.vocab)?;
    let data = read_instances(&args.data).with_context(|| format!("reading {}", args.data.display()))?;
    let model = BertConfig {
        layers: args.layers,
        hidden: args.hidden,
        heads: args.heads,
        intermediate: args.intermediate,
        max_positions: args.max_positions,
        vocab_size: vocab.len(),
        dropout: args.dropout,
        type_vocab: 2,
    };
    let init = init_weights(&model, inv.seed).map_err(|e| usage(e.to_string()))?;
    if let Some((i, _)) = data.iter().enumerate().find(|(_, d)| d.validate(model.max_positions).is_err() || d.ids.iter().any(|&t| t as usize >= model.vocab_size)) {
        anyhow::bail!("{}: instance {} does not fit the model or vocabulary", args.data.display(), i + 1);
    }
    inv.write_effective(&args.out)?;
    let config = PretrainConfig {
        steps: args.steps,
        batch_size: args.batch_size,
        lr: args.lr,
        seed: inv.seed,
        checkpoint_every: args.checkpoint_every,
        clip_norm: args.clip_norm,
    };
    let run = run_pretrain(&data, &model, init, &config, Some(&args.out))?;
    if let Some((step, loss)) = run.loss_curve.last() {
        println!("step {step}: loss {loss:.4}");
    }
    Ok(())
}
