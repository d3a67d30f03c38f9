use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, ValueEnum};
use hlm_core::baselines::{baseline_words, prepare_nli_dataset, prepare_tagging_dataset, BilstmConfig, CharVocab, DamConfig, WordVectors};
use hlm_core::bert::BertConfig;
use hlm_core::denoiser::{pseudo_perplexity, select_top_fraction, BertMlm, ScoringMode};
use hlm_core::finetune::{
    align_dataset, encode_pairs, encoder_params, read_conll, read_nli_jsonl, validate_bio2_data, write_conll, write_nli_jsonl, LabelSet, NliLabel,
    NliPair, PairClassifierConfig, TaggedSentence, TaggerConfig,
};
use hlm_core::metrics::{accuracy, entity_micro_f1, per_class_f1, token_accuracy, ClassScore};
use hlm_core::textnorm::NormalizationConfig;
use hlm_core::trainer::{checkpoint_config, fit, grid_search, grid_value, Checkpoint, FitConfig, FitResult, GridSpec, RunReport, TrainError};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::commands::load_vocab;
use crate::{usage, Invocation};

#[derive(ValueEnum, Serialize, Deserialize, Debug, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Pos,
    Ner,
    Nli,
}

#[derive(ValueEnum, Serialize, Deserialize, Debug, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Bert,
    BilstmCnnCrf,
    Dam,
}

#[derive(Args, Serialize, Deserialize, Debug, Clone)]
pub struct FinetuneArgs {
    #[arg(long, value_enum)]
    pub task: Task,
    #[arg(long, value_enum, default_value_t = ModelKind::Bert)]
    pub model: ModelKind,
    /// Pre-trained checkpoint (bert only).
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Vocabulary the checkpoint was trained with (bert only).
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Word vectors in text format (baselines only); random vectors when absent.
    #[arg(long)]
    pub vectors: Option<PathBuf>,
    /// Size of the random word vectors used without --vectors.
    #[arg(long, default_value_t = 50)]
    pub word_dim: usize,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub dev: PathBuf,
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Output directory for model.hlm, metrics.json and test predictions.
    #[arg(long)]
    pub out: PathBuf,
    /// Decode the bert tagger with a CRF.
    #[arg(long, default_value_t = false)]
    pub crf: bool,
    #[arg(long, default_value_t = 5e-5)]
    pub lr: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    /// Overrides the checkpoint's dropout; baselines default to 0.
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Evaluations without improvement before stopping.
    #[arg(long, default_value_t = 3)]
    pub patience: usize,
    /// Optional cap on epochs.
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Baseline hidden size; 100 for bilstm-cnn-crf, 200 for dam.
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
}

struct Trained {
    checkpoint: Checkpoint,
    fit: FitResult,
    dev_metric: f64,
    test: Option<(f64, Predictions)>,
}

enum Predictions {
    Tags(Vec<TaggedSentence>),
    Pairs(Vec<NliPair>),
}

fn metric_name(task: Task) -> &'static str {
    match task {
        Task::Pos | Task::Nli => "accuracy",
        Task::Ner => "entity_micro_f1",
    }
}

fn read_tagged(path: &Path, task: Task) -> anyhow::Result<Vec<TaggedSentence>> {
    let data = read_conll(path).with_context(|| format!("reading {}", path.display()))?;
    if task == Task::Ner {
        validate_bio2_data(&data, None).with_context(|| format!("{}", path.display()))?;
    }
    Ok(data)
}

fn read_pairs(path: &Path) -> anyhow::Result<Vec<NliPair>> {
    read_nli_jsonl(path).with_context(|| format!("reading {}", path.display()))
}

fn tag_metric(task: Task, gold: &[TaggedSentence], pred: &[Vec<String>]) -> anyhow::Result<f64> {
    let gold: Vec<Vec<String>> = gold.iter().map(|s| s.labels.clone()).collect();
    Ok(match task {
        Task::Ner => entity_micro_f1(&gold, pred)?.f1,
        _ => token_accuracy(&gold, pred)?,
    })
}

/// Label strings for every word; words cut to fit the model get `fill`.
fn label_words(ids: &[Vec<usize>], words: &[usize], labels: &LabelSet, fill: &str) -> Vec<Vec<String>> {
    ids.iter()
        .zip(words)
        .map(|(s, &n)| {
            let mut out: Vec<String> = s.iter().map(|&i| labels.label(i).to_string()).collect();
            out.resize(n, fill.to_string());
            out
        })
        .collect()
}

fn fill_label(task: Task) -> &'static str {
    if task == Task::Ner {
        "O"
    } else {
        "X"
    }
}

fn with_labels(sentences: &[TaggedSentence], labels: Vec<Vec<String>>) -> anyhow::Result<Vec<TaggedSentence>> {
    sentences
        .iter()
        .zip(labels)
        .map(|(s, l)| Ok(TaggedSentence::new(s.words.clone(), l)?))
        .collect()
}

fn fit_config(args: &FinetuneArgs, seed: u64) -> FitConfig {
    FitConfig {
        lr: args.lr,
        batch_size: args.batch_size,
        patience: args.patience,
        max_epochs: args.max_epochs,
        seed,
        clip_norm: args.clip_norm,
    }
}

fn label_set(sets: &[&[TaggedSentence]]) -> anyhow::Result<LabelSet> {
    let all: Vec<TaggedSentence> = sets.iter().flat_map(|s| s.iter().cloned()).collect();
    Ok(LabelSet::from_sentences(&all)?)
}

fn bert_inputs(args: &FinetuneArgs) -> anyhow::Result<(Checkpoint, BertConfig, hlm_core::tokenizer::Vocabulary)> {
    let (Some(ckpt), Some(vocab)) = (&args.ckpt, &args.vocab) else {
        return Err(usage("--model bert needs --ckpt and --vocab"));
    };
    let checkpoint = Checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let mut bert = checkpoint.bert_config()?;
    if let Some(d) = args.dropout {
        bert.dropout = d;
    }
    let vocab = load_vocab(vocab)?;
    if vocab.len() != bert.vocab_size {
        anyhow::bail!("vocabulary has {} tokens but the checkpoint expects {}", vocab.len(), bert.vocab_size);
    }
    Ok((checkpoint, bert, vocab))
}

/// Vectors from `--vectors`, or seeded random ones over every word in `words`.
fn word_vectors<'a>(args: &FinetuneArgs, seed: u64, words: impl Iterator<Item = &'a str>) -> anyhow::Result<WordVectors> {
    match &args.vectors {
        Some(path) => Ok(WordVectors::load(path)?.normalized(&NormalizationConfig::default())),
        None => {
            let vocab: BTreeSet<String> = words.flat_map(baseline_words).collect();
            Ok(WordVectors::random(vocab.iter().map(String::as_str), args.word_dim, seed))
        }
    }
}

fn bert_tagger(args: &FinetuneArgs, seed: u64) -> anyhow::Result<Trained> {
    let (checkpoint, bert, vocab) = bert_inputs(args)?;
    let train = read_tagged(&args.train, args.task)?;
    let dev = read_tagged(&args.dev, args.task)?;
    let test = args.test.as_deref().map(|p| read_tagged(p, args.task)).transpose()?;
    let labels = label_set(&[&train, &dev, test.as_deref().unwrap_or(&[])])?;
    let max = bert.max_positions;
    let train_a = align_dataset(&train, &vocab, &labels, max)?;
    let dev_a = align_dataset(&dev, &vocab, &labels, max)?;
    let tagger = TaggerConfig {
        bert,
        num_labels: labels.len(),
        crf: args.crf,
    };
    let mut init = encoder_params(&checkpoint.params, false);
    tagger.init_head(&mut init, seed);
    let fit = fit(
        init,
        &train_a,
        |g, p, b| Ok(tagger.loss(g, p, b)?),
        |s| Ok(tagger.dataset_loss(s, &dev_a)?),
        &fit_config(args, seed),
    )?;
    let score = |data: &[TaggedSentence]| -> anyhow::Result<(f64, Vec<TaggedSentence>)> {
        let aligned = align_dataset(data, &vocab, &labels, max)?;
        let dropped: usize = aligned.iter().map(|a| a.dropped_words).sum();
        if dropped > 0 {
            eprintln!("warning: {dropped} words did not fit in {max} positions and were labelled {}", fill_label(args.task));
        }
        let ids = tagger.predict(&fit.params, &aligned)?;
        let lens: Vec<usize> = data.iter().map(TaggedSentence::len).collect();
        let pred = label_words(&ids, &lens, &labels, fill_label(args.task));
        Ok((tag_metric(args.task, data, &pred)?, with_labels(data, pred)?))
    };
    let dev_metric = score(&dev)?.0;
    let test = test.map(|t| score(&t)).transpose()?.map(|(m, p)| (m, Predictions::Tags(p)));
    let config = checkpoint_config(&tagger.bert, json!({ "task": args.task, "head": tagger, "labels": labels }));
    Ok(Trained {
        checkpoint: Checkpoint::new(config, fit.params.clone()),
        fit,
        dev_metric,
        test,
    })
}

fn bilstm_tagger(args: &FinetuneArgs, seed: u64) -> anyhow::Result<Trained> {
    let train = read_tagged(&args.train, args.task)?;
    let dev = read_tagged(&args.dev, args.task)?;
    let test = args.test.as_deref().map(|p| read_tagged(p, args.task)).transpose()?;
    let labels = label_set(&[&train, &dev, test.as_deref().unwrap_or(&[])])?;
    let all = [&train, &dev].into_iter().chain(test.as_ref()).flat_map(|d| d.iter().flat_map(|s| s.words.iter().map(String::as_str)));
    let vectors = word_vectors(args, seed, all)?;
    let chars = CharVocab::from_words(train.iter().flat_map(|s| s.words.iter()).flat_map(|w| baseline_words(w)).collect::<Vec<_>>().iter().map(String::as_str));
    let defaults = BilstmConfig::new(vectors.dim(), chars.len(), labels.len());
    let model = BilstmConfig {
        hidden: args.hidden.unwrap_or(defaults.hidden),
        dropout: args.dropout.unwrap_or(defaults.dropout),
        ..defaults
    };
    let train_x = prepare_tagging_dataset(&train, &vectors, &chars, &labels)?;
    let dev_x = prepare_tagging_dataset(&dev, &vectors, &chars, &labels)?;
    let init = model.init(seed)?;
    let fit = fit(
        init,
        &train_x,
        |g, p, b| Ok(model.loss(g, p, b)?),
        |s| Ok(model.dataset_loss(s, &dev_x)?),
        &fit_config(args, seed),
    )?;
    let score = |data: &[TaggedSentence]| -> anyhow::Result<(f64, Vec<TaggedSentence>)> {
        let x = prepare_tagging_dataset(data, &vectors, &chars, &labels)?;
        let ids = model.predict(&fit.params, &x)?;
        let lens: Vec<usize> = data.iter().map(TaggedSentence::len).collect();
        let pred = label_words(&ids, &lens, &labels, fill_label(args.task));
        Ok((tag_metric(args.task, data, &pred)?, with_labels(data, pred)?))
    };
    let dev_metric = score(&dev)?.0;
    let test = test.map(|t| score(&t)).transpose()?.map(|(m, p)| (m, Predictions::Tags(p)));
    if args.vectors.is_none() {
        vectors.save(&args.out.join("vectors.vec"))?;
    }
    let config = json!({ "task": args.task, "model": model, "labels": labels, "chars": chars });
    Ok(Trained {
        checkpoint: Checkpoint::new(config, fit.params.clone()),
        fit,
        dev_metric,
        test,
    })
}

fn predicted_pairs(data: &[NliPair], classes: &[usize]) -> Vec<NliPair> {
    data.iter()
        .zip(classes)
        .map(|(p, &c)| NliPair {
            label: NliLabel::from_class(c).expect("three classes"),
            ..p.clone()
        })
        .collect()
}

fn nli_accuracy(gold: &[NliPair], pred: &[usize]) -> anyhow::Result<f64> {
    let gold: Vec<usize> = gold.iter().map(|p| p.label.class()).collect();
    Ok(accuracy(&gold, pred)?)
}

fn bert_pairs(args: &FinetuneArgs, seed: u64) -> anyhow::Result<Trained> {
    let (checkpoint, bert, vocab) = bert_inputs(args)?;
    let train = read_pairs(&args.train)?;
    let dev = read_pairs(&args.dev)?;
    let test = args.test.as_deref().map(read_pairs).transpose()?;
    let max = bert.max_positions;
    let train_x = encode_pairs(&train, &vocab, max)?;
    let dev_x = encode_pairs(&dev, &vocab, max)?;
    let head = PairClassifierConfig::nli(bert);
    let mut init = encoder_params(&checkpoint.params, true);
    head.init_head(&mut init, seed);
    let fit = fit(
        init,
        &train_x,
        |g, p, b| Ok(head.loss(g, p, b)?),
        |s| Ok(head.dataset_loss(s, &dev_x)?),
        &fit_config(args, seed),
    )?;
    let score = |data: &[NliPair]| -> anyhow::Result<(f64, Vec<NliPair>)> {
        let pred = head.predict(&fit.params, &encode_pairs(data, &vocab, max)?)?;
        Ok((nli_accuracy(data, &pred)?, predicted_pairs(data, &pred)))
    };
    let dev_metric = score(&dev)?.0;
    let test = test.map(|t| score(&t)).transpose()?.map(|(m, p)| (m, Predictions::Pairs(p)));
    let config = checkpoint_config(&head.bert, json!({ "task": args.task, "head": head }));
    Ok(Trained {
        checkpoint: Checkpoint::new(config, fit.params.clone()),
        fit,
        dev_metric,
        test,
    })
}

fn dam_pairs(args: &FinetuneArgs, seed: u64) -> anyhow::Result<Trained> {
    let train = read_pairs(&args.train)?;
    let dev = read_pairs(&args.dev)?;
    let test = args.test.as_deref().map(read_pairs).transpose()?;
    let all = [&train, &dev]
        .into_iter()
        .chain(test.as_ref())
        .flat_map(|d| d.iter().flat_map(|p| [p.premise.as_str(), p.hypothesis.as_str()]));
    let vectors = word_vectors(args, seed, all)?;
    let defaults = DamConfig::new(vectors.dim());
    let model = DamConfig {
        hidden: args.hidden.unwrap_or(defaults.hidden),
        dropout: args.dropout.unwrap_or(defaults.dropout),
        ..defaults
    };
    let train_x = prepare_nli_dataset(&train, &vectors)?;
    let dev_x = prepare_nli_dataset(&dev, &vectors)?;
    let fit = fit(
        model.init(seed)?,
        &train_x,
        |g, p, b| Ok(model.loss(g, p, b)?),
        |s| Ok(model.dataset_loss(s, &dev_x)?),
        &fit_config(args, seed),
    )?;
    let score = |data: &[NliPair]| -> anyhow::Result<(f64, Vec<NliPair>)> {
        let pred = model.predict(&fit.params, &prepare_nli_dataset(data, &vectors)?)?;
        Ok((nli_accuracy(data, &pred)?, predicted_pairs(data, &pred)))
    };
    let dev_metric = score(&dev)?.0;
    let test = test.map(|t| score(&t)).transpose()?.map(|(m, p)| (m, Predictions::Pairs(p)));
    if args.vectors.is_none() {
        vectors.save(&args.out.join("vectors.vec"))?;
    }
    let config = json!({ "task": args.task, "model": model });
    Ok(Trained {
        checkpoint: Checkpoint::new(config, fit.params.clone()),
        fit,
        dev_metric,
        test,
    })
}

/// Trains, writes every artifact into `args.out` and returns the best dev loss.
fn finetune(args: &FinetuneArgs, inv: &Invocation) -> anyhow::Result<f64> {
    let trained = match (args.task, args.model) {
        (Task::Pos | Task::Ner, ModelKind::Bert) => {
            inv.write_effective(&args.out)?;
            bert_tagger(args, inv.seed)?
        }
        (Task::Pos | Task::Ner, ModelKind::BilstmCnnCrf) => {
            inv.write_effective(&args.out)?;
            bilstm_tagger(args, inv.seed)?
        }
        (Task::Nli, ModelKind::Bert) => {
            inv.write_effective(&args.out)?;
            bert_pairs(args, inv.seed)?
        }
        (Task::Nli, ModelKind::Dam) => {
            inv.write_effective(&args.out)?;
            dam_pairs(args, inv.seed)?
        }
        (task, model) => {
            return Err(usage(format!(
                "--model {} does not handle --task {}",
                model.to_possible_value().expect("not skipped").get_name(),
                task.to_possible_value().expect("not skipped").get_name()
            )))
        }
    };
    trained.checkpoint.save(&args.out.join("model.hlm"))?;
    let test_metric = match &trained.test {
        Some((m, Predictions::Tags(p))) => {
            write_conll(p, &args.out.join("test.pred.conll"))?;
            Some(*m)
        }
        Some((m, Predictions::Pairs(p))) => {
            write_nli_jsonl(p, &args.out.join("test.pred.jsonl"))?;
            Some(*m)
        }
        None => None,
    };
    let metrics = json!({
        "metric": metric_name(args.task),
        "dev": trained.dev_metric,
        "test": test_metric,
        "dev_losses": trained.fit.dev_losses,
        "best_epoch": trained.fit.best_epoch,
        "best_dev_loss": trained.fit.best_dev_loss,
        "steps": trained.fit.steps,
    });
    fs::write(args.out.join("metrics.json"), serde_json::to_string_pretty(&metrics)? + "\n")?;
    println!(
        "best epoch {} of {}, dev loss {:.4}, dev {} {:.4}{}",
        trained.fit.best_epoch,
        trained.fit.dev_losses.len(),
        trained.fit.best_dev_loss,
        metric_name(args.task),
        trained.dev_metric,
        test_metric.map(|m| format!(", test {m:.4}")).unwrap_or_default()
    );
    Ok(trained.fit.best_dev_loss)
}

pub(crate) fn finetune_command(args: &FinetuneArgs, inv: &Invocation) -> anyhow::Result<()> {
    finetune(args, inv).map(|_| ())
}

#[derive(Args, Serialize, Deserialize, Debug, Clone)]
pub struct GridSearchArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub finetune: FinetuneArgs,
    /// JSON object mapping lr, batch_size or dropout to lists of values.
    #[arg(long)]
    pub grid: PathBuf,
}

const GRID_AXES: [&str; 3] = ["lr", "batch_size", "dropout"];

pub(crate) fn grid_search_command(args: &GridSearchArgs, inv: &Invocation) -> anyhow::Result<()> {
    let text = fs::read_to_string(&args.grid).with_context(|| format!("reading {}", args.grid.display()))?;
    let grid: serde_json::Map<String, Value> = serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", args.grid.display())))?;
    let mut axes: Vec<(String, Vec<f64>)> = Vec::new();
    for (name, values) in &grid {
        if !GRID_AXES.contains(&name.as_str()) {
            return Err(usage(format!("grid axis {name:?} is not one of {GRID_AXES:?}")));
        }
        let values: Vec<f64> = values
            .as_array()
            .and_then(|a| a.iter().map(Value::as_f64).collect())
            .filter(|v: &Vec<f64>| !v.is_empty())
            .ok_or_else(|| usage(format!("grid axis {name:?} must be a non-empty list of numbers")))?;
        axes.push((name.clone(), values));
    }
    let refs: Vec<(&str, &[f64])> = axes.iter().map(|(n, v)| (n.as_str(), v.as_slice())).collect();
    let spec = GridSpec::new(&refs);
    inv.write_effective(&args.finetune.out)?;
    let mut index = 0;
    let result = grid_search(&spec, |point| {
        index += 1;
        let mut run = args.finetune.clone();
        run.out = args.finetune.out.join(format!("point-{index}"));
        if let Some(lr) = grid_value(point, "lr") {
            run.lr = lr;
        }
        if let Some(b) = grid_value(point, "batch_size") {
            run.batch_size = b as usize;
        }
        if let Some(d) = grid_value(point, "dropout") {
            run.dropout = Some(d);
        }
        let mut effective = serde_json::to_value(&run).map_err(|e| TrainError::Config(e.to_string()))?;
        effective["command"] = Value::from("finetune");
        effective["seed"] = Value::from(inv.seed);
        let point_inv = Invocation { seed: inv.seed, effective };
        finetune(&run, &point_inv).map_err(|e| TrainError::Config(format!("{e:#}")))
    })?;
    let report = json!({
        "best_index": result.best_index,
        "best_point": result.best_point,
        "best_dev_loss": result.best_dev_loss,
        "best_dir": format!("point-{}", result.best_index + 1),
        "table": result.table,
    });
    fs::write(args.finetune.out.join("grid.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    println!("best point {:?} (point-{}), dev loss {:.4}", result.best_point, result.best_index + 1, result.best_dev_loss);
    Ok(())
}

#[derive(Args, Serialize, Deserialize, Debug, Clone)]
pub struct EvaluateArgs {
    #[arg(long, value_enum)]
    pub task: Task,
    #[arg(long)]
    pub gold: PathBuf,
    /// One or more prediction files; several give a mean and deviation.
    #[arg(long, required = true, num_args = 1..)]
    pub pred: Vec<PathBuf>,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Serialize)]
struct Evaluation {
    pred: String,
    value: f64,
    per_class: Vec<ClassScore>,
}

fn evaluate_tags(task: Task, gold: &[TaggedSentence], pred_path: &Path) -> anyhow::Result<(f64, Vec<ClassScore>)> {
    let pred = read_conll(pred_path).with_context(|| format!("reading {}", pred_path.display()))?;
    if pred.len() != gold.len() {
        anyhow::bail!("{}: {} sentences, gold has {}", pred_path.display(), pred.len(), gold.len());
    }
    for (i, (g, p)) in gold.iter().zip(&pred).enumerate() {
        if g.words != p.words {
            anyhow::bail!("{}: sentence {} has different words from gold", pred_path.display(), i + 1);
        }
    }
    let labels: Vec<Vec<String>> = pred.iter().map(|s| s.labels.clone()).collect();
    let value = tag_metric(task, gold, &labels)?;
    let per_class = if task == Task::Ner {
        let g: Vec<Vec<String>> = gold.iter().map(|s| s.labels.clone()).collect();
        entity_micro_f1(&g, &labels)?.per_type
    } else {
        let g: Vec<&str> = gold.iter().flat_map(|s| s.labels.iter().map(String::as_str)).collect();
        let p: Vec<&str> = labels.iter().flatten().map(String::as_str).collect();
        let classes: Vec<&str> = g.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        per_class_f1(&g, &p, &classes)?
    };
    Ok((value, per_class))
}

fn evaluate_pairs(gold: &[NliPair], pred_path: &Path) -> anyhow::Result<(f64, Vec<ClassScore>)> {
    let pred = read_pairs(pred_path)?;
    if pred.len() != gold.len() {
        anyhow::bail!("{}: {} pairs, gold has {}", pred_path.display(), pred.len(), gold.len());
    }
    let g: Vec<&str> = gold.iter().map(|p| p.label.as_str()).collect();
    let p: Vec<&str> = pred.iter().map(|p| p.label.as_str()).collect();
    let classes: Vec<&str> = NliLabel::ALL.iter().map(|l| l.as_str()).collect();
    Ok((accuracy(&g, &p)?, per_class_f1(&g, &p, &classes)?))
}

pub(crate) fn evaluate(args: &EvaluateArgs, _: &Invocation) -> anyhow::Result<()> {
    let mut runs = Vec::new();
    match args.task {
        Task::Pos | Task::Ner => {
            let gold = read_tagged(&args.gold, args.task)?;
            for p in &args.pred {
                let (value, per_class) = evaluate_tags(args.task, &gold, p)?;
                runs.push(Evaluation { pred: p.display().to_string(), value, per_class });
            }
        }
        Task::Nli => {
            let gold = read_pairs(&args.gold)?;
            for p in &args.pred {
                let (value, per_class) = evaluate_pairs(&gold, p)?;
                runs.push(Evaluation { pred: p.display().to_string(), value, per_class });
            }
        }
    }
    let summary = if runs.len() > 1 {
        let seeds = (0..runs.len() as u64).collect();
        Some(RunReport::from_values(seeds, runs.iter().map(|r| r.value).collect())?)
    } else {
        None
    };
    let report = json!({
        "task": args.task,
        "metric": metric_name(args.task),
        "value": runs[0].value,
        "per_class": runs[0].per_class,
        "runs": runs,
        "summary": summary,
    });
    if let Some(dir) = args.report.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&args.report, serde_json::to_string_pretty(&report)? + "\n").with_context(|| format!("writing {}", args.report.display()))?;
    match &summary {
        Some(s) => println!("{} {:.4} ± {:.4} over {} runs", metric_name(args.task), s.mean, s.std, s.n),
        None => println!("{} {:.4}", metric_name(args.task), runs[0].value),
    }
    Ok(())
}

#[derive(ValueEnum, Serialize, Deserialize, Debug, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Batched,
    Sequential,
}

#[derive(Args, Serialize, Deserialize, Debug, Clone)]
pub struct ScorePairsArgs {
    /// Pre-trained checkpoint with its masked-token head.
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// JSONL records with "premise" and "hypothesis" strings.
    #[arg(long = "in", id = "in")]
    #[serde(rename = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Keep only this fraction of records, lowest perplexity first.
    #[arg(long)]
    pub keep_fraction: Option<f64>,
    #[arg(long, value_enum, default_value_t = Mode::Batched)]
    pub mode: Mode,
}

pub(crate) fn score_pairs(args: &ScorePairsArgs, _: &Invocation) -> anyhow::Result<()> {
    if let Some(f) = args.keep_fraction {
        if !(f > 0.0 && f <= 1.0) {
            return Err(usage(format!("--keep-fraction {f} is outside (0, 1]")));
        }
    }
    let checkpoint = Checkpoint::load(&args.ckpt).with_context(|| format!("loading {}", args.ckpt.display()))?;
    let config = checkpoint.bert_config()?;
    let vocab = load_vocab(&args.vocab)?;
    let model = BertMlm { config, params: &checkpoint.params };
    let mode = match args.mode {
        Mode::Batched => ScoringMode::Batched,
        Mode::Sequential => ScoringMode::Sequential,
    };
    let text = fs::read_to_string(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let mut records = Vec::new();
    let mut scored = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let at = || format!("{}:{}", args.input.display(), i + 1);
        let mut record: serde_json::Map<String, Value> = serde_json::from_str(line).with_context(at)?;
        let field = |k: &str| record.get(k).and_then(Value::as_str).map(str::to_string).ok_or_else(|| anyhow::anyhow!("{}: missing string field {k:?}", at()));
        let pair = NliPair {
            premise: field("premise")?,
            hypothesis: field("hypothesis")?,
            label: record.get("label").and_then(Value::as_str).and_then(NliLabel::parse).unwrap_or(NliLabel::Neutral),
        };
        let s = pseudo_perplexity(&pair, &model, &vocab, config.max_positions, mode).with_context(at)?;
        record.insert("ppl".into(), json!(s.ppl));
        record.insert("token_count".into(), json!(s.token_count));
        records.push(record);
        scored.push(s);
    }
    let keep: Vec<usize> = match args.keep_fraction {
        Some(f) => {
            let selection = select_top_fraction(&scored, f)?;
            println!("{}", serde_json::to_string(&selection.report)?);
            let mut idx = selection.indices;
            idx.sort_unstable();
            idx
        }
        None => (0..records.len()).collect(),
    };
    let mut out = String::new();
    for i in keep {
        out.push_str(&serde_json::to_string(&records[i])?);
        out.push('\n');
    }
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&args.out, out).with_context(|| format!("writing {}", args.out.display()))?;
    if args.keep_fraction.is_none() {
        println!("{} pairs scored", records.len());
    }
    Ok(())
}
