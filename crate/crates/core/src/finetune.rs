//! Task heads and data handling for token classification (part-of-speech
//! tagging, named entities) and three-way sentence-pair classification.
//!
//! Tagging labels sit on the first sub-token of every word; continuation
//! pieces and the `[CLS]`/`[SEP]` positions carry no loss. A tagger can
//! decode greedily per word or, with `crf` set, by Viterbi over per-word
//! emissions. The pair classifier reads the pooled `[CLS]` state of
//! `[CLS] premise [SEP] hypothesis [SEP]`.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, ParamStore, Params, Real, Tensor, Var};
use crate::bert::{self, argmax, BertConfig, BertError, SeqInput, INIT_STD};
use crate::crf::{self, CrfError};
use crate::metrics;
use crate::pretrain_data::truncate_pair;
use crate::textnorm::normalize;
use crate::tokenizer::{Vocabulary, CLS_ID, SEP_ID, UNK_ID};
use crate::trainer::TrainError;

pub const UPOS_TAGS: [&str; 17] = [
    "ADJ", "ADP", "ADV", "AUX", "CCONJ", "DET", "INTJ", "NOUN", "NUM", "PART", "PRON", "PROPN", "PUNCT", "SCONJ", "SYM", "VERB", "X",
];
pub const ENTITY_TYPES: [&str; 3] = ["PER", "LOC", "ORG"];

#[derive(Debug, Error)]
pub enum FinetuneError {
    #[error("{record}: {msg}")]
    Data { record: String, msg: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] BertError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Crf(#[from] CrfError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<FinetuneError> for TrainError {
    fn from(e: FinetuneError) -> Self {
        match e {
            FinetuneError::Config(m) => TrainError::Config(m),
            FinetuneError::Io(e) => TrainError::Io(e),
            other => TrainError::Model(other.to_string()),
        }
    }
}

fn data_error(record: impl Into<String>, msg: impl Into<String>) -> FinetuneError {
    FinetuneError::Data {
        record: record.into(),
        msg: msg.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedSentence {
    pub words: Vec<String>,
    pub labels: Vec<String>,
}

impl TaggedSentence {
    pub fn new(words: Vec<String>, labels: Vec<String>) -> Result<Self, FinetuneError> {
        if words.is_empty() {
            return Err(FinetuneError::Contract("empty sentence".into()));
        }
        if words.len() != labels.len() {
            return Err(FinetuneError::Contract(format!("{} words but {} labels", words.len(), labels.len())));
        }
        Ok(Self { words, labels })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Parses `token<TAB>label` lines with blank lines between sentences.
/// `source` names the input in error messages.
pub fn parse_conll(text: &str, source: &str) -> Result<Vec<TaggedSentence>, FinetuneError> {
    let mut out = Vec::new();
    let (mut words, mut labels) = (Vec::new(), Vec::new());
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            if !words.is_empty() {
                out.push(TaggedSentence::new(std::mem::take(&mut words), std::mem::take(&mut labels))?);
            }
            continue;
        }
        let mut fields = line.split('\t');
        match (fields.next(), fields.next(), fields.next()) {
            (Some(w), Some(l), None) if !w.is_empty() && !l.is_empty() => {
                words.push(w.to_string());
                labels.push(l.to_string());
            }
            _ => return Err(data_error(format!("{source}:{}", i + 1), "expected \"token<TAB>label\"")),
        }
    }
    if !words.is_empty() {
        out.push(TaggedSentence::new(words, labels)?);
    }
    Ok(out)
}

pub fn read_conll(path: &Path) -> Result<Vec<TaggedSentence>, FinetuneError> {
    parse_conll(&fs::read_to_string(path)?, &path.display().to_string())
}

pub fn format_conll(sentences: &[TaggedSentence]) -> String {
    let mut s = String::new();
    for (i, sent) in sentences.iter().enumerate() {
        if i > 0 {
            s.push('\n');
        }
        for (w, l) in sent.words.iter().zip(&sent.labels) {
            s.push_str(w);
            s.push('\t');
            s.push_str(l);
            s.push('\n');
        }
    }
    s
}

pub fn write_conll(sentences: &[TaggedSentence], path: &Path) -> Result<(), FinetuneError> {
    fs::write(path, format_conll(sentences))?;
    Ok(())
}

/// Rejects any sentence whose labels are not well-formed BIO2, or use an
/// entity type outside `types` when given.
pub fn validate_bio2_data(sentences: &[TaggedSentence], types: Option<&[&str]>) -> Result<(), FinetuneError> {
    for (i, s) in sentences.iter().enumerate() {
        metrics::validate_bio2(&s.labels)
            .map_err(|(pos, reason)| data_error(format!("sentence {}", i + 1), format!("word {}: {reason}", pos + 1)))?;
        if let Some(types) = types {
            for (pos, l) in s.labels.iter().enumerate() {
                if let Some((_, t)) = l.split_once('-') {
                    if !types.contains(&t) {
                        return Err(data_error(format!("sentence {}", i + 1), format!("word {}: unknown entity type {t}", pos + 1)));
                    }
                }
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NliLabel {
    Entailment,
    Contradiction,
    Neutral,
}

impl NliLabel {
    pub const ALL: [NliLabel; 3] = [NliLabel::Entailment, NliLabel::Contradiction, NliLabel::Neutral];

    pub fn class(self) -> usize {
        self as usize
    }

    pub fn from_class(c: usize) -> Option<Self> {
        Self::ALL.get(c).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NliLabel::Entailment => "entailment",
            NliLabel::Contradiction => "contradiction",
            NliLabel::Neutral => "neutral",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|l| l.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NliPair {
    pub premise: String,
    pub hypothesis: String,
    pub label: NliLabel,
}

/// Reads one `{"premise","hypothesis","label"}` object.
pub fn nli_from_json(value: &serde_json::Value) -> Result<NliPair, String> {
    let field = |k: &str| value.get(k).and_then(|v| v.as_str()).ok_or_else(|| format!("missing string field \"{k}\""));
    let label = field("label")?;
    Ok(NliPair {
        premise: field("premise")?.to_string(),
        hypothesis: field("hypothesis")?.to_string(),
        label: NliLabel::parse(label).ok_or_else(|| format!("unknown label {label:?}"))?,
    })
}

/// Parses JSONL pairs; blank lines are skipped.
pub fn parse_nli_jsonl(text: &str, source: &str) -> Result<Vec<NliPair>, FinetuneError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = format!("{source}:{}", i + 1);
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| data_error(&record, e.to_string()))?;
        out.push(nli_from_json(&value).map_err(|m| data_error(&record, m))?);
    }
    Ok(out)
}

pub fn read_nli_jsonl(path: &Path) -> Result<Vec<NliPair>, FinetuneError> {
    parse_nli_jsonl(&fs::read_to_string(path)?, &path.display().to_string())
}

pub fn write_nli_jsonl(pairs: &[NliPair], path: &Path) -> Result<(), FinetuneError> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for p in pairs {
        serde_json::to_writer(&mut f, p).map_err(|e| FinetuneError::Io(e.into()))?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// An ordered label inventory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelSet {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl TryFrom<Vec<String>> for LabelSet {
    type Error = FinetuneError;

    fn try_from(labels: Vec<String>) -> Result<Self, FinetuneError> {
        Self::new(labels)
    }
}

impl From<LabelSet> for Vec<String> {
    fn from(l: LabelSet) -> Self {
        l.labels
    }
}

impl LabelSet {
    pub fn new(labels: Vec<String>) -> Result<Self, FinetuneError> {
        if labels.is_empty() {
            return Err(FinetuneError::Config("empty label set".into()));
        }
        let mut index = HashMap::new();
        for (i, l) in labels.iter().enumerate() {
            if index.insert(l.clone(), i).is_some() {
                return Err(FinetuneError::Config(format!("duplicate label {l}")));
            }
        }
        Ok(Self { labels, index })
    }

    /// Every label seen in the data, sorted.
    pub fn from_sentences(sentences: &[TaggedSentence]) -> Result<Self, FinetuneError> {
        let set: BTreeSet<&String> = sentences.iter().flat_map(|s| &s.labels).collect();
        Self::new(set.into_iter().cloned().collect())
    }

    pub fn upos() -> Self {
        Self::new(UPOS_TAGS.iter().map(|s| s.to_string()).collect()).expect("distinct")
    }

    /// `O` followed by `B-`/`I-` tags for each entity type.
    pub fn bio2(types: &[&str]) -> Result<Self, FinetuneError> {
        let mut v = vec!["O".to_string()];
        for t in types {
            v.push(format!("B-{t}"));
            v.push(format!("I-{t}"));
        }
        Self::new(v)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn label(&self, id: usize) -> &str {
        &self.labels[id]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

/// Word-to-piece alignment of one sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentMap {
    /// Position of each kept word's first piece in the full sequence.
    pub word_first: Vec<usize>,
    /// True exactly at the positions in `word_first`.
    pub loss_mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignedSentence {
    /// `[CLS] pieces... [SEP]`
    pub ids: Vec<u32>,
    pub alignment: AlignmentMap,
    /// One label per kept word; empty for unlabelled input.
    pub label_ids: Vec<usize>,
    /// Words removed from the end to fit the position limit.
    pub dropped_words: usize,
}

impl AlignedSentence {
    pub fn words(&self) -> usize {
        self.alignment.word_first.len()
    }
}

/// Pieces of one word under the vocabulary's normalization. A word that
/// normalizes to nothing becomes `[UNK]`.
pub fn word_pieces(vocab: &Vocabulary, word: &str) -> Vec<u32> {
    let norm = normalize(word, vocab.normalizer());
    let ids: Vec<u32> = norm.split_whitespace().flat_map(|w| vocab.encode_word(w).ids).collect();
    if ids.is_empty() {
        vec![UNK_ID]
    } else {
        ids
    }
}

/// Aligns words to pieces, dropping whole words from the end until
/// `[CLS] ... [SEP]` fits in `max_positions`. A first word that alone is too
/// long keeps only its leading pieces.
pub fn align_words<S: AsRef<str>>(words: &[S], vocab: &Vocabulary, max_positions: usize) -> Result<AlignedSentence, FinetuneError> {
    if words.is_empty() {
        return Err(FinetuneError::Contract("empty sentence".into()));
    }
    if max_positions < 3 {
        return Err(FinetuneError::Config(format!("max_positions {max_positions} leaves no room for a word")));
    }
    let budget = max_positions - 2;
    let mut ids = vec![CLS_ID];
    let mut word_first = Vec::new();
    let mut kept = 0;
    for w in words {
        let pieces = word_pieces(vocab, w.as_ref());
        let room = budget - (ids.len() - 1);
        if pieces.len() > room {
            if kept == 0 {
                word_first.push(ids.len());
                ids.extend_from_slice(&pieces[..room]);
                kept = 1;
            }
            break;
        }
        word_first.push(ids.len());
        ids.extend(pieces);
        kept += 1;
    }
    ids.push(SEP_ID);
    let mut loss_mask = vec![false; ids.len()];
    for &p in &word_first {
        loss_mask[p] = true;
    }
    Ok(AlignedSentence {
        ids,
        alignment: AlignmentMap { word_first, loss_mask },
        label_ids: Vec::new(),
        dropped_words: words.len() - kept,
    })
}

/// [`align_words`] plus label lookup. Labels of dropped words are dropped
/// with them.
pub fn align_labels(
    sentence: &TaggedSentence,
    vocab: &Vocabulary,
    labels: &LabelSet,
    max_positions: usize,
) -> Result<AlignedSentence, FinetuneError> {
    let mut a = align_words(&sentence.words, vocab, max_positions)?;
    a.label_ids = sentence.labels[..a.words()]
        .iter()
        .enumerate()
        .map(|(i, l)| {
            labels
                .id(l)
                .ok_or_else(|| data_error(format!("word {}", i + 1), format!("label {l:?} is not in the label set")))
        })
        .collect::<Result<_, _>>()?;
    Ok(a)
}

/// Aligns a whole data set, naming the offending sentence on error.
pub fn align_dataset(
    sentences: &[TaggedSentence],
    vocab: &Vocabulary,
    labels: &LabelSet,
    max_positions: usize,
) -> Result<Vec<AlignedSentence>, FinetuneError> {
    sentences
        .iter()
        .enumerate()
        .map(|(i, s)| {
            align_labels(s, vocab, labels, max_positions).map_err(|e| match e {
                FinetuneError::Data { record, msg } => data_error(format!("sentence {}", i + 1), format!("{record}: {msg}")),
                other => other,
            })
        })
        .collect()
}

/// Drops the pre-training heads, keeping the encoder and, when
/// `keep_pooler`, the pooler.
pub fn encoder_params(store: &ParamStore, keep_pooler: bool) -> ParamStore {
    let mut out = ParamStore::new();
    for (name, t) in store.iter() {
        if name.starts_with("embeddings.") || name.starts_with("layer.") || (keep_pooler && name.starts_with("pooler.")) {
            out.insert(name.clone(), t.clone());
        }
    }
    out
}

fn head_init(store: &mut ParamStore, hidden: usize, classes: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    store.insert(
        "classifier.weight",
        Tensor::from_fn(&[hidden, classes], |_| bert::truncated_normal(&mut rng, INIT_STD) as f32),
    );
    store.insert("classifier.bias", Tensor::zeros(&[classes]));
}

fn check_head<R: Real>(g: &Graph<R>, p: &Params, hidden: usize, classes: usize) -> Result<(), FinetuneError> {
    let shape_of = |name: &str| p.get(name).map(|v| g.shape(v).to_vec());
    let w = shape_of("classifier.weight");
    let b = shape_of("classifier.bias");
    if w.as_deref() != Some(&[hidden, classes][..]) || b.as_deref() != Some(&[classes][..]) {
        return Err(FinetuneError::Config(format!(
            "classifier has shapes {w:?}/{b:?}, expected [{hidden}, {classes}]/[{classes}]"
        )));
    }
    Ok(())
}

fn classify<R: Real>(g: &mut Graph<R>, p: &Params, x: Var) -> Result<Var, AutodiffError> {
    let h = g.matmul(x, p["classifier.weight"])?;
    g.add(h, p["classifier.bias"])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaggerConfig {
    pub bert: BertConfig,
    pub num_labels: usize,
    pub crf: bool,
}

impl TaggerConfig {
    /// Adds a fresh head (and a zero transition table with `crf`) to an
    /// encoder parameter store.
    pub fn init_head(&self, store: &mut ParamStore, seed: u64) {
        head_init(store, self.bert.hidden, self.num_labels, seed);
        if self.crf {
            let k = self.num_labels + 2;
            store.insert("crf.transitions", Tensor::zeros(&[k, k]));
        }
    }

    /// Per-word emission scores `[total words, C]`, plus each sentence's
    /// `(first row, word count)`.
    pub fn emissions<R: Real>(
        &self,
        g: &mut Graph<R>,
        p: &Params,
        batch: &[&AlignedSentence],
    ) -> Result<(Var, Vec<(usize, usize)>), FinetuneError> {
        check_head(g, p, self.bert.hidden, self.num_labels)?;
        if self.crf && p.get("crf.transitions").is_none() {
            return Err(FinetuneError::Config("CRF enabled but no crf.transitions".into()));
        }
        let segments: Vec<Vec<u8>> = batch.iter().map(|s| vec![0u8; s.ids.len()]).collect();
        let inputs: Vec<SeqInput> = batch.iter().zip(&segments).map(|(s, seg)| SeqInput::new(&s.ids, seg, s.ids.len())).collect();
        let enc = bert::encode(g, p, &self.bert, &inputs, false)?;
        let mut rows = Vec::new();
        let mut spans = Vec::with_capacity(batch.len());
        for (b, s) in batch.iter().enumerate() {
            spans.push((rows.len(), s.words()));
            rows.extend(s.alignment.word_first.iter().map(|&pos| enc.row(b, pos)));
        }
        let h = g.embedding_lookup(enc.hidden, &rows)?;
        let h = g.dropout(h, self.bert.dropout);
        Ok((classify(g, p, h)?, spans))
    }

    /// Mean cross-entropy over all words of the batch, or with `crf` the
    /// mean per-sentence negative log-likelihood.
    pub fn loss<R: Real>(&self, g: &mut Graph<R>, p: &Params, batch: &[&AlignedSentence]) -> Result<Var, FinetuneError> {
        if let Some(i) = batch.iter().position(|s| s.label_ids.len() != s.words()) {
            return Err(FinetuneError::Contract(format!("sentence {i} of the batch is unlabelled")));
        }
        let (em, spans) = self.emissions(g, p, batch)?;
        let labels: Vec<usize> = batch.iter().flat_map(|s| s.label_ids.iter().copied()).collect();
        emission_loss(g, em, &labels, &spans, self.crf.then(|| p["crf.transitions"]))
    }

    /// Decoded label ids per sentence, in eval mode.
    pub fn predict(&self, params: &ParamStore, batch: &[AlignedSentence]) -> Result<Vec<Vec<usize>>, FinetuneError> {
        let mut out = Vec::with_capacity(batch.len());
        for chunk in batch.chunks(32) {
            let mut g = Graph::new();
            let p = g.bind(params);
            let refs: Vec<&AlignedSentence> = chunk.iter().collect();
            let (em, spans) = self.emissions(&mut g, &p, &refs)?;
            let trans = self.crf.then(|| g.value(p["crf.transitions"]).clone());
            out.extend(decode_emissions(g.value(em), &spans, trans.as_ref())?);
        }
        Ok(out)
    }

    /// Eval-mode loss averaged over batches, weighted by batch size.
    pub fn dataset_loss(&self, params: &ParamStore, data: &[AlignedSentence]) -> Result<f64, FinetuneError> {
        mean_over_chunks(data, |chunk| {
            let mut g = Graph::<f32>::new();
            let p = g.bind(params);
            let refs: Vec<&AlignedSentence> = chunk.iter().collect();
            let l = self.loss(&mut g, &p, &refs)?;
            Ok(g.value(l).item() as f64)
        })
    }

    /// Word accuracy on labelled data.
    pub fn accuracy(&self, params: &ParamStore, data: &[AlignedSentence]) -> Result<f64, FinetuneError> {
        let pred = self.predict(params, data)?;
        let gold: Vec<Vec<usize>> = data.iter().map(|s| s.label_ids.clone()).collect();
        metrics::token_accuracy(&gold, &pred).map_err(|e| FinetuneError::Contract(e.to_string()))
    }
}

fn mean_over_chunks<T>(data: &[T], mut f: impl FnMut(&[T]) -> Result<f64, FinetuneError>) -> Result<f64, FinetuneError> {
    if data.is_empty() {
        return Err(FinetuneError::Contract("empty data set".into()));
    }
    let mut total = 0.0;
    for chunk in data.chunks(32) {
        total += f(chunk)? * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Loss over precomputed emissions `[total words, C]`.
pub fn emission_loss<R: Real>(
    g: &mut Graph<R>,
    emissions: Var,
    labels: &[usize],
    spans: &[(usize, usize)],
    transitions: Option<Var>,
) -> Result<Var, FinetuneError> {
    match transitions {
        None => {
            let targets: Vec<Option<usize>> = labels.iter().map(|&l| Some(l)).collect();
            Ok(g.cross_entropy(emissions, &targets)?)
        }
        Some(t) => {
            let mut total: Option<Var> = None;
            for &(start, len) in spans {
                let em = g.slice(emissions, 0, start, len)?;
                let nll = crf::neg_log_likelihood(g, em, t, &labels[start..start + len])?;
                total = Some(match total {
                    None => nll,
                    Some(acc) => g.add(acc, nll)?,
                });
            }
            let total = total.ok_or_else(|| FinetuneError::Contract("empty batch".into()))?;
            Ok(g.scale(total, R::c(1.0 / spans.len() as f64)))
        }
    }
}

/// Greedy per-row argmax, or Viterbi per sentence when transitions are
/// given.
pub fn decode_emissions<R: Real>(
    emissions: &Tensor<R>,
    spans: &[(usize, usize)],
    transitions: Option<&Tensor<R>>,
) -> Result<Vec<Vec<usize>>, FinetuneError> {
    spans
        .iter()
        .map(|&(start, len)| match transitions {
            None => Ok((start..start + len).map(|r| argmax(emissions.row(r))).collect()),
            Some(t) => {
                let k = emissions.cols();
                let em = Tensor::new(vec![len, k], emissions.data()[start * k..(start + len) * k].to_vec())?;
                Ok(crf::viterbi(&em, t)?.0)
            }
        })
        .collect()
}

/// `[CLS] premise [SEP] hypothesis [SEP]` with segment ids 0 then 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairEncoding {
    pub ids: Vec<u32>,
    pub segment_ids: Vec<u8>,
    /// Class id, when the pair is labelled.
    pub label: Option<usize>,
}

/// Encodes a pair, trimming the longer side first when it does not fit.
pub fn encode_pair(premise: &str, hypothesis: &str, vocab: &Vocabulary, max_positions: usize) -> Result<PairEncoding, FinetuneError> {
    if max_positions < 5 {
        return Err(FinetuneError::Config(format!("max_positions {max_positions} cannot hold a pair")));
    }
    let mut a = vocab.encode(premise).ids;
    let mut b = vocab.encode(hypothesis).ids;
    if a.is_empty() || b.is_empty() {
        return Err(FinetuneError::Contract("pair has an empty side".into()));
    }
    truncate_pair(&mut a, &mut b, max_positions - 3);
    let mut ids = Vec::with_capacity(a.len() + b.len() + 3);
    ids.push(CLS_ID);
    ids.extend(&a);
    ids.push(SEP_ID);
    let split = ids.len();
    ids.extend(&b);
    ids.push(SEP_ID);
    let segment_ids = (0..ids.len()).map(|i| u8::from(i >= split)).collect();
    Ok(PairEncoding {
        ids,
        segment_ids,
        label: None,
    })
}

pub fn encode_pairs(pairs: &[NliPair], vocab: &Vocabulary, max_positions: usize) -> Result<Vec<PairEncoding>, FinetuneError> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut e = encode_pair(&p.premise, &p.hypothesis, vocab, max_positions)
                .map_err(|e| data_error(format!("pair {}", i + 1), e.to_string()))?;
            e.label = Some(p.label.class());
            Ok(e)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairClassifierConfig {
    pub bert: BertConfig,
    pub num_classes: usize,
}

impl PairClassifierConfig {
    pub fn nli(bert: BertConfig) -> Self {
        Self { bert, num_classes: 3 }
    }

    pub fn init_head(&self, store: &mut ParamStore, seed: u64) {
        head_init(store, self.bert.hidden, self.num_classes, seed);
    }

    /// Class logits `[batch, classes]`.
    pub fn logits<R: Real>(&self, g: &mut Graph<R>, p: &Params, batch: &[&PairEncoding]) -> Result<Var, FinetuneError> {
        check_head(g, p, self.bert.hidden, self.num_classes)?;
        let inputs: Vec<SeqInput> = batch.iter().map(|e| SeqInput::new(&e.ids, &e.segment_ids, e.ids.len())).collect();
        let enc = bert::encode(g, p, &self.bert, &inputs, false)?;
        let cls: Vec<usize> = (0..batch.len()).map(|b| enc.row(b, 0)).collect();
        let h = bert::pooled(g, p, enc.hidden, &cls)?;
        let h = g.dropout(h, self.bert.dropout);
        Ok(classify(g, p, h)?)
    }

    pub fn loss<R: Real>(&self, g: &mut Graph<R>, p: &Params, batch: &[&PairEncoding]) -> Result<Var, FinetuneError> {
        let targets: Vec<Option<usize>> = batch.iter().map(|e| e.label).collect();
        if targets.iter().any(Option::is_none) {
            return Err(FinetuneError::Contract("unlabelled pair in a training batch".into()));
        }
        let logits = self.logits(g, p, batch)?;
        Ok(g.cross_entropy(logits, &targets)?)
    }

    pub fn predict(&self, params: &ParamStore, data: &[PairEncoding]) -> Result<Vec<usize>, FinetuneError> {
        let mut out = Vec::with_capacity(data.len());
        for chunk in data.chunks(32) {
            let mut g = Graph::new();
            let p = g.bind(params);
            let refs: Vec<&PairEncoding> = chunk.iter().collect();
            let logits = self.logits(&mut g, &p, &refs)?;
            let v = g.value(logits);
            out.extend((0..chunk.len()).map(|r| argmax(v.row(r))));
        }
        Ok(out)
    }

    pub fn dataset_loss(&self, params: &ParamStore, data: &[PairEncoding]) -> Result<f64, FinetuneError> {
        mean_over_chunks(data, |chunk| {
            let mut g = Graph::<f32>::new();
            let p = g.bind(params);
            let refs: Vec<&PairEncoding> = chunk.iter().collect();
            let l = self.loss(&mut g, &p, &refs)?;
            Ok(g.value(l).item() as f64)
        })
    }

    pub fn accuracy(&self, params: &ParamStore, data: &[PairEncoding]) -> Result<f64, FinetuneError> {
        let pred = self.predict(params, data)?;
        let gold: Vec<usize> = data.iter().map(|e| e.label.unwrap_or(usize::MAX)).collect();
        metrics::accuracy(&gold, &pred).map_err(|e| FinetuneError::Contract(e.to_string()))
    }
}
