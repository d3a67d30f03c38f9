//! Non-transformer baselines over fixed word vectors: a BiLSTM-CNN-CRF
//! tagger and a decomposable attention classifier for sentence pairs.
//!
//! Word vectors are never updated. A word missing from the table reads as a
//! zero vector, so the tagger then relies on its character features alone.
//! Words are normalized before lookup.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, ParamStore, Params, Real, Tensor, Var};
use crate::bert::argmax;
use crate::finetune::{decode_emissions, emission_loss, FinetuneError, LabelSet, NliPair, TaggedSentence};
use crate::metrics;
use crate::textnorm::{normalize, NormalizationConfig};
use crate::trainer::TrainError;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("{file}:{line}: {msg}")]
    Parse { file: String, line: usize, msg: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Finetune(#[from] FinetuneError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<BaselineError> for TrainError {
    fn from(e: BaselineError) -> Self {
        match e {
            BaselineError::Config(m) => TrainError::Config(m),
            BaselineError::Io(e) => TrainError::Io(e),
            other => TrainError::Model(other.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, BaselineError>;

/// A word-to-vector table with a fixed dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct WordVectors {
    dim: usize,
    words: Vec<String>,
    index: HashMap<String, usize>,
    data: Vec<f32>,
}

impl WordVectors {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            words: Vec::new(),
            index: HashMap::new(),
            data: Vec::new(),
        }
    }

    /// Adds or replaces a vector.
    pub fn insert(&mut self, word: impl Into<String>, vector: &[f32]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(BaselineError::Contract(format!("vector of length {} in a table of dimension {}", vector.len(), self.dim)));
        }
        let word = word.into();
        match self.index.get(&word) {
            Some(&i) => self.data[i * self.dim..(i + 1) * self.dim].copy_from_slice(vector),
            None => {
                self.index.insert(word.clone(), self.words.len());
                self.words.push(word);
                self.data.extend_from_slice(vector);
            }
        }
        Ok(())
    }

    /// Uniform vectors in `[-0.5, 0.5)` for the given words.
    pub fn random<'a>(words: impl IntoIterator<Item = &'a str>, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Self::new(dim);
        for w in words {
            if !out.index.contains_key(w) {
                let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-0.5..0.5)).collect();
                out.insert(w, &v).expect("dimension matches");
            }
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn get(&self, word: &str) -> Option<&[f32]> {
        self.index.get(word).map(|&i| &self.data[i * self.dim..(i + 1) * self.dim])
    }

    /// The stored vector, or zeros for an unknown word.
    pub fn lookup(&self, word: &str) -> Vec<f32> {
        self.get(word).map_or_else(|| vec![0.0; self.dim], <[f32]>::to_vec)
    }

    /// Rows for a word sequence, `[T, dim]`.
    pub fn matrix(&self, words: &[String]) -> Tensor {
        let data: Vec<f32> = words.iter().flat_map(|w| self.lookup(w)).collect();
        Tensor::new(vec![words.len(), self.dim], data).expect("row lengths match")
    }

    /// The table with normalized keys. When two keys collide the earlier
    /// one wins.
    pub fn normalized(&self, config: &NormalizationConfig) -> Self {
        let mut out = Self::new(self.dim);
        for w in &self.words {
            let key = normalize(w, config);
            if !key.is_empty() && !out.index.contains_key(&key) {
                out.insert(key, self.get(w).expect("own word")).expect("dimension matches");
            }
        }
        out
    }

    /// Reads the text format: a `count dim` header, then `word v1 .. vdim`
    /// per line. Blank lines are ignored.
    pub fn parse(text: &str, file: &str) -> Result<Self> {
        let err = |line: usize, msg: String| BaselineError::Parse {
            file: file.to_string(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l)).filter(|(_, l)| !l.trim().is_empty());
        let (hline, header) = lines.next().ok_or_else(|| err(1, "missing \"count dim\" header".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        let (count, dim) = match fields.as_slice() {
            [c, d] => match (c.parse::<usize>(), d.parse::<usize>()) {
                (Ok(c), Ok(d)) if d > 0 => (c, d),
                _ => return Err(err(hline, format!("bad header {header:?}"))),
            },
            _ => return Err(err(hline, format!("expected \"count dim\", found {header:?}"))),
        };
        let mut out = Self::new(dim);
        let mut row = Vec::with_capacity(dim);
        for (n, line) in lines {
            let mut parts = line.split_whitespace();
            let word = parts.next().expect("non-blank line");
            row.clear();
            for v in parts {
                row.push(v.parse::<f32>().map_err(|_| err(n, format!("bad number {v:?}")))?);
            }
            if row.len() != dim {
                return Err(err(n, format!("expected {dim} values, found {}", row.len())));
            }
            if out.index.contains_key(word) {
                return Err(err(n, format!("duplicate word {word:?}")));
            }
            out.insert(word, &row)?;
        }
        if out.len() != count {
            return Err(err(hline, format!("header declares {count} vectors, found {}", out.len())));
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?, &path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.len(), self.dim);
        for w in &self.words {
            out.push_str(w);
            for v in self.get(w).expect("own word") {
                write!(out, " {v}").expect("string write");
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_text())?)
    }
}

fn baseline_word(word: &str) -> String {
    let w = normalize(word, &NormalizationConfig::default());
    if w.is_empty() {
        word.to_string()
    } else {
        w
    }
}

/// Whitespace words of the normalized text.
pub fn baseline_words(text: &str) -> Vec<String> {
    normalize(text, &NormalizationConfig::default()).split_whitespace().map(str::to_string).collect()
}

/// Character ids; 0 stands for any character not seen when building.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub struct CharVocab {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl From<String> for CharVocab {
    fn from(s: String) -> Self {
        let chars: Vec<char> = s.chars().collect::<BTreeSet<_>>().into_iter().collect();
        let index = chars.iter().enumerate().map(|(i, &c)| (c, i + 1)).collect();
        Self { chars, index }
    }
}

impl From<CharVocab> for String {
    fn from(v: CharVocab) -> Self {
        v.chars.into_iter().collect()
    }
}

impl CharVocab {
    /// Every character of the normalized words.
    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        Self::from(words.into_iter().map(baseline_word).collect::<String>())
    }

    /// Table size, including the unknown id.
    pub fn len(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn ids(&self, word: &str) -> Vec<usize> {
        word.chars().map(|c| self.index.get(&c).copied().unwrap_or(0)).collect()
    }
}

fn param(p: &Params, name: &str) -> Result<Var> {
    p.get(name).ok_or_else(|| BaselineError::Config(format!("missing parameter {name}")))
}

fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound) as f32)
}

fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    uniform(&[rows, cols], (6.0 / (rows + cols) as f64).sqrt(), rng)
}

fn linear<R: Real>(g: &mut Graph<R>, p: &Params, prefix: &str, x: Var) -> Result<Var> {
    let h = g.matmul(x, param(p, &format!("{prefix}.weight"))?)?;
    Ok(g.add(h, param(p, &format!("{prefix}.bias"))?)?)
}

/// Character features of one word: embeddings, zero padding so that every
/// character has a full window, a convolution, tanh, and a max over
/// positions. Returns `[1, filters]`.
pub fn char_cnn<R: Real>(g: &mut Graph<R>, table: Var, weight: Var, bias: Var, chars: &[usize], width: usize) -> Result<Var> {
    if chars.is_empty() {
        return Err(BaselineError::Contract("word without characters".into()));
    }
    if width == 0 {
        return Err(BaselineError::Config("filter width must be positive".into()));
    }
    let dim = g.shape(table)[1];
    let x = g.embedding_lookup(table, chars)?;
    let left = (width - 1) / 2;
    let right = width - 1 - left;
    let mut parts = Vec::new();
    if left > 0 {
        parts.push(g.constant(Tensor::zeros(&[left, dim])));
    }
    parts.push(x);
    if right > 0 {
        parts.push(g.constant(Tensor::zeros(&[right, dim])));
    }
    let padded = if parts.len() == 1 { x } else { g.concat(&parts, 0)? };
    let windows: Vec<Var> = (0..width).map(|k| g.slice(padded, 0, k, chars.len())).collect::<std::result::Result<_, _>>()?;
    let windows = if width == 1 { windows[0] } else { g.concat(&windows, 1)? };
    let conv = g.matmul(windows, weight)?;
    let conv = g.add(conv, bias)?;
    let act = g.tanh(conv);
    Ok(g.max_rows(act)?)
}

/// One tagged (or untagged) sentence ready for the tagger.
#[derive(Debug, Clone, PartialEq)]
pub struct TaggingExample {
    pub words: Vec<String>,
    /// Word vectors `[T, word_dim]`.
    pub vectors: Tensor,
    pub chars: Vec<Vec<usize>>,
    /// Empty when the sentence is unlabelled.
    pub label_ids: Vec<usize>,
}

pub fn prepare_tagging(words: &[String], vectors: &WordVectors, chars: &CharVocab) -> Result<TaggingExample> {
    if words.is_empty() {
        return Err(BaselineError::Contract("empty sentence".into()));
    }
    let words: Vec<String> = words.iter().map(|w| baseline_word(w)).collect();
    Ok(TaggingExample {
        vectors: vectors.matrix(&words),
        chars: words.iter().map(|w| chars.ids(w)).collect(),
        words,
        label_ids: Vec::new(),
    })
}

pub fn prepare_tagging_dataset(
    sentences: &[TaggedSentence],
    vectors: &WordVectors,
    chars: &CharVocab,
    labels: &LabelSet,
) -> Result<Vec<TaggingExample>> {
    sentences
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut ex = prepare_tagging(&s.words, vectors, chars)?;
            ex.label_ids = s
                .labels
                .iter()
                .enumerate()
                .map(|(j, l)| {
                    labels.id(l).ok_or_else(|| BaselineError::Contract(format!("sentence {i}: word {j}: unknown label {l:?}")))
                })
                .collect::<Result<_>>()?;
            Ok(ex)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BilstmConfig {
    pub word_dim: usize,
    pub char_vocab: usize,
    pub char_dim: usize,
    pub char_filters: usize,
    pub char_width: usize,
    pub hidden: usize,
    pub layers: usize,
    pub num_labels: usize,
    pub dropout: f64,
}

impl BilstmConfig {
    pub fn new(word_dim: usize, char_vocab: usize, num_labels: usize) -> Self {
        Self {
            word_dim,
            char_vocab,
            char_dim: 30,
            char_filters: 30,
            char_width: 3,
            hidden: 100,
            layers: 2,
            num_labels,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [self.char_vocab, self.char_dim, self.char_filters, self.char_width, self.hidden, self.layers, self.num_labels];
        if sizes.contains(&0) {
            return Err(BaselineError::Config(format!("all sizes must be positive: {self:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(BaselineError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    fn lstm_prefix(layer: usize, backward: bool) -> String {
        format!("lstm.{layer}.{}", if backward { "bwd" } else { "fwd" })
    }

    /// Random weights, with the forget-gate bias set to 1 and a zero
    /// transition table.
    pub fn init(&self, seed: u64) -> Result<ParamStore> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        store.insert("char.embeddings", uniform(&[self.char_vocab, self.char_dim], (3.0 / self.char_dim as f64).sqrt(), &mut rng));
        let window = self.char_width * self.char_dim;
        store.insert("char.conv.weight", glorot(window, self.char_filters, &mut rng));
        store.insert("char.conv.bias", Tensor::zeros(&[self.char_filters]));
        let h = self.hidden;
        let k = 1.0 / (h as f64).sqrt();
        for layer in 0..self.layers {
            let input = if layer == 0 { self.word_dim + self.char_filters } else { 2 * h };
            for backward in [false, true] {
                let prefix = Self::lstm_prefix(layer, backward);
                store.insert(format!("{prefix}.wx"), uniform(&[input, 4 * h], k, &mut rng));
                store.insert(format!("{prefix}.wh"), uniform(&[h, 4 * h], k, &mut rng));
                let mut bias = Tensor::zeros(&[4 * h]);
                bias.data_mut()[h..2 * h].fill(1.0);
                store.insert(format!("{prefix}.bias"), bias);
            }
        }
        store.insert("emission.weight", glorot(2 * h, self.num_labels, &mut rng));
        store.insert("emission.bias", Tensor::zeros(&[self.num_labels]));
        let c = self.num_labels + 2;
        store.insert("crf.transitions", Tensor::zeros(&[c, c]));
        Ok(store)
    }

    /// `[e; c]` for every word, `[T, word_dim + char_filters]`.
    pub fn word_representations<R: Real>(&self, g: &mut Graph<R>, p: &Params, ex: &TaggingExample) -> Result<Var> {
        if ex.chars.is_empty() {
            return Err(BaselineError::Contract("empty sentence".into()));
        }
        if ex.vectors.shape() != [ex.chars.len(), self.word_dim] {
            return Err(BaselineError::Contract(format!(
                "word vectors of shape {:?} for {} words of dimension {}",
                ex.vectors.shape(),
                ex.chars.len(),
                self.word_dim
            )));
        }
        let table = param(p, "char.embeddings")?;
        let weight = param(p, "char.conv.weight")?;
        let bias = param(p, "char.conv.bias")?;
        let mut rows = Vec::with_capacity(ex.chars.len());
        for chars in &ex.chars {
            rows.push(char_cnn(g, table, weight, bias, chars, self.char_width)?);
        }
        let c = if rows.len() == 1 { rows[0] } else { g.concat(&rows, 0)? };
        let e = g.constant(ex.vectors.cast::<R>());
        let w = g.concat(&[e, c], 1)?;
        Ok(g.dropout(w, self.dropout))
    }

    fn lstm_direction<R: Real>(&self, g: &mut Graph<R>, p: &Params, prefix: &str, x: Var, backward: bool) -> Result<Var> {
        let h_dim = self.hidden;
        let steps = g.shape(x)[0];
        let xw = g.matmul(x, param(p, &format!("{prefix}.wx"))?)?;
        let xw = g.add(xw, param(p, &format!("{prefix}.bias"))?)?;
        let wh = param(p, &format!("{prefix}.wh"))?;
        let mut h = g.constant(Tensor::zeros(&[1, h_dim]));
        let mut c = h;
        let mut out = vec![h; steps];
        let order: Vec<usize> = if backward { (0..steps).rev().collect() } else { (0..steps).collect() };
        for t in order {
            let xt = g.slice(xw, 0, t, 1)?;
            let hw = g.matmul(h, wh)?;
            let gates = g.add(xt, hw)?;
            let i = g.slice(gates, 1, 0, h_dim)?;
            let f = g.slice(gates, 1, h_dim, h_dim)?;
            let cand = g.slice(gates, 1, 2 * h_dim, h_dim)?;
            let o = g.slice(gates, 1, 3 * h_dim, h_dim)?;
            let (i, f, cand, o) = (g.sigmoid(i), g.sigmoid(f), g.tanh(cand), g.sigmoid(o));
            let keep = g.mul(f, c)?;
            let write = g.mul(i, cand)?;
            c = g.add(keep, write)?;
            let tc = g.tanh(c);
            h = g.mul(o, tc)?;
            out[t] = h;
        }
        Ok(if steps == 1 { out[0] } else { g.concat(&out, 0)? })
    }

    /// Stacked bidirectional layers over `[T, input]`, giving `[T, 2 hidden]`
    /// with forward states first.
    pub fn bilstm<R: Real>(&self, g: &mut Graph<R>, p: &Params, x: Var) -> Result<Var> {
        let mut x = x;
        for layer in 0..self.layers {
            let fwd = self.lstm_direction(g, p, &Self::lstm_prefix(layer, false), x, false)?;
            let bwd = self.lstm_direction(g, p, &Self::lstm_prefix(layer, true), x, true)?;
            let both = g.concat(&[fwd, bwd], 1)?;
            x = g.dropout(both, self.dropout);
        }
        Ok(x)
    }

    /// Emissions `[total words, num_labels]` and each sentence's
    /// `(first row, length)`.
    pub fn emissions<R: Real>(&self, g: &mut Graph<R>, p: &Params, batch: &[&TaggingExample]) -> Result<(Var, Vec<(usize, usize)>)> {
        if batch.is_empty() {
            return Err(BaselineError::Contract("empty batch".into()));
        }
        let mut states = Vec::with_capacity(batch.len());
        let mut spans = Vec::with_capacity(batch.len());
        let mut row = 0;
        for ex in batch {
            let w = self.word_representations(g, p, ex)?;
            states.push(self.bilstm(g, p, w)?);
            spans.push((row, ex.chars.len()));
            row += ex.chars.len();
        }
        let h = if states.len() == 1 { states[0] } else { g.concat(&states, 0)? };
        Ok((linear(g, p, "emission", h)?, spans))
    }

    /// Mean negative log-likelihood per sentence.
    pub fn loss<R: Real>(&self, g: &mut Graph<R>, p: &Params, batch: &[&TaggingExample]) -> Result<Var> {
        if let Some(i) = batch.iter().position(|ex| ex.label_ids.len() != ex.chars.len()) {
            return Err(BaselineError::Contract(format!("sentence {i} of the batch is unlabelled")));
        }
        let (em, spans) = self.emissions(g, p, batch)?;
        let labels: Vec<usize> = batch.iter().flat_map(|ex| ex.label_ids.iter().copied()).collect();
        let trans = param(p, "crf.transitions")?;
        Ok(emission_loss(g, em, &labels, &spans, Some(trans))?)
    }

    /// Viterbi label ids per sentence, in eval mode.
    pub fn predict(&self, params: &ParamStore, data: &[TaggingExample]) -> Result<Vec<Vec<usize>>> {
        let mut out = Vec::with_capacity(data.len());
        for chunk in data.chunks(32) {
            let mut g = Graph::new();
            let p = g.bind(params);
            let refs: Vec<&TaggingExample> = chunk.iter().collect();
            let (em, spans) = self.emissions(&mut g, &p, &refs)?;
            let trans = g.value(param(&p, "crf.transitions")?).clone();
            out.extend(decode_emissions(g.value(em), &spans, Some(&trans))?);
        }
        Ok(out)
    }

    pub fn dataset_loss(&self, params: &ParamStore, data: &[TaggingExample]) -> Result<f64> {
        mean_over_chunks(data, |chunk| {
            let mut g = Graph::<f32>::new();
            let p = g.bind(params);
            let refs: Vec<&TaggingExample> = chunk.iter().collect();
            let l = self.loss(&mut g, &p, &refs)?;
            Ok(g.value(l).item() as f64)
        })
    }

    pub fn accuracy(&self, params: &ParamStore, data: &[TaggingExample]) -> Result<f64> {
        let pred = self.predict(params, data)?;
        let gold: Vec<Vec<usize>> = data.iter().map(|ex| ex.label_ids.clone()).collect();
        metrics::token_accuracy(&gold, &pred).map_err(|e| BaselineError::Contract(e.to_string()))
    }
}

fn mean_over_chunks<T>(data: &[T], mut f: impl FnMut(&[T]) -> Result<f64>) -> Result<f64> {
    if data.is_empty() {
        return Err(BaselineError::Contract("empty data set".into()));
    }
    let mut total = 0.0;
    for chunk in data.chunks(32) {
        total += f(chunk)? * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// A sentence pair as word-vector rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PairExample {
    /// `[m, word_dim]`.
    pub premise: Tensor,
    /// `[n, word_dim]`.
    pub hypothesis: Tensor,
    pub label: Option<usize>,
}

pub fn prepare_pair(premise: &str, hypothesis: &str, vectors: &WordVectors) -> Result<PairExample> {
    let p = baseline_words(premise);
    let h = baseline_words(hypothesis);
    if p.is_empty() || h.is_empty() {
        return Err(BaselineError::Contract("premise and hypothesis must both have words".into()));
    }
    Ok(PairExample {
        premise: vectors.matrix(&p),
        hypothesis: vectors.matrix(&h),
        label: None,
    })
}

pub fn prepare_nli_dataset(pairs: &[NliPair], vectors: &WordVectors) -> Result<Vec<PairExample>> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, pair)| {
            let mut ex = prepare_pair(&pair.premise, &pair.hypothesis, vectors).map_err(|e| BaselineError::Contract(format!("pair {i}: {e}")))?;
            ex.label = Some(pair.label.class());
            Ok(ex)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DamConfig {
    pub word_dim: usize,
    /// Hidden and output width of the attend and compare networks, and the
    /// hidden width of the classifier.
    pub hidden: usize,
    pub num_classes: usize,
    pub dropout: f64,
}

/// Intermediate values of one pair.
#[derive(Debug, Clone, Copy)]
pub struct DamTrace {
    /// Premise-to-hypothesis weights `[m, n]`; rows sum to 1.
    pub premise_attention: Var,
    /// Hypothesis-to-premise weights `[n, m]`.
    pub hypothesis_attention: Var,
    /// For every premise word, the weighted hypothesis average `[m, d]`.
    pub premise_aligned: Var,
    /// For every hypothesis word, the weighted premise average `[n, d]`.
    pub hypothesis_aligned: Var,
    pub s_p: Var,
    pub s_q: Var,
    /// `[1, num_classes]`.
    pub logits: Var,
}

impl DamConfig {
    pub fn new(word_dim: usize) -> Self {
        Self {
            word_dim,
            hidden: 200,
            num_classes: 3,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.word_dim == 0 || self.hidden == 0 || self.num_classes == 0 {
            return Err(BaselineError::Config(format!("all sizes must be positive: {self:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(BaselineError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn init(&self, seed: u64) -> Result<ParamStore> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = self.hidden;
        let shapes = [
            ("f", self.word_dim, d, d),
            ("g", 2 * self.word_dim, d, d),
            ("h", 2 * d, d, self.num_classes),
        ];
        for (name, input, hidden, output) in shapes {
            store.insert(format!("dam.{name}.0.weight"), glorot(input, hidden, &mut rng));
            store.insert(format!("dam.{name}.0.bias"), Tensor::zeros(&[hidden]));
            store.insert(format!("dam.{name}.1.weight"), glorot(hidden, output, &mut rng));
            store.insert(format!("dam.{name}.1.bias"), Tensor::zeros(&[output]));
        }
        Ok(store)
    }

    fn mlp<R: Real>(&self, g: &mut Graph<R>, p: &Params, name: &str, x: Var) -> Result<Var> {
        let h = linear(g, p, &format!("dam.{name}.0"), x)?;
        let h = g.relu(h);
        let h = g.dropout(h, self.dropout);
        linear(g, p, &format!("dam.{name}.1"), h)
    }

    /// Attend, compare, aggregate and classify one pair.
    pub fn forward<R: Real>(&self, g: &mut Graph<R>, p: &Params, ex: &PairExample) -> Result<DamTrace> {
        for (side, t) in [("premise", &ex.premise), ("hypothesis", &ex.hypothesis)] {
            if t.shape().len() != 2 || t.rows() == 0 || t.cols() != self.word_dim {
                return Err(BaselineError::Contract(format!("{side} of shape {:?} with word dimension {}", t.shape(), self.word_dim)));
            }
        }
        let a = g.constant(ex.premise.cast::<R>());
        let b = g.constant(ex.hypothesis.cast::<R>());
        let fa = self.mlp(g, p, "f", a)?;
        let fb = self.mlp(g, p, "f", b)?;
        let fbt = g.transpose(fb)?;
        let scores = g.matmul(fa, fbt)?;
        let premise_attention = g.softmax(scores)?;
        let st = g.transpose(scores)?;
        let hypothesis_attention = g.softmax(st)?;
        let premise_aligned = g.matmul(premise_attention, b)?;
        let hypothesis_aligned = g.matmul(hypothesis_attention, a)?;
        let va = g.concat(&[a, premise_aligned], 1)?;
        let v = self.mlp(g, p, "g", va)?;
        let ub = g.concat(&[b, hypothesis_aligned], 1)?;
        let u = self.mlp(g, p, "g", ub)?;
        let s_p = g.sum_rows_sorted(v)?;
        let s_q = g.sum_rows_sorted(u)?;
        let s = g.concat(&[s_p, s_q], 1)?;
        let logits = self.mlp(g, p, "h", s)?;
        Ok(DamTrace {
            premise_attention,
            hypothesis_attention,
            premise_aligned,
            hypothesis_aligned,
            s_p,
            s_q,
            logits,
        })
    }

    /// `[batch, num_classes]`.
    pub fn logits<R: Real>(&self, g: &mut Graph<R>, p: &Params, batch: &[&PairExample]) -> Result<Var> {
        if batch.is_empty() {
            return Err(BaselineError::Contract("empty batch".into()));
        }
        let rows: Vec<Var> = batch.iter().map(|ex| self.forward(g, p, ex).map(|t| t.logits)).collect::<Result<_>>()?;
        Ok(if rows.len() == 1 { rows[0] } else { g.concat(&rows, 0)? })
    }

    /// Mean cross-entropy.
    pub fn loss<R: Real>(&self, g: &mut Graph<R>, p: &Params, batch: &[&PairExample]) -> Result<Var> {
        let targets: Vec<Option<usize>> = batch.iter().map(|ex| ex.label).collect();
        if targets.iter().any(Option::is_none) {
            return Err(BaselineError::Contract("unlabelled pair in a training batch".into()));
        }
        let logits = self.logits(g, p, batch)?;
        Ok(g.cross_entropy(logits, &targets)?)
    }

    pub fn predict(&self, params: &ParamStore, data: &[PairExample]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(data.len());
        for chunk in data.chunks(32) {
            let mut g = Graph::new();
            let p = g.bind(params);
            let refs: Vec<&PairExample> = chunk.iter().collect();
            let logits = self.logits(&mut g, &p, &refs)?;
            let v = g.value(logits);
            out.extend((0..v.rows()).map(|r| argmax(v.row(r))));
        }
        Ok(out)
    }

    pub fn dataset_loss(&self, params: &ParamStore, data: &[PairExample]) -> Result<f64> {
        mean_over_chunks(data, |chunk| {
            let mut g = Graph::<f32>::new();
            let p = g.bind(params);
            let refs: Vec<&PairExample> = chunk.iter().collect();
            let l = self.loss(&mut g, &p, &refs)?;
            Ok(g.value(l).item() as f64)
        })
    }

    pub fn accuracy(&self, params: &ParamStore, data: &[PairExample]) -> Result<f64> {
        let pred = self.predict(params, data)?;
        let gold: Vec<Option<usize>> = data.iter().map(|ex| ex.label).collect();
        let pred: Vec<Option<usize>> = pred.into_iter().map(Some).collect();
        metrics::accuracy(&gold, &pred).map_err(|e| BaselineError::Contract(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{check_param_gradients, FdOptions};
    use proptest::prelude::*;
    use rand::Rng;

    fn fd_loss<R: Real>(r: Result<Var>) -> std::result::Result<Var, AutodiffError> {
        r.map_err(|e| match e {
            BaselineError::Autodiff(a) => a,
            other => panic!("{other}"),
        })
    }

    #[test]
    fn two_word_fixture_and_oov() {
        let v = WordVectors::parse("2 3\nσπιτι 0.5 -1 2.25\nγατα 0 0.125 -3\n", "fx.vec").unwrap();
        assert_eq!((v.len(), v.dim()), (2, 3));
        assert_eq!(v.get("σπιτι").unwrap(), &[0.5, -1.0, 2.25]);
        assert_eq!(v.get("γατα").unwrap(), &[0.0, 0.125, -3.0]);
        assert_eq!(v.lookup("σκυλος"), vec![0.0; 3]);
        assert!(v.get("σκυλος").is_none());
    }

    #[test]
    fn malformed_vector_files_name_the_line() {
        let e = WordVectors::parse("2 3\na 1 2 3\nb 1 2\n", "x.vec").unwrap_err().to_string();
        assert_eq!(e, "x.vec:3: expected 3 values, found 2");
        let e = WordVectors::parse("2 3\na 1 2 3\n", "x.vec").unwrap_err().to_string();
        assert!(e.starts_with("x.vec:1: header declares 2"), "{e}");
        let e = WordVectors::parse("a 1 2\n", "x.vec").unwrap_err().to_string();
        assert!(e.starts_with("x.vec:1:"), "{e}");
        let e = WordVectors::parse("1 2\n\nb 1 zz\n", "x.vec").unwrap_err().to_string();
        assert!(e.starts_with("x.vec:3: bad number"), "{e}");
        assert!(WordVectors::parse("", "x.vec").is_err());
    }

    #[test]
    fn thousand_word_file_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dim = 12;
        let mut expected = Vec::new();
        for i in 0..1000 {
            let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
            expected.push((format!("λεξη{i}"), v));
        }
        let mut table = WordVectors::new(dim);
        for (w, v) in &expected {
            table.insert(w.clone(), v).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.vec");
        table.save(&path).unwrap();
        let loaded = WordVectors::load(&path).unwrap();
        assert_eq!(loaded.len(), 1000);
        for (w, v) in &expected {
            assert_eq!(loaded.get(w).unwrap(), v.as_slice());
        }
        assert_eq!(loaded, table);
    }

    #[test]
    fn normalized_keys_keep_the_first_collision() {
        let v = WordVectors::parse("3 1\nΣπίτι 1\nσπιτι 2\nΓάτα 3\n", "v").unwrap();
        let n = v.normalized(&NormalizationConfig::default());
        assert_eq!(n.get("σπιτι").unwrap(), &[1.0]);
        assert_eq!(n.get("γατα").unwrap(), &[3.0]);
    }

    fn cnn_store(chars: usize, dim: usize, filters: usize, width: usize, seed: u64) -> ParamStore<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        s.insert("t", Tensor::from_fn(&[chars, dim], |_| rng.random_range(-1.0..1.0)));
        s.insert("w", Tensor::from_fn(&[width * dim, filters], |_| rng.random_range(-1.0..1.0)));
        s.insert("b", Tensor::from_fn(&[filters], |_| rng.random_range(-0.5..0.5)));
        s
    }

    #[test]
    fn zero_filters_give_zero_features() {
        let mut store = cnn_store(5, 4, 6, 3, 0);
        store.insert("w", Tensor::zeros(&[12, 6]));
        store.insert("b", Tensor::zeros(&[6]));
        let mut g = Graph::<f64>::new();
        let p = g.bind(&store);
        let c = char_cnn(&mut g, p["t"], p["w"], p["b"], &[1, 2, 3, 4], 3).unwrap();
        assert_eq!(g.shape(c), &[1, 6]);
        assert!(g.value(c).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_character_uses_one_padded_window() {
        let store = cnn_store(5, 4, 6, 3, 1);
        let mut g = Graph::<f64>::new();
        let p = g.bind(&store);
        let c = char_cnn(&mut g, p["t"], p["w"], p["b"], &[2], 3).unwrap();
        let (t, w, b) = (store.get("t").unwrap(), store.get("w").unwrap(), store.get("b").unwrap());
        let mut window = vec![0.0; 12];
        window[4..8].copy_from_slice(t.row(2));
        for f in 0..6 {
            let z: f64 = (0..12).map(|k| window[k] * w.data()[k * 6 + f]).sum::<f64>() + b.data()[f];
            assert!((g.value(c).data()[f] - z.tanh()).abs() < 1e-12);
        }
        let mut g = Graph::<f64>::new();
        let p = g.bind(&store);
        assert!(matches!(char_cnn(&mut g, p["t"], p["w"], p["b"], &[], 3), Err(BaselineError::Contract(_))));
    }

    #[test]
    fn char_cnn_gradients() {
        for seed in 0..5 {
            let store = cnn_store(6, 3, 4, 3, 10 + seed);
            let ids = [[1usize, 4, 2, 5, 0].as_slice(), &[3], &[2, 2]];
            let report = check_param_gradients(
                &store,
                |g, p| {
                    let mut total = None;
                    for (k, chars) in ids.iter().enumerate() {
                        let c = fd_loss::<f64>(char_cnn(g, p["t"], p["w"], p["b"], chars, 3))?;
                        let c = g.scale(c, 1.0 + k as f64);
                        let s = g.sum(c);
                        total = Some(match total {
                            None => s,
                            Some(t) => g.add(t, s)?,
                        });
                    }
                    Ok(total.unwrap())
                },
                &FdOptions { seed, ..FdOptions::default() },
            )
            .unwrap();
            assert!(report.passed, "seed {seed}: {report:?}");
        }
    }

    fn small_tagger(hidden: usize) -> BilstmConfig {
        BilstmConfig {
            char_dim: 5,
            char_filters: 4,
            hidden,
            ..BilstmConfig::new(3, 8, 4)
        }
    }

    fn random_example(len: usize, cfg: &BilstmConfig, rng: &mut ChaCha8Rng) -> TaggingExample {
        TaggingExample {
            words: (0..len).map(|i| format!("w{i}")).collect(),
            vectors: Tensor::from_fn(&[len, cfg.word_dim], |_| rng.random_range(-1.0..1.0)),
            chars: (0..len).map(|_| (0..rng.random_range(1..5)).map(|_| rng.random_range(0..cfg.char_vocab)).collect()).collect(),
            label_ids: (0..len).map(|_| rng.random_range(0..cfg.num_labels)).collect(),
        }
    }

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Step-by-step LSTM over plain vectors.
    fn reference_direction(store: &ParamStore<f64>, prefix: &str, xs: &[Vec<f64>], h_dim: usize, backward: bool) -> Vec<Vec<f64>> {
        let wx = store.get(&format!("{prefix}.wx")).unwrap();
        let wh = store.get(&format!("{prefix}.wh")).unwrap();
        let bias = store.get(&format!("{prefix}.bias")).unwrap().data();
        let mut h = vec![0.0; h_dim];
        let mut c = vec![0.0; h_dim];
        let mut out = vec![Vec::new(); xs.len()];
        let order: Vec<usize> = if backward { (0..xs.len()).rev().collect() } else { (0..xs.len()).collect() };
        for t in order {
            let gate = |j: usize| -> f64 {
                let mut z = bias[j];
                for (k, &x) in xs[t].iter().enumerate() {
                    z += x * wx.data()[k * 4 * h_dim + j];
                }
                for (k, &hv) in h.iter().enumerate() {
                    z += hv * wh.data()[k * 4 * h_dim + j];
                }
                z
            };
            let mut new_h = vec![0.0; h_dim];
            for u in 0..h_dim {
                let i = sigmoid(gate(u));
                let f = sigmoid(gate(h_dim + u));
                let cand = gate(2 * h_dim + u).tanh();
                let o = sigmoid(gate(3 * h_dim + u));
                c[u] = f * c[u] + i * cand;
                new_h[u] = o * c[u].tanh();
            }
            h = new_h;
            out[t] = h.clone();
        }
        out
    }

    #[test]
    fn bilstm_matches_scalar_reference() {
        let cfg = small_tagger(2);
        let mut store = cfg.init(3).unwrap().cast::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (_, t) in store.iter_mut() {
            for v in t.data_mut() {
                *v += rng.random_range(-0.5..0.5);
            }
        }
        let input = cfg.word_dim + cfg.char_filters;
        let xs: Vec<Vec<f64>> = (0..2).map(|_| (0..input).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let mut g = Graph::<f64>::new();
        let p = g.bind(&store);
        let x = g.constant(Tensor::new(vec![2, input], xs.concat()).unwrap());
        let out = cfg.bilstm(&mut g, &p, x).unwrap();
        let mut layer_in = xs;
        for layer in 0..cfg.layers {
            let f = reference_direction(&store, &format!("lstm.{layer}.fwd"), &layer_in, 2, false);
            let b = reference_direction(&store, &format!("lstm.{layer}.bwd"), &layer_in, 2, true);
            layer_in = f.iter().zip(&b).map(|(f, b)| [f.as_slice(), b.as_slice()].concat()).collect();
        }
        assert_eq!(g.shape(out), &[2, 4]);
        for (got, want) in g.value(out).data().iter().zip(layer_in.concat()) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn zero_recurrent_weights_ignore_the_input() {
        let cfg = small_tagger(3);
        let mut store = cfg.init(5).unwrap().cast::<f64>();
        for (name, t) in store.iter_mut() {
            if name.starts_with("lstm.") && !name.ends_with(".bias") {
                t.data_mut().fill(0.0);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_example(4, &cfg, &mut rng);
        let b = random_example(4, &cfg, &mut rng);
        let mut g = Graph::<f64>::new();
        let p = g.bind(&store);
        let (ea, _) = cfg.emissions(&mut g, &p, &[&a]).unwrap();
        let (eb, _) = cfg.emissions(&mut g, &p, &[&b]).unwrap();
        assert_eq!(g.value(ea).data(), g.value(eb).data());
        let x = cfg.word_representations(&mut g, &p, &a).unwrap();
        let h = cfg.bilstm(&mut g, &p, x).unwrap();
        let bias = store.get("lstm.1.fwd.bias").unwrap().data();
        let first = sigmoid(bias[9]) * (sigmoid(bias[0]) * bias[6].tanh()).tanh();
        assert!((g.value(h).data()[0] - first).abs() < 1e-12);
    }

    #[test]
    fn forget_gate_bias_starts_at_one() {
        let cfg = small_tagger(3);
        let store = cfg.init(0).unwrap();
        let b = store.get("lstm.0.bwd.bias").unwrap().data();
        assert_eq!(b, &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(store.get("crf.transitions").unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn empty_sentence_is_rejected() {
        let v = WordVectors::new(3);
        let c = CharVocab::from_words(["αβ"]);
        assert!(matches!(prepare_tagging(&[], &v, &c), Err(BaselineError::Contract(_))));
        let cfg = small_tagger(2);
        let store = cfg.init(0).unwrap();
        let mut g = Graph::<f32>::new();
        let p = g.bind(&store);
        let ex = TaggingExample {
            words: vec![],
            vectors: Tensor::zeros(&[0, 3]),
            chars: vec![],
            label_ids: vec![],
        };
        assert!(matches!(cfg.loss(&mut g, &p, &[&ex]), Err(BaselineError::Contract(_))));
    }

    #[test]
    fn tagger_gradients_end_to_end() {
        let cfg = small_tagger(8);
        for seed in 0..5 {
            let mut store = cfg.init(seed).unwrap().cast::<f64>();
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            for v in store.get_mut("crf.transitions").unwrap().data_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            let batch = [random_example(3, &cfg, &mut rng), random_example(2, &cfg, &mut rng)];
            let refs: Vec<&TaggingExample> = batch.iter().collect();
            let report = check_param_gradients(
                &store,
                |g, p| fd_loss::<f64>(cfg.loss(g, p, &refs)),
                &FdOptions {
                    coords_per_tensor: 6,
                    seed,
                    ..FdOptions::default()
                },
            )
            .unwrap();
            assert!(report.passed, "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn char_vocab_serde_and_unknowns() {
        let c = CharVocab::from_words(["Γάτα", "βγ"]);
        assert_eq!(c.len(), 5);
        assert_eq!(c.ids("αβz"), vec![1, 2, 0]);
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<CharVocab>(&json).unwrap(), c);
    }

    fn dam_pair(m: usize, n: usize, dim: usize, rng: &mut ChaCha8Rng) -> PairExample {
        PairExample {
            premise: Tensor::from_fn(&[m, dim], |_| rng.random_range(-1.0..1.0)),
            hypothesis: Tensor::from_fn(&[n, dim], |_| rng.random_range(-1.0..1.0)),
            label: Some(rng.random_range(0..3)),
        }
    }

    fn small_dam() -> DamConfig {
        DamConfig { hidden: 6, ..DamConfig::new(4) }
    }

    #[test]
    fn single_words_attend_with_weight_one() {
        let cfg = small_dam();
        let store = cfg.init(1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ex = dam_pair(1, 1, 4, &mut rng);
        let mut g = Graph::<f32>::new();
        let p = g.bind(&store);
        let t = cfg.forward(&mut g, &p, &ex).unwrap();
        assert_eq!(g.value(t.premise_attention).data(), &[1.0]);
        assert_eq!(g.value(t.hypothesis_attention).data(), &[1.0]);
        assert_eq!(g.value(t.premise_aligned).data(), ex.hypothesis.data());
        assert_eq!(g.value(t.hypothesis_aligned).data(), ex.premise.data());
        assert_eq!(g.shape(t.logits), &[1, 3]);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let cfg = small_dam();
        let store = cfg.init(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let (m, n) = (rng.random_range(1..7), rng.random_range(1..7));
            let ex = dam_pair(m, n, 4, &mut rng);
            let mut g = Graph::<f32>::new();
            let p = g.bind(&store);
            let t = cfg.forward(&mut g, &p, &ex).unwrap();
            for (att, rows, cols) in [(t.premise_attention, m, n), (t.hypothesis_attention, n, m)] {
                assert_eq!(g.shape(att), &[rows, cols]);
                for r in 0..rows {
                    let s: f32 = g.value(att).row(r).iter().sum();
                    assert!((s - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn empty_side_is_rejected() {
        let v = WordVectors::random(["α"], 4, 0);
        assert!(matches!(prepare_pair("α", "  ", &v), Err(BaselineError::Contract(_))));
        let cfg = small_dam();
        let store = cfg.init(0).unwrap();
        let mut g = Graph::<f32>::new();
        let p = g.bind(&store);
        let ex = PairExample {
            premise: Tensor::zeros(&[0, 4]),
            hypothesis: Tensor::zeros(&[1, 4]),
            label: Some(0),
        };
        assert!(matches!(cfg.forward(&mut g, &p, &ex), Err(BaselineError::Contract(_))));
    }

    #[test]
    fn dam_gradients_end_to_end() {
        let cfg = small_dam();
        for seed in 0..5 {
            let store = cfg.init(seed).unwrap().cast::<f64>();
            let mut rng = ChaCha8Rng::seed_from_u64(50 + seed);
            let batch = [dam_pair(3, 2, 4, &mut rng), dam_pair(1, 4, 4, &mut rng)];
            let refs: Vec<&PairExample> = batch.iter().collect();
            let report = check_param_gradients(
                &store,
                |g, p| fd_loss::<f64>(cfg.loss(g, p, &refs)),
                &FdOptions { seed, ..FdOptions::default() },
            )
            .unwrap();
            assert!(report.passed, "seed {seed}: {report:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn hypothesis_order_leaves_s_q_unchanged(seed in 0u64..10_000, m in 1usize..6, n in 1usize..8) {
            let cfg = small_dam();
            let store = cfg.init(seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ex = dam_pair(m, n, 4, &mut rng);
            let mut order: Vec<usize> = (0..n).collect();
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
            let rows: Vec<f32> = order.iter().flat_map(|&r| ex.hypothesis.row(r).to_vec()).collect();
            let permuted = PairExample { hypothesis: Tensor::new(vec![n, 4], rows).unwrap(), ..ex.clone() };
            let mut g = Graph::<f32>::new();
            let p = g.bind(&store);
            let a = cfg.forward(&mut g, &p, &ex).unwrap();
            let b = cfg.forward(&mut g, &p, &permuted).unwrap();
            prop_assert_eq!(g.value(a.s_q).data(), g.value(b.s_q).data());
        }
    }
}
