//! Byte-pair-encoding vocabulary training, encoding and decoding.
//!
//! Words are whitespace-delimited. Each word is split into characters and the
//! first character is fused with the word marker (`▁`), so `"λογος"` starts
//! out as `["▁λ", "ο", "γ", "ο", "ς"]`. Training greedily merges the most
//! frequent adjacent pair (ties go to the lexicographically smaller
//! `(left, right)`), and encoding replays the recorded merges in rank order.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::path::Path;

use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::textnorm::{normalize, Document, NormalizationConfig};

pub const WORD_MARKER: &str = "\u{2581}";
pub const VOCAB_FORMAT_VERSION: u32 = 1;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const MASK_ID: u32 = 4;
pub const NUM_SPECIALS: u32 = 5;

pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("corpus contains no words")]
    EmptyCorpus,
    #[error("vocabulary size {requested} is too small: the corpus needs at least {minimum} ({base} base symbols + 5 specials + 1 merge)")]
    VocabTooSmall {
        requested: usize,
        minimum: usize,
        base: usize,
    },
    #[error("invalid token id {id} at position {position}")]
    InvalidToken { position: usize, id: u32 },
    #[error("malformed vocabulary: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// An encoded piece sequence. `word_starts[i]` is true for the first piece of
/// every word, which is also where the word marker sits (unless the piece is
/// the unknown token).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub pieces: Vec<String>,
    pub word_starts: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn push(&mut self, id: u32, piece: &str, word_start: bool) {
        self.ids.push(id);
        self.pieces.push(piece.to_string());
        self.word_starts.push(word_start);
    }

    fn extend_from(&mut self, other: TokenSequence) {
        self.ids.extend(other.ids);
        self.pieces.extend(other.pieces);
        self.word_starts.extend(other.word_starts);
    }
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    n_base: usize,
    merges: Vec<(String, String)>,
    /// (left id, right id) -> (rank, merged id)
    merge_ranks: HashMap<(u32, u32), (u32, u32)>,
    word_marker: String,
    normalizer: NormalizationConfig,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens
            && self.merges == other.merges
            && self.word_marker == other.word_marker
            && self.normalizer == other.normalizer
    }
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn word_marker(&self) -> &str {
        &self.word_marker
    }

    pub fn normalizer(&self) -> &NormalizationConfig {
        &self.normalizer
    }

    pub fn is_special(id: u32) -> bool {
        id < NUM_SPECIALS
    }

    /// A copy keeping only the first `n` merges, as if training had stopped
    /// early.
    pub fn with_merge_prefix(&self, n: usize) -> Vocabulary {
        let merges: Vec<(String, String)> = self.merges.iter().take(n).cloned().collect();
        let start = NUM_SPECIALS as usize;
        let base = self.tokens[start..start + self.n_base].to_vec();
        Self::assemble(base, merges, self.word_marker.clone(), self.normalizer)
            .expect("prefix of a valid vocabulary is valid")
    }

    /// Builds a vocabulary from its base symbols and merge list. Ids are
    /// assigned specials first, then base symbols in the given order, then
    /// merge outputs in merge order (duplicates reuse the existing id).
    fn assemble(
        base: Vec<String>,
        merges: Vec<(String, String)>,
        word_marker: String,
        normalizer: NormalizationConfig,
    ) -> Result<Self, TokenizerError> {
        let n_base = base.len();
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(base);
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(TokenizerError::Malformed(format!("duplicate token {t:?}")));
            }
        }
        let mut merge_ranks = HashMap::new();
        for (rank, (l, r)) in merges.iter().enumerate() {
            let (Some(&li), Some(&ri)) = (index.get(l), index.get(r)) else {
                return Err(TokenizerError::Malformed(format!(
                    "merge {rank} ({l:?}, {r:?}) uses an unknown symbol"
                )));
            };
            let joined = format!("{l}{r}");
            let id = match index.get(&joined) {
                Some(&id) => id,
                None => {
                    let id = tokens.len() as u32;
                    tokens.push(joined.clone());
                    index.insert(joined, id);
                    id
                }
            };
            merge_ranks.entry((li, ri)).or_insert((rank as u32, id));
        }
        Ok(Self {
            tokens,
            index,
            n_base,
            merges,
            merge_ranks,
            word_marker,
            normalizer,
        })
    }

    /// Encodes text into pieces. No `[CLS]`/`[SEP]` are added.
    pub fn encode(&self, text: &str) -> TokenSequence {
        let text = normalize(text, &self.normalizer);
        let mut out = TokenSequence::default();
        for word in text.split_whitespace() {
            out.extend_from(self.encode_word(word));
        }
        out
    }

    /// Encodes one whitespace-free word.
    pub fn encode_word(&self, word: &str) -> TokenSequence {
        let mut symbols: Vec<u32> = Vec::with_capacity(word.len());
        for (i, sym) in word_symbols(word, &self.word_marker).iter().enumerate() {
            let id = self.index.get(sym).copied().unwrap_or(UNK_ID);
            // A maximal run of unknown characters becomes a single UNK.
            if id == UNK_ID && i > 0 && symbols.last() == Some(&UNK_ID) {
                continue;
            }
            symbols.push(id);
        }
        self.apply_merges(&mut symbols);
        let mut out = TokenSequence::default();
        for (i, &id) in symbols.iter().enumerate() {
            out.push(id, &self.tokens[id as usize], i == 0);
        }
        out
    }

    /// Replays merges in rank order: repeatedly apply the lowest-ranked merge
    /// above the last applied rank to all of its occurrences, left to right.
    fn apply_merges(&self, symbols: &mut Vec<u32>) {
        let mut floor: Option<u32> = None;
        loop {
            let mut best: Option<(u32, u32)> = None;
            for w in symbols.windows(2) {
                if let Some(&(rank, new_id)) = self.merge_ranks.get(&(w[0], w[1])) {
                    if floor.is_some_and(|f| rank <= f) {
                        continue;
                    }
                    if best.is_none_or(|(b, _)| rank < b) {
                        best = Some((rank, new_id));
                    }
                }
            }
            let Some((rank, new_id)) = best else { break };
            let (l, r) = {
                let (l, r) = &self.merges[rank as usize];
                (self.index[l], self.index[r])
            };
            merge_pair(symbols, l, r, new_id);
            floor = Some(rank);
        }
    }

    /// Rebuilds text from pieces. Words are joined with single spaces.
    pub fn decode(&self, tokens: &TokenSequence) -> Result<String, TokenizerError> {
        let mut out = String::new();
        for (position, &id) in tokens.ids.iter().enumerate() {
            if id as usize >= self.tokens.len() || (Self::is_special(id) && id != UNK_ID) {
                return Err(TokenizerError::InvalidToken { position, id });
            }
            let piece = &self.tokens[id as usize];
            let starts_word = match piece.strip_prefix(self.word_marker.as_str()) {
                Some(_) => true,
                None => id == UNK_ID && tokens.word_starts.get(position).copied().unwrap_or(false),
            };
            if starts_word && !out.is_empty() {
                out.push(' ');
            }
            out.push_str(piece.strip_prefix(self.word_marker.as_str()).unwrap_or(piece));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String, TokenizerError> {
        let file = VocabFile {
            format_version: VOCAB_FORMAT_VERSION,
            normalizer: self.normalizer,
            specials: Specials::default(),
            word_marker: self.word_marker.clone(),
            merges: self.merges.iter().map(|(l, r)| [l.clone(), r.clone()]).collect(),
            tokens: TokenTable(self.tokens.clone()),
        };
        let mut s = serde_json::to_string_pretty(&file)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(json: &str) -> Result<Self, TokenizerError> {
        let file: VocabFile = serde_json::from_str(json)?;
        if file.format_version != VOCAB_FORMAT_VERSION {
            return Err(TokenizerError::Malformed(format!(
                "unsupported format_version {}",
                file.format_version
            )));
        }
        if file.specials != Specials::default() {
            return Err(TokenizerError::Malformed("unexpected special token ids".into()));
        }
        let tokens = file.tokens.0;
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(TokenizerError::Malformed(format!("id {i} must be {s}")));
            }
        }
        let merges: Vec<(String, String)> = file.merges.into_iter().map(|[l, r]| (l, r)).collect();
        let merged: HashSet<String> = merges.iter().map(|(l, r)| format!("{l}{r}")).collect();
        // Base symbols are the non-special tokens no merge produces; they
        // must precede every merge output for the ids to line up.
        let n_base = tokens[NUM_SPECIALS as usize..]
            .iter()
            .take_while(|t| !merged.contains(*t))
            .count();
        let base = tokens[NUM_SPECIALS as usize..NUM_SPECIALS as usize + n_base].to_vec();
        let vocab = Self::assemble(base, merges, file.word_marker, file.normalizer)?;
        if vocab.tokens != tokens {
            return Err(TokenizerError::Malformed(
                "token ids disagree with the merge table".into(),
            ));
        }
        Ok(vocab)
    }
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    format_version: u32,
    normalizer: NormalizationConfig,
    specials: Specials,
    word_marker: String,
    merges: Vec<[String; 2]>,
    tokens: TokenTable,
}

#[derive(Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
struct Specials {
    pad: u32,
    unk: u32,
    cls: u32,
    sep: u32,
    mask: u32,
}

impl Default for Specials {
    fn default() -> Self {
        Self {
            pad: PAD_ID,
            unk: UNK_ID,
            cls: CLS_ID,
            sep: SEP_ID,
            mask: MASK_ID,
        }
    }
}

/// `{token: id}` written in id order.
struct TokenTable(Vec<String>);

impl Serialize for TokenTable {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(self.0.len()))?;
        for (i, t) in self.0.iter().enumerate() {
            map.serialize_entry(t, &i)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for TokenTable {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let map: HashMap<String, usize> = HashMap::deserialize(deserializer)?;
        let mut tokens = vec![None; map.len()];
        for (t, id) in map {
            match tokens.get_mut(id) {
                Some(slot @ None) => *slot = Some(t),
                Some(Some(_)) => return Err(D::Error::custom(format!("duplicate id {id}"))),
                None => return Err(D::Error::custom(format!("token ids are not dense: {id}"))),
            }
        }
        Ok(TokenTable(tokens.into_iter().map(Option::unwrap).collect()))
    }
}

/// Splits a word into its base symbols, fusing the marker into the first.
pub fn word_symbols(word: &str, marker: &str) -> Vec<String> {
    word.chars()
        .enumerate()
        .map(|(i, c)| {
            if i == 0 {
                format!("{marker}{c}")
            } else {
                c.to_string()
            }
        })
        .collect()
}

/// Replaces every non-overlapping `(left, right)` occurrence, left to right.
fn merge_pair(symbols: &mut Vec<u32>, left: u32, right: u32, merged: u32) -> bool {
    let mut changed = false;
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(merged);
            i += 2;
            changed = true;
        } else {
            out.push(symbols[i]);
            i += 1;
        }
    }
    *symbols = out;
    changed
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainerConfig {
    pub vocab_size: usize,
    pub min_char_freq: u64,
}

#[derive(PartialEq, Eq)]
struct Candidate {
    count: i64,
    left: String,
    right: String,
    pair: (u32, u32),
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.count
            .cmp(&other.count)
            .then_with(|| other.left.cmp(&self.left))
            .then_with(|| other.right.cmp(&self.right))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Counts whitespace words after normalization, sorted by word.
pub fn word_counts(corpus: &[Document], normalizer: &NormalizationConfig) -> Vec<(String, u64)> {
    let mut counts: HashMap<String, u64> = HashMap::new();
    for doc in corpus {
        for sentence in &doc.sentences {
            for w in normalize(sentence, normalizer).split_whitespace() {
                *counts.entry(w.to_string()).or_default() += 1;
            }
        }
    }
    let mut v: Vec<(String, u64)> = counts.into_iter().collect();
    v.sort();
    v
}

/// Trains a BPE vocabulary. Sentences pass through `normalizer` first, as
/// they do in [`Vocabulary::encode`].
pub fn train_bpe(
    corpus: &[Document],
    config: &TrainerConfig,
    normalizer: NormalizationConfig,
) -> Result<Vocabulary, TokenizerError> {
    let marker = WORD_MARKER.to_string();
    let words = word_counts(corpus, &normalizer);
    if words.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }

    let mut symbol_freq: HashMap<String, u64> = HashMap::new();
    let word_syms: Vec<Vec<String>> = words.iter().map(|(w, _)| word_symbols(w, &marker)).collect();
    for (syms, (_, count)) in word_syms.iter().zip(&words) {
        for s in syms {
            *symbol_freq.entry(s.clone()).or_default() += count;
        }
    }
    let mut base: Vec<String> = symbol_freq
        .into_iter()
        .filter(|(_, f)| *f >= config.min_char_freq)
        .map(|(s, _)| s)
        .collect();
    base.sort();
    let minimum = base.len() + NUM_SPECIALS as usize + 1;
    if config.vocab_size < minimum {
        return Err(TokenizerError::VocabTooSmall {
            requested: config.vocab_size,
            minimum,
            base: base.len(),
        });
    }

    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(base.iter().cloned());
    let mut index: HashMap<String, u32> = tokens
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i as u32))
        .collect();

    let counts: Vec<i64> = words.iter().map(|(_, c)| *c as i64).collect();
    let mut seqs: Vec<Vec<u32>> = word_syms
        .iter()
        .map(|syms| {
            let mut ids: Vec<u32> = Vec::with_capacity(syms.len());
            for s in syms {
                let id = index.get(s).copied().unwrap_or(UNK_ID);
                if !(id == UNK_ID && ids.last() == Some(&UNK_ID)) {
                    ids.push(id);
                }
            }
            ids
        })
        .collect();

    let mut pair_counts: HashMap<(u32, u32), i64> = HashMap::new();
    let mut occurrences: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
    for (wi, seq) in seqs.iter().enumerate() {
        for p in pairs(seq) {
            *pair_counts.entry(p).or_default() += counts[wi];
            occurrences.entry(p).or_default().insert(wi);
        }
    }
    let candidate = |pair: (u32, u32), count: i64, tokens: &[String]| Candidate {
        count,
        left: tokens[pair.0 as usize].clone(),
        right: tokens[pair.1 as usize].clone(),
        pair,
    };
    let mut heap: BinaryHeap<Candidate> = pair_counts
        .iter()
        .map(|(&p, &c)| candidate(p, c, &tokens))
        .collect();

    let mut merges: Vec<(String, String)> = Vec::new();
    while tokens.len() < config.vocab_size {
        let Some(top) = heap.pop() else { break };
        if pair_counts.get(&top.pair).copied().unwrap_or(0) != top.count {
            continue;
        }
        if top.count < 2 {
            break;
        }
        let (l, r) = top.pair;
        let joined = format!("{}{}", top.left, top.right);
        let new_id = match index.get(&joined) {
            Some(&id) => id,
            None => {
                let id = tokens.len() as u32;
                tokens.push(joined.clone());
                index.insert(joined, id);
                id
            }
        };
        merges.push((top.left, top.right));

        let mut affected: Vec<usize> = occurrences.remove(&top.pair).unwrap_or_default().into_iter().collect();
        affected.sort_unstable();
        let mut touched: HashSet<(u32, u32)> = HashSet::new();
        for wi in affected {
            let before = pairs(&seqs[wi]);
            if !merge_pair(&mut seqs[wi], l, r, new_id) {
                continue;
            }
            for p in before {
                *pair_counts.get_mut(&p).expect("counted pair") -= counts[wi];
                touched.insert(p);
            }
            for p in pairs(&seqs[wi]) {
                *pair_counts.entry(p).or_default() += counts[wi];
                occurrences.entry(p).or_default().insert(wi);
                touched.insert(p);
            }
        }
        pair_counts.remove(&top.pair);
        let mut touched: Vec<_> = touched.into_iter().collect();
        touched.sort_unstable();
        for p in touched {
            match pair_counts.get(&p).copied() {
                Some(c) if c > 0 => heap.push(candidate(p, c, &tokens)),
                Some(_) => {
                    pair_counts.remove(&p);
                }
                None => {}
            }
        }
    }

    Vocabulary::assemble(base, merges, marker, normalizer)
}

fn pairs(seq: &[u32]) -> Vec<(u32, u32)> {
    seq.windows(2)
        .filter(|w| w[0] != UNK_ID && w[1] != UNK_ID)
        .map(|w| (w[0], w[1]))
        .collect()
}

/// Sub-word pieces over whitespace words, kept as an exact ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FragmentationRatio {
    pub pieces: u64,
    pub words: u64,
}

impl FragmentationRatio {
    pub fn value(&self) -> f64 {
        self.pieces as f64 / self.words as f64
    }
}

/// Average number of pieces per whitespace word.
pub fn fragmentation_ratio(
    corpus: &[Document],
    vocab: &Vocabulary,
) -> Result<FragmentationRatio, TokenizerError> {
    let mut pieces = 0u64;
    let mut words = 0u64;
    for doc in corpus {
        for sentence in &doc.sentences {
            let normalized = normalize(sentence, vocab.normalizer());
            for w in normalized.split_whitespace() {
                words += 1;
                pieces += vocab.encode_word(w).len() as u64;
            }
        }
    }
    if words == 0 {
        return Err(TokenizerError::EmptyCorpus);
    }
    Ok(FragmentationRatio { pieces, words })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn docs(lines: &[&str]) -> Vec<Document> {
        vec![Document::new("d", lines.iter().map(|s| s.to_string()).collect())]
    }

    fn train(lines: &[&str], vocab_size: usize) -> Vocabulary {
        train_bpe(
            &docs(lines),
            &TrainerConfig { vocab_size, min_char_freq: 1 },
            NormalizationConfig::default(),
        )
        .unwrap()
    }

    /// Recounts every pair from scratch each round.
    fn oracle_merges(corpus: &[Document], vocab_size: usize) -> Vec<(String, String)> {
        let mut words: Vec<(Vec<String>, u64)> = word_counts(corpus, &NormalizationConfig::default())
            .into_iter()
            .map(|(w, c)| (word_symbols(&w, WORD_MARKER), c))
            .collect();
        let mut token_set: HashSet<String> = words.iter().flat_map(|(s, _)| s.clone()).collect();
        let mut merges = Vec::new();
        while token_set.len() + 5 < vocab_size {
            let mut counts: HashMap<(String, String), u64> = HashMap::new();
            for (syms, c) in &words {
                for w in syms.windows(2) {
                    *counts.entry((w[0].clone(), w[1].clone())).or_default() += c;
                }
            }
            let best = counts
                .into_iter()
                .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
            let Some(((l, r), c)) = best else { break };
            if c < 2 {
                break;
            }
            for (syms, _) in &mut words {
                let mut out = Vec::new();
                let mut i = 0;
                while i < syms.len() {
                    if i + 1 < syms.len() && syms[i] == l && syms[i + 1] == r {
                        out.push(format!("{l}{r}"));
                        i += 2;
                    } else {
                        out.push(syms[i].clone());
                        i += 1;
                    }
                }
                *syms = out;
            }
            token_set.insert(format!("{l}{r}"));
            merges.push((l, r));
        }
        merges
    }

    /// Replays every merge, in training order, over the word.
    fn replay_segmentation(vocab: &Vocabulary, word: &str) -> Vec<String> {
        let mut syms = word_symbols(word, WORD_MARKER);
        for (l, r) in vocab.merges() {
            let mut out = Vec::new();
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && &syms[i] == l && &syms[i + 1] == r {
                    out.push(format!("{l}{r}"));
                    i += 2;
                } else {
                    out.push(syms[i].clone());
                    i += 1;
                }
            }
            syms = out;
        }
        syms
    }

    fn random_corpus(rng: &mut ChaCha8Rng) -> Vec<Document> {
        let alphabet: Vec<char> = "αβγδεζ".chars().take(rng.random_range(2..=6)).collect();
        let n_words = rng.random_range(1..=30);
        let words: Vec<String> = (0..n_words)
            .map(|_| {
                let len = rng.random_range(1..=6);
                (0..len).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect()
            })
            .collect();
        vec![Document::new("r", vec![words.join(" ")])]
    }

    #[test]
    fn single_pair_corpus_merges_once() {
        let v = train(&["αα αα"], 5 + 2 + 1);
        assert_eq!(v.merges(), &[(format!("{WORD_MARKER}α"), "α".to_string())]);
        assert!(v.id(&format!("{WORD_MARKER}αα")).is_some());
        assert_eq!(v.len(), 8);
    }

    #[test]
    fn ties_go_to_the_smaller_pair() {
        // (▁α, β) and (▁γ, δ) both occur three times.
        let v = train(&["γδ γδ γδ αβ αβ αβ"], 5 + 4 + 1);
        assert_eq!(v.merges()[0], (format!("{WORD_MARKER}α"), "β".to_string()));
    }

    #[test]
    fn too_small_vocab_reports_minimum() {
        let err = train_bpe(
            &docs(&["αβ γ"]),
            &TrainerConfig { vocab_size: 6, min_char_freq: 1 },
            NormalizationConfig::default(),
        )
        .unwrap_err();
        match err {
            TokenizerError::VocabTooSmall { minimum, base, .. } => {
                assert_eq!(base, 3);
                assert_eq!(minimum, 9);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn empty_corpus_rejected() {
        let err = train_bpe(
            &[Document::new("x", vec!["   ".into()])],
            &TrainerConfig { vocab_size: 100, min_char_freq: 1 },
            NormalizationConfig::default(),
        );
        assert!(matches!(err, Err(TokenizerError::EmptyCorpus)));
    }

    #[test]
    fn trainer_matches_recount_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let corpus = random_corpus(&mut rng);
            let n_base = word_counts(&corpus, &NormalizationConfig::default())
                .iter()
                .flat_map(|(w, _)| word_symbols(w, WORD_MARKER))
                .collect::<HashSet<_>>()
                .len();
            let size = 5 + n_base + rng.random_range(1..=20);
            let v = train_bpe(
                &corpus,
                &TrainerConfig { vocab_size: size, min_char_freq: 1 },
                NormalizationConfig::default(),
            )
            .unwrap();
            assert_eq!(v.merges(), oracle_merges(&corpus, size).as_slice());
        }
    }

    #[test]
    fn encode_matches_replay_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..30 {
            let corpus = random_corpus(&mut rng);
            let v = train_bpe(
                &corpus,
                &TrainerConfig { vocab_size: 60, min_char_freq: 1 },
                NormalizationConfig::default(),
            )
            .unwrap();
            let alphabet: Vec<char> = corpus[0].sentences[0].chars().filter(|c| *c != ' ').collect();
            for _ in 0..20 {
                let len = rng.random_range(1..=8);
                let word: String = (0..len).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect();
                // Only words whose base symbols are all known are comparable.
                if word_symbols(&word, WORD_MARKER).iter().any(|s| v.id(s).is_none()) {
                    continue;
                }
                assert_eq!(v.encode_word(&word).pieces, replay_segmentation(&v, &word), "{word}");
            }
        }
    }

    #[test]
    fn in_vocab_word_is_one_piece() {
        let v = train(&["λογος λογος λογος λογος"], 200);
        assert_eq!(v.encode("λογος").len(), 1);
    }

    #[test]
    fn unseen_word_fragments() {
        let v = train(
            &["κατα την ημερα γορ ρου μενος ο κοσμος ηταν ωραιος και μεγαλος κατω"],
            60,
        );
        let seq = v.encode("κατηγορουμενος");
        assert!(seq.len() > 1, "{:?}", seq.pieces);
        assert!(!seq.ids.contains(&UNK_ID));
    }

    #[test]
    fn unknown_runs_collapse_to_one_unk() {
        let v = train(&["αβ αβ αβ"], 20);
        let seq = v.encode("αxyβ zz");
        assert_eq!(seq.ids, vec![v.id(&format!("{WORD_MARKER}α")).unwrap(), UNK_ID, v.id("β").unwrap(), UNK_ID]);
        assert_eq!(seq.word_starts, vec![true, false, false, true]);
        assert_eq!(v.decode(&seq).unwrap(), "α[UNK]β [UNK]");
    }

    #[test]
    fn min_char_freq_excludes_rare_symbols() {
        let v = train_bpe(
            &docs(&["αβ αβ αβ αγ"]),
            &TrainerConfig { vocab_size: 50, min_char_freq: 2 },
            NormalizationConfig::default(),
        )
        .unwrap();
        assert!(v.id("γ").is_none());
        assert_eq!(v.encode("αγ").ids.last(), Some(&UNK_ID));
    }

    #[test]
    fn decode_edge_cases() {
        let v = train(&["αβ αβ"], 20);
        assert_eq!(v.decode(&TokenSequence::default()).unwrap(), "");
        let bad = TokenSequence {
            ids: vec![5, CLS_ID],
            pieces: vec![],
            word_starts: vec![],
        };
        assert!(matches!(v.decode(&bad), Err(TokenizerError::InvalidToken { position: 1, id: CLS_ID })));
        let oob = TokenSequence {
            ids: vec![999],
            pieces: vec![],
            word_starts: vec![],
        };
        assert!(matches!(v.decode(&oob), Err(TokenizerError::InvalidToken { position: 0, id: 999 })));
    }

    #[test]
    fn fragmentation_on_crafted_fixture() {
        // "αβ" is a single token, "γδ" is not: 3 words of one piece, one of three.
        // Base {▁α, ▁β, α, β}; the single merge builds ▁αβ.
        let v = train(&["αβ αβ αβ βα"], 10);
        assert_eq!(v.merges().len(), 1);
        let fixture = docs(&["αβ αβ", "αβ αββ"]);
        let r = fragmentation_ratio(&fixture, &v).unwrap();
        assert_eq!((r.pieces, r.words), (5, 4));
        let fixture = docs(&["αβ αβ αβ βαα"]);
        let r = fragmentation_ratio(&fixture, &v).unwrap();
        assert_eq!((r.pieces, r.words), (6, 4));
        assert_eq!(r.value(), 1.5);
        let all_in = fragmentation_ratio(&docs(&["αβ αβ"]), &v).unwrap();
        assert_eq!(all_in.value(), 1.0);
        assert!(matches!(fragmentation_ratio(&docs(&[" "]), &v), Err(TokenizerError::EmptyCorpus)));
    }

    #[test]
    fn vocabulary_json_round_trip_is_byte_identical() {
        let v = train(&["καλημερα κοσμε", "καλη μερα", "κοσμος καλος"], 40);
        let json = v.to_json().unwrap();
        let back = Vocabulary::from_json(&json).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.to_json().unwrap(), json);
        let again = train(&["καλημερα κοσμε", "καλη μερα", "κοσμος καλος"], 40);
        assert_eq!(again.to_json().unwrap(), json);
    }

    #[test]
    fn corrupted_vocabulary_rejected() {
        let v = train(&["αβ αβ"], 20);
        let json = v.to_json().unwrap().replace("\"[UNK]\": 1", "\"[UNK]\": 9");
        assert!(Vocabulary::from_json(&json).is_err());
    }

    #[test]
    fn merge_prefix_is_nested() {
        let v = train(&["καλημερα κοσμε", "καλη μερα", "κοσμος καλος καλος"], 40);
        let small = v.with_merge_prefix(3);
        assert_eq!(small.merges(), &v.merges()[..3]);
        let trained_small = train(&["καλημερα κοσμε", "καλη μερα", "κοσμος καλος καλος"], small.len());
        assert_eq!(trained_small, small);
    }

    proptest! {
        #[test]
        fn pieces_bounded_by_characters(words in proptest::collection::vec("[αβγδε]{1,7}", 1..12)) {
            let text = words.join(" ");
            let v = train_bpe(&docs(&[&text]), &TrainerConfig { vocab_size: 40, min_char_freq: 1 }, NormalizationConfig::default()).unwrap();
            for w in &words {
                let n = v.encode_word(w).len();
                prop_assert!(n >= 1 && n <= w.chars().count());
            }
            let seq = v.encode(&text);
            prop_assert_eq!(v.decode(&seq).unwrap(), text);
        }

        #[test]
        fn fragmentation_is_monotone_in_merges(words in proptest::collection::vec("[αβγδε]{1,7}", 1..20), k in 0usize..30) {
            let corpus = docs(&[&words.join(" ")]);
            let big = train_bpe(&corpus, &TrainerConfig { vocab_size: 80, min_char_freq: 1 }, NormalizationConfig::default()).unwrap();
            let small = big.with_merge_prefix(k.min(big.merges().len()));
            let rb = fragmentation_ratio(&corpus, &big).unwrap().value();
            let rs = fragmentation_ratio(&corpus, &small).unwrap().value();
            prop_assert!(rb <= rs);
        }
    }
}
