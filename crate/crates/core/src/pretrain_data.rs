//! Sentence-pair instances for masked-token and next-sentence pre-training.
//!
//! An instance is laid out as `[CLS] S1 [SEP] S2 [SEP] [PAD]...`, padded to
//! `max_len`. Masking is a separate pass so that the same pairs can be
//! masked under different policies.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::textnorm::Document;
use crate::tokenizer::{Vocabulary, CLS_ID, MASK_ID, NUM_SPECIALS, PAD_ID, SEP_ID};

/// Shortest sequence length that leaves room for both segments.
pub const MIN_MAX_LEN: usize = 8;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("max_len {0} is below the minimum of {MIN_MAX_LEN}")]
    MaxLenTooSmall(usize),
    #[error("negative sampling needs at least two documents, got {0}")]
    NotEnoughDocuments(usize),
    #[error("no document has two consecutive sentences")]
    NoPairs,
    #[error("invalid masking policy: {0}")]
    Policy(String),
    #[error("instance is already masked")]
    AlreadyMasked,
    #[error("instance has no maskable positions")]
    NothingToMask,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NspLabel {
    IsNext,
    NotNext,
}

impl NspLabel {
    pub fn class(self) -> usize {
        match self {
            NspLabel::IsNext => 0,
            NspLabel::NotNext => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PretrainInstance {
    pub ids: Vec<u32>,
    pub segment_ids: Vec<u8>,
    pub mlm_positions: Vec<usize>,
    pub mlm_labels: Vec<u32>,
    pub nsp_label: NspLabel,
    pub attention_length: usize,
}

impl PretrainInstance {
    /// Packs two segments, which must already fit in `max_len - 3`.
    pub fn pack(s1: &[u32], s2: &[u32], max_len: usize, nsp_label: NspLabel) -> Self {
        debug_assert!(s1.len() + s2.len() + 3 <= max_len);
        let mut ids = Vec::with_capacity(max_len);
        let mut segment_ids = Vec::with_capacity(max_len);
        ids.push(CLS_ID);
        ids.extend_from_slice(s1);
        ids.push(SEP_ID);
        segment_ids.resize(ids.len(), 0);
        ids.extend_from_slice(s2);
        ids.push(SEP_ID);
        segment_ids.resize(ids.len(), 1);
        let attention_length = ids.len();
        ids.resize(max_len, PAD_ID);
        segment_ids.resize(max_len, 0);
        Self {
            ids,
            segment_ids,
            mlm_positions: Vec::new(),
            mlm_labels: Vec::new(),
            nsp_label,
            attention_length,
        }
    }

    /// Positions that may be masked: real tokens other than `[CLS]`/`[SEP]`.
    pub fn eligible_positions(&self) -> Vec<usize> {
        (0..self.attention_length)
            .filter(|&i| self.ids[i] != CLS_ID && self.ids[i] != SEP_ID)
            .collect()
    }

    /// The ids before masking.
    pub fn original_ids(&self) -> Vec<u32> {
        let mut ids = self.ids.clone();
        for (&p, &l) in self.mlm_positions.iter().zip(&self.mlm_labels) {
            ids[p] = l;
        }
        ids
    }

    /// Checks the layout and masking invariants.
    pub fn validate(&self, max_len: usize) -> Result<(), String> {
        let n = self.attention_length;
        if self.ids.len() != max_len || self.segment_ids.len() != max_len {
            return Err(format!("length {} / {} != {max_len}", self.ids.len(), self.segment_ids.len()));
        }
        if n < 5 || n > max_len {
            return Err(format!("attention_length {n} out of range"));
        }
        let original = self.original_ids();
        let seps: Vec<usize> = (0..n).filter(|&i| original[i] == SEP_ID).collect();
        if original[0] != CLS_ID || seps.len() != 2 || seps[1] != n - 1 || seps[0] < 2 || seps[0] + 2 > seps[1] {
            return Err("layout is not [CLS] S1 [SEP] S2 [SEP]".into());
        }
        if original[1..n].contains(&CLS_ID) || original[n..].iter().any(|&id| id != PAD_ID) {
            return Err("stray special token".into());
        }
        for (i, &s) in self.segment_ids.iter().enumerate() {
            let expected = u8::from(i > seps[0] && i < n);
            if s != expected {
                return Err(format!("segment id {s} at position {i}"));
            }
        }
        if self.mlm_positions.len() != self.mlm_labels.len() {
            return Err("mlm positions and labels differ in length".into());
        }
        if !self.mlm_positions.windows(2).all(|w| w[0] < w[1]) {
            return Err("mlm positions are not strictly increasing".into());
        }
        for &p in &self.mlm_positions {
            if p == 0 || p >= n || seps.contains(&p) {
                return Err(format!("mlm position {p} is not maskable"));
            }
        }
        Ok(())
    }
}

/// Trims the longer segment from its end until both fit in `budget`; on
/// equal lengths the first segment is trimmed.
pub fn truncate_pair(s1: &mut Vec<u32>, s2: &mut Vec<u32>, budget: usize) {
    while s1.len() + s2.len() > budget {
        if s1.len() >= s2.len() {
            s1.pop();
        } else {
            s2.pop();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairConfig {
    pub max_len: usize,
    pub negative_prob: f64,
    pub seed: u64,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            max_len: 128,
            negative_prob: 0.5,
            seed: 0,
        }
    }
}

/// Builds one unmasked instance for every sentence that has a successor in
/// its document.
pub fn build_sentence_pairs(
    documents: &[Document],
    vocab: &Vocabulary,
    config: &PairConfig,
) -> Result<Vec<PretrainInstance>, DataError> {
    if config.max_len < MIN_MAX_LEN {
        return Err(DataError::MaxLenTooSmall(config.max_len));
    }
    if config.negative_prob > 0.0 && documents.len() < 2 {
        return Err(DataError::NotEnoughDocuments(documents.len()));
    }
    let encoded: Vec<Vec<Vec<u32>>> = documents
        .iter()
        .map(|d| d.sentences.iter().map(|s| vocab.encode(s).ids).collect())
        .collect();
    let mut offsets = Vec::with_capacity(encoded.len() + 1);
    offsets.push(0usize);
    for d in &encoded {
        offsets.push(offsets.last().unwrap() + d.len());
    }
    let total = *offsets.last().unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let budget = config.max_len - 3;
    let mut out = Vec::new();
    for (d, sentences) in encoded.iter().enumerate() {
        for i in 0..sentences.len().saturating_sub(1) {
            let negative = config.negative_prob > 0.0 && rng.random::<f64>() < config.negative_prob;
            let (mut s1, mut s2, label) = if negative {
                let others = total - sentences.len();
                if others == 0 {
                    return Err(DataError::NotEnoughDocuments(1));
                }
                let mut r = rng.random_range(0..others);
                if r >= offsets[d] {
                    r += sentences.len();
                }
                let od = offsets.partition_point(|&o| o <= r) - 1;
                let s2 = encoded[od][r - offsets[od]].clone();
                (sentences[i].clone(), s2, NspLabel::NotNext)
            } else {
                (sentences[i].clone(), sentences[i + 1].clone(), NspLabel::IsNext)
            };
            if s1.is_empty() || s2.is_empty() {
                continue;
            }
            truncate_pair(&mut s1, &mut s2, budget);
            out.push(PretrainInstance::pack(&s1, &s2, config.max_len, label));
        }
    }
    if out.is_empty() {
        return Err(DataError::NoPairs);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskingPolicy {
    pub select_prob: f64,
    pub mask_frac: f64,
    pub random_frac: f64,
    pub keep_frac: f64,
    pub rng_seed: u64,
    /// Select one position at random when the draw selected none.
    pub force_one: bool,
}

impl Default for MaskingPolicy {
    fn default() -> Self {
        Self {
            select_prob: 0.15,
            mask_frac: 0.8,
            random_frac: 0.1,
            keep_frac: 0.1,
            rng_seed: 0,
            force_one: true,
        }
    }
}

impl MaskingPolicy {
    pub fn validate(&self) -> Result<(), DataError> {
        let fracs = [self.mask_frac, self.random_frac, self.keep_frac];
        if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) || (fracs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(DataError::Policy(format!("replacement fractions {fracs:?} must sum to 1")));
        }
        if !(self.select_prob > 0.0 && self.select_prob < 1.0) {
            return Err(DataError::Policy(format!("select_prob {} must be in (0, 1)", self.select_prob)));
        }
        Ok(())
    }
}

/// What happened to one selected position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskAction {
    Mask,
    Random,
    Keep,
}

/// Selects and corrupts positions. Random replacements are drawn uniformly
/// from the non-special ids `5..vocab_size`.
pub fn apply_mlm_masking<R: Rng>(
    instance: &PretrainInstance,
    policy: &MaskingPolicy,
    vocab_size: usize,
    rng: &mut R,
) -> Result<PretrainInstance, DataError> {
    Ok(apply_mlm_masking_traced(instance, policy, vocab_size, rng)?.0)
}

/// [`apply_mlm_masking`], also returning the action taken at each selected
/// position.
pub fn apply_mlm_masking_traced<R: Rng>(
    instance: &PretrainInstance,
    policy: &MaskingPolicy,
    vocab_size: usize,
    rng: &mut R,
) -> Result<(PretrainInstance, Vec<MaskAction>), DataError> {
    if !instance.mlm_positions.is_empty() {
        return Err(DataError::AlreadyMasked);
    }
    if vocab_size <= NUM_SPECIALS as usize {
        return Err(DataError::Policy(format!("vocabulary of {vocab_size} has no ordinary tokens")));
    }
    let eligible = instance.eligible_positions();
    let mut selected: Vec<usize> = eligible
        .iter()
        .copied()
        .filter(|_| rng.random::<f64>() < policy.select_prob)
        .collect();
    if selected.is_empty() && policy.force_one {
        if eligible.is_empty() {
            return Err(DataError::NothingToMask);
        }
        selected.push(eligible[rng.random_range(0..eligible.len())]);
    }
    let mut out = instance.clone();
    let mut actions = Vec::with_capacity(selected.len());
    for &p in &selected {
        out.mlm_labels.push(instance.ids[p]);
        let r: f64 = rng.random();
        let action = if r < policy.mask_frac {
            out.ids[p] = MASK_ID;
            MaskAction::Mask
        } else if r < policy.mask_frac + policy.random_frac {
            out.ids[p] = rng.random_range(NUM_SPECIALS..vocab_size as u32);
            MaskAction::Random
        } else {
            MaskAction::Keep
        };
        actions.push(action);
    }
    out.mlm_positions = selected;
    Ok((out, actions))
}

/// Masks every instance with one generator seeded from `policy.rng_seed`.
pub fn mask_instances(
    instances: &[PretrainInstance],
    policy: &MaskingPolicy,
    vocab_size: usize,
) -> Result<Vec<PretrainInstance>, DataError> {
    policy.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(policy.rng_seed);
    instances
        .iter()
        .map(|i| apply_mlm_masking(i, policy, vocab_size, &mut rng))
        .collect()
}

pub fn write_instances(instances: &[PretrainInstance], path: &Path) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    for inst in instances {
        serde_json::to_writer(&mut w, inst).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a JSON-lines file. Blank lines are skipped; line numbers in errors
/// start at 1.
pub fn read_instances(path: &Path) -> Result<Vec<PretrainInstance>, DataError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| DataError::Parse { line: i + 1, msg };
        let inst: PretrainInstance = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if inst.ids.len() != inst.segment_ids.len() || inst.mlm_positions.len() != inst.mlm_labels.len() {
            return Err(parse_err("field lengths disagree".into()));
        }
        if inst.attention_length > inst.ids.len() || inst.mlm_positions.iter().any(|&p| p >= inst.ids.len()) {
            return Err(parse_err("position out of range".into()));
        }
        out.push(inst);
    }
    Ok(out)
}
