//! Greek text normalization and corpus segmentation.
//!
//! Normalization runs canonical decomposition, drops combining marks, applies
//! context-sensitive lowercasing (so a word-final capital sigma becomes `ς`)
//! and recomposes. Corpora are plain UTF-8 files with one sentence per line
//! and blank lines between documents.

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TextError {
    #[error("invalid UTF-8 at byte offset {offset}")]
    Decode { offset: usize },
    #[error("corpus contains no non-empty documents")]
    EmptyCorpus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum UnicodeForm {
    #[default]
    Composed,
    Decomposed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizationConfig {
    pub strip_diacritics: bool,
    pub lowercase: bool,
    pub unicode_form: UnicodeForm,
}

impl Default for NormalizationConfig {
    fn default() -> Self {
        Self {
            strip_diacritics: true,
            lowercase: true,
            unicode_form: UnicodeForm::Composed,
        }
    }
}

/// Normalizes `text` under `config`. The result is a fixed point:
/// `normalize(&normalize(x, c), c) == normalize(x, c)`.
pub fn normalize(text: &str, config: &NormalizationConfig) -> String {
    let mut out: String = text.nfd().collect();
    if config.strip_diacritics {
        out = strip_marks(&out);
    }
    if config.lowercase {
        out = out.to_lowercase();
        // Lowercasing can itself emit combining marks (U+0130 -> i + U+0307).
        out = out.nfd().collect();
        if config.strip_diacritics {
            out = strip_marks(&out);
        }
    }
    match config.unicode_form {
        UnicodeForm::Composed => out.nfc().collect(),
        UnicodeForm::Decomposed => out.nfd().collect(),
    }
}

/// Decodes `bytes` as UTF-8 and normalizes the result.
pub fn normalize_bytes(bytes: &[u8], config: &NormalizationConfig) -> Result<String, TextError> {
    Ok(normalize(decode_utf8(bytes)?, config))
}

fn strip_marks(s: &str) -> String {
    s.chars().filter(|&c| !is_combining_mark(c)).collect()
}

fn decode_utf8(bytes: &[u8]) -> Result<&str, TextError> {
    std::str::from_utf8(bytes).map_err(|e| TextError::Decode {
        offset: e.valid_up_to(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub source_id: String,
    pub sentences: Vec<String>,
}

impl Document {
    pub fn new(source_id: impl Into<String>, sentences: Vec<String>) -> Self {
        Self {
            source_id: source_id.into(),
            sentences,
        }
    }
}

/// Splits a raw corpus into normalized documents.
///
/// Lines that are empty after normalization and trimming are dropped, and so
/// are documents left without sentences. Whitespace-only lines count as
/// document boundaries.
pub fn segment_corpus(raw: &[u8], config: &NormalizationConfig) -> Result<Vec<Document>, TextError> {
    let text = decode_utf8(raw)?;
    let mut docs = Vec::new();
    let mut current: Vec<String> = Vec::new();
    let flush = |current: &mut Vec<String>, docs: &mut Vec<Document>| {
        if !current.is_empty() {
            let id = format!("doc-{}", docs.len());
            docs.push(Document::new(id, std::mem::take(current)));
        }
    };
    for line in text.split('\n') {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            flush(&mut current, &mut docs);
            continue;
        }
        let normalized = normalize(line, config);
        let trimmed = normalized.trim();
        if !trimmed.is_empty() {
            current.push(trimmed.to_string());
        }
    }
    flush(&mut current, &mut docs);
    if docs.is_empty() {
        return Err(TextError::EmptyCorpus);
    }
    Ok(docs)
}

/// Writes documents back in the corpus file format.
pub fn serialize_corpus(docs: &[Document]) -> String {
    let mut out = String::new();
    for (i, doc) in docs.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for s in &doc.sentences {
            out.push_str(s);
            out.push('\n');
        }
    }
    out
}

/// Optional helper that splits running text after `.`, `;` and `·`.
///
/// The Greek question mark (U+037E) and ano teleia (U+0387) are canonically
/// equivalent to `;` and `·` (U+00B7), so they are covered as well.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    for c in text.chars() {
        current.push(c);
        if matches!(c, '.' | ';' | '·' | '\u{037E}' | '\u{0387}') {
            let s = current.trim();
            if !s.is_empty() {
                out.push(s.to_string());
            }
            current.clear();
        }
    }
    let s = current.trim();
    if !s.is_empty() {
        out.push(s.to_string());
    }
    out
}
