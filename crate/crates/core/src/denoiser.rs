//! Pseudo-perplexity scoring of sentence pairs and retention of the
//! best-scoring fraction.
//!
//! A pair is encoded as `[CLS] premise [SEP] hypothesis [SEP]`. Every
//! position other than `[CLS]`/`[SEP]` is masked in turn, and the pair's
//! score is `exp` of the mean cross-entropy of the true tokens.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, ParamStore};
use crate::bert::{self, BertConfig, SeqInput};
use crate::finetune::{encode_pair, FinetuneError, NliPair};
use crate::tokenizer::{Vocabulary, CLS_ID, MASK_ID, SEP_ID};

#[derive(Debug, Error)]
pub enum DenoiseError {
    #[error("pair has no scorable tokens")]
    NoTokens,
    #[error("keep fraction {0} is outside (0, 1]")]
    Fraction(f64),
    #[error("nothing to select from")]
    Empty,
    #[error("model: {0}")]
    Model(String),
    #[error(transparent)]
    Encode(#[from] FinetuneError),
}

/// One masked copy of a sequence and the token hidden at `position`.
#[derive(Debug, Clone)]
pub struct MaskQuery {
    pub ids: Vec<u32>,
    pub segment_ids: Vec<u8>,
    pub position: usize,
    pub target: u32,
}

pub trait MaskedLanguageModel {
    /// Natural-log probability of each query's target at its position.
    fn target_log_probs(&self, queries: &[MaskQuery]) -> Result<Vec<f64>, DenoiseError>;
}

/// The masked-token head of an encoder checkpoint, evaluated without
/// dropout.
pub struct BertMlm<'a> {
    pub config: BertConfig,
    pub params: &'a ParamStore,
}

impl MaskedLanguageModel for BertMlm<'_> {
    fn target_log_probs(&self, queries: &[MaskQuery]) -> Result<Vec<f64>, DenoiseError> {
        if queries.is_empty() {
            return Ok(Vec::new());
        }
        let model = |e: bert::BertError| DenoiseError::Model(e.to_string());
        let mut g = Graph::<f32>::new();
        let p = g.bind(self.params);
        let inputs: Vec<SeqInput> = queries.iter().map(|q| SeqInput::new(&q.ids, &q.segment_ids, q.ids.len())).collect();
        let enc = bert::encode(&mut g, &p, &self.config, &inputs, false).map_err(model)?;
        let rows: Vec<usize> = queries.iter().enumerate().map(|(b, q)| enc.row(b, q.position)).collect();
        let logits = bert::mlm_logits(&mut g, &p, enc.hidden, &rows).map_err(|e| DenoiseError::Model(e.to_string()))?;
        let v = g.value(logits);
        Ok(queries
            .iter()
            .enumerate()
            .map(|(r, q)| {
                let row: Vec<f64> = v.row(r).iter().map(|&x| x as f64).collect();
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                row[q.target as usize] - lse
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoringMode {
    /// One forward pass per masked position.
    Sequential,
    /// All masked copies in one forward pass.
    Batched,
}

/// Every masked copy of a sequence, one per scorable position.
pub fn mask_queries(ids: &[u32], segment_ids: &[u8]) -> Vec<MaskQuery> {
    ids.iter()
        .enumerate()
        .filter(|(_, &id)| id != CLS_ID && id != SEP_ID)
        .map(|(position, &target)| {
            let mut masked = ids.to_vec();
            masked[position] = MASK_ID;
            MaskQuery {
                ids: masked,
                segment_ids: segment_ids.to_vec(),
                position,
                target,
            }
        })
        .collect()
}

/// `(ppl, token_count)` of an encoded sequence.
pub fn sequence_pseudo_perplexity<M: MaskedLanguageModel + ?Sized>(
    ids: &[u32],
    segment_ids: &[u8],
    model: &M,
    mode: ScoringMode,
) -> Result<(f64, usize), DenoiseError> {
    let queries = mask_queries(ids, segment_ids);
    if queries.is_empty() {
        return Err(DenoiseError::NoTokens);
    }
    let log_probs = match mode {
        ScoringMode::Batched => model.target_log_probs(&queries)?,
        ScoringMode::Sequential => {
            let mut out = Vec::with_capacity(queries.len());
            for q in &queries {
                out.extend(model.target_log_probs(std::slice::from_ref(q))?);
            }
            out
        }
    };
    let mean_ce = -log_probs.iter().sum::<f64>() / log_probs.len() as f64;
    Ok((mean_ce.exp(), queries.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub pair: NliPair,
    pub token_count: usize,
    pub ppl: f64,
}

pub fn pseudo_perplexity<M: MaskedLanguageModel + ?Sized>(
    pair: &NliPair,
    model: &M,
    vocab: &Vocabulary,
    max_positions: usize,
    mode: ScoringMode,
) -> Result<ScoredPair, DenoiseError> {
    let enc = encode_pair(&pair.premise, &pair.hypothesis, vocab, max_positions)?;
    let (ppl, token_count) = sequence_pseudo_perplexity(&enc.ids, &enc.segment_ids, model, mode)?;
    Ok(ScoredPair {
        pair: pair.clone(),
        token_count,
        ppl,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub total: usize,
    pub kept: usize,
    pub fraction: f64,
    /// Highest retained score.
    pub threshold_ppl: f64,
    pub mean_ppl_all: f64,
    pub mean_ppl_kept: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Retained items in ascending score order; ties keep input order.
    pub retained: Vec<ScoredPair>,
    /// Input indices of the retained items, in the same order.
    pub indices: Vec<usize>,
    pub report: SelectionReport,
}

/// `⌈fraction · n⌉`, treating products within 1e-9 of an integer as that
/// integer so that e.g. `0.3 · 10` keeps 3.
pub fn keep_count(fraction: f64, n: usize) -> Result<usize, DenoiseError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DenoiseError::Fraction(fraction));
    }
    let x = fraction * n as f64;
    let k = if (x - x.round()).abs() < 1e-9 { x.round() } else { x.ceil() };
    Ok(k as usize)
}

/// Keeps the lowest-perplexity `⌈fraction · n⌉` pairs.
pub fn select_top_fraction(scored: &[ScoredPair], fraction: f64) -> Result<Selection, DenoiseError> {
    let k = keep_count(fraction, scored.len())?;
    if scored.is_empty() {
        return Err(DenoiseError::Empty);
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[a].ppl.total_cmp(&scored[b].ppl));
    order.truncate(k);
    let retained: Vec<ScoredPair> = order.iter().map(|&i| scored[i].clone()).collect();
    let mean = |xs: &[ScoredPair]| xs.iter().map(|s| s.ppl).sum::<f64>() / xs.len() as f64;
    Ok(Selection {
        report: SelectionReport {
            total: scored.len(),
            kept: k,
            fraction,
            threshold_ppl: retained.last().map_or(f64::NAN, |s| s.ppl),
            mean_ppl_all: mean(scored),
            mean_ppl_kept: mean(&retained),
        },
        retained,
        indices: order,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::finetune::NliLabel;
    use crate::textnorm::{Document, NormalizationConfig};
    use crate::tokenizer::{train_bpe, TrainerConfig};
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Oracle;

    impl MaskedLanguageModel for Oracle {
        fn target_log_probs(&self, queries: &[MaskQuery]) -> Result<Vec<f64>, DenoiseError> {
            Ok(vec![0.0; queries.len()])
        }
    }

    struct Uniform(usize);

    impl MaskedLanguageModel for Uniform {
        fn target_log_probs(&self, queries: &[MaskQuery]) -> Result<Vec<f64>, DenoiseError> {
            Ok(vec![-(self.0 as f64).ln(); queries.len()])
        }
    }

    fn vocab() -> Vocabulary {
        let docs = vec![Document::new("d", vec!["ο σκυλος τρεχει".into(), "η γατα κοιμαται".into()])];
        train_bpe(&docs, &TrainerConfig { vocab_size: 60, min_char_freq: 1 }, NormalizationConfig::default()).unwrap()
    }

    fn pair(p: &str, h: &str) -> NliPair {
        NliPair { premise: p.into(), hypothesis: h.into(), label: NliLabel::Neutral }
    }

    fn scored(ppls: &[f64]) -> Vec<ScoredPair> {
        ppls.iter().enumerate().map(|(i, &ppl)| ScoredPair { pair: pair(&format!("p{i}"), "h"), token_count: 1, ppl }).collect()
    }

    #[test]
    fn certain_model_scores_one_and_uniform_scores_v() {
        let v = vocab();
        let p = pair("ο σκυλος", "η γατα");
        for mode in [ScoringMode::Sequential, ScoringMode::Batched] {
            let s = pseudo_perplexity(&p, &Oracle, &v, 32, mode).unwrap();
            assert_eq!(s.ppl, 1.0);
            assert_eq!(s.token_count, v.encode("ο σκυλος").len() + v.encode("η γατα").len());
            let u = pseudo_perplexity(&p, &Uniform(v.len()), &v, 32, mode).unwrap();
            assert!((u.ppl - v.len() as f64).abs() < 1e-9 * v.len() as f64);
        }
        assert!(matches!(sequence_pseudo_perplexity(&[CLS_ID, SEP_ID], &[0, 0], &Oracle, ScoringMode::Batched), Err(DenoiseError::NoTokens)));
    }

    #[test]
    fn queries_mask_exactly_one_position() {
        let qs = mask_queries(&[CLS_ID, 7, 8, SEP_ID, 9, SEP_ID], &[0, 0, 0, 0, 1, 1]);
        assert_eq!(qs.iter().map(|q| q.position).collect::<Vec<_>>(), vec![1, 2, 4]);
        for q in &qs {
            assert_eq!(q.ids.iter().filter(|&&i| i == MASK_ID).count(), 1);
            assert_eq!(q.ids[q.position], MASK_ID);
        }
        assert_eq!(qs.iter().map(|q| q.target).collect::<Vec<_>>(), vec![7, 8, 9]);
    }

    #[test]
    fn batched_sequential_and_shuffled_orders_agree() {
        let v = vocab();
        let cfg = BertConfig { layers: 2, hidden: 16, heads: 2, intermediate: 32, max_positions: 32, vocab_size: v.len(), dropout: 0.1, type_vocab: 2 };
        let params = bert::init_weights(&cfg, 7).unwrap();
        let model = BertMlm { config: cfg, params: &params };
        let p = pair("ο σκυλος τρεχει", "η γατα κοιμαται");
        let seq = pseudo_perplexity(&p, &model, &v, 32, ScoringMode::Sequential).unwrap();
        let bat = pseudo_perplexity(&p, &model, &v, 32, ScoringMode::Batched).unwrap();
        assert!((seq.ppl - bat.ppl).abs() <= 1e-5 * seq.ppl, "{} vs {}", seq.ppl, bat.ppl);
        assert!(seq.ppl >= 1.0);
        let again = pseudo_perplexity(&p, &model, &v, 32, ScoringMode::Batched).unwrap();
        assert_eq!(again.ppl, bat.ppl);

        let enc = encode_pair(&p.premise, &p.hypothesis, &v, 32).unwrap();
        let mut qs = mask_queries(&enc.ids, &enc.segment_ids);
        qs.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
        let lp = model.target_log_probs(&qs).unwrap();
        let shuffled = (-lp.iter().sum::<f64>() / lp.len() as f64).exp();
        assert!((shuffled - bat.ppl).abs() <= 1e-5 * bat.ppl);
    }

    #[test]
    fn selection_examples() {
        let s = scored(&[5.0, 1.0, 9.0, 2.0, 8.0, 3.0, 7.0, 4.0, 6.0, 10.0]);
        let sel = select_top_fraction(&s, 0.3).unwrap();
        assert_eq!(sel.indices, vec![1, 3, 5]);
        assert_eq!(sel.report.threshold_ppl, 3.0);
        let all = select_top_fraction(&s, 1.0).unwrap();
        assert_eq!(all.retained.len(), 10);
        assert!(all.retained.windows(2).all(|w| w[0].ppl <= w[1].ppl));
        for bad in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(select_top_fraction(&s, bad), Err(DenoiseError::Fraction(_))));
        }
        assert!(matches!(select_top_fraction(&[], 0.5), Err(DenoiseError::Empty)));
        let ties = scored(&[2.0, 1.0, 2.0, 2.0]);
        assert_eq!(select_top_fraction(&ties, 0.75).unwrap().indices, vec![1, 0, 2]);
    }

    proptest! {
        #[test]
        fn selection_matches_sort_oracle_and_nests(ppls in proptest::collection::vec(1.0f64..50.0, 1..40), f1 in 0.01f64..1.0, f2 in 0.01f64..1.0) {
            let s = scored(&ppls);
            let (lo, hi) = if f1 <= f2 { (f1, f2) } else { (f2, f1) };
            let a = select_top_fraction(&s, lo).unwrap();
            let b = select_top_fraction(&s, hi).unwrap();
            let mut oracle: Vec<(f64, usize)> = ppls.iter().cloned().zip(0..).collect();
            oracle.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap().then(x.1.cmp(&y.1)));
            let k = (lo * ppls.len() as f64 - 1e-9).ceil() as usize;
            prop_assert_eq!(a.indices.clone(), oracle[..k].iter().map(|x| x.1).collect::<Vec<_>>());
            prop_assert!(a.indices.iter().all(|i| b.indices.contains(i)));
        }
    }
}
