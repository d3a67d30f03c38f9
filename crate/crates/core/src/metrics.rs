//! Accuracy, per-class F1 and entity-level micro-F1 over BIO2 spans.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("gold has {gold} items but predictions have {pred}")]
    Length { gold: usize, pred: usize },
    #[error("no items to score")]
    Empty,
    #[error("label {0:?} is not in the class list")]
    UnknownLabel(String),
    #[error("sentence {sentence}, position {position}: {reason}")]
    MalformedBio { sentence: usize, position: usize, reason: String },
}

pub fn accuracy<T: PartialEq>(gold: &[T], pred: &[T]) -> Result<f64, MetricsError> {
    if gold.len() != pred.len() {
        return Err(MetricsError::Length {
            gold: gold.len(),
            pred: pred.len(),
        });
    }
    if gold.is_empty() {
        return Err(MetricsError::Empty);
    }
    let hits = gold.iter().zip(pred).filter(|(g, p)| g == p).count();
    Ok(hits as f64 / gold.len() as f64)
}

/// Position-level accuracy pooled over sentences.
pub fn token_accuracy<T: PartialEq>(gold: &[Vec<T>], pred: &[Vec<T>]) -> Result<f64, MetricsError> {
    if gold.len() != pred.len() {
        return Err(MetricsError::Length {
            gold: gold.len(),
            pred: pred.len(),
        });
    }
    let (mut hits, mut total) = (0usize, 0usize);
    for (g, p) in gold.iter().zip(pred) {
        if g.len() != p.len() {
            return Err(MetricsError::Length {
                gold: g.len(),
                pred: p.len(),
            });
        }
        hits += g.iter().zip(p).filter(|(a, b)| a == b).count();
        total += g.len();
    }
    if total == 0 {
        return Err(MetricsError::Empty);
    }
    Ok(hits as f64 / total as f64)
}

/// Probability that a random `higher` score exceeds a random `lower` score,
/// counting ties as one half.
pub fn rank_auc(higher: &[f64], lower: &[f64]) -> Result<f64, MetricsError> {
    if higher.is_empty() || lower.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut wins = 0.0;
    for &h in higher {
        for &l in lower {
            if h > l {
                wins += 1.0;
            } else if h == l {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (higher.len() * lower.len()) as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// `2PR / (P + R)`, or 0 when `P + R = 0`.
    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn add(&mut self, other: ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: String,
    pub counts: ConfusionCounts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Never gold and never predicted; F1 is 0 by convention.
    pub absent: bool,
}

impl ClassScore {
    fn new(class: &str, counts: ConfusionCounts) -> Self {
        Self {
            class: class.to_string(),
            counts,
            precision: counts.precision(),
            recall: counts.recall(),
            f1: counts.f1(),
            absent: counts.tp + counts.fp + counts.fn_ == 0,
        }
    }
}

/// One-vs-rest F1 for every class, in the order of `classes`.
pub fn per_class_f1<S: AsRef<str>>(gold: &[S], pred: &[S], classes: &[S]) -> Result<Vec<ClassScore>, MetricsError> {
    if gold.len() != pred.len() {
        return Err(MetricsError::Length {
            gold: gold.len(),
            pred: pred.len(),
        });
    }
    let mut counts: BTreeMap<&str, ConfusionCounts> = classes.iter().map(|c| (c.as_ref(), ConfusionCounts::default())).collect();
    for (g, p) in gold.iter().zip(pred) {
        let (g, p) = (g.as_ref(), p.as_ref());
        for l in [g, p] {
            if !counts.contains_key(l) {
                return Err(MetricsError::UnknownLabel(l.to_string()));
            }
        }
        if g == p {
            counts.get_mut(g).expect("checked").tp += 1;
        } else {
            counts.get_mut(g).expect("checked").fn_ += 1;
            counts.get_mut(p).expect("checked").fp += 1;
        }
    }
    Ok(classes.iter().map(|c| ClassScore::new(c.as_ref(), counts[c.as_ref()])).collect())
}

/// A typed span over inclusive word indices.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntitySpan {
    pub kind: String,
    pub start: usize,
    pub end: usize,
}

impl EntitySpan {
    pub fn new(kind: &str, start: usize, end: usize) -> Self {
        Self {
            kind: kind.to_string(),
            start,
            end,
        }
    }
}

enum Bio<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

fn parse_tag(tag: &str) -> Option<Bio<'_>> {
    if tag == "O" {
        return Some(Bio::Outside);
    }
    let (head, kind) = tag.split_once('-')?;
    if kind.is_empty() {
        return None;
    }
    match head {
        "B" => Some(Bio::Begin(kind)),
        "I" => Some(Bio::Inside(kind)),
        _ => None,
    }
}

/// Checks BIO2 well-formedness: every tag is `O`, `B-X` or `I-X`, and `I-X`
/// only follows `B-X` or `I-X`.
pub fn validate_bio2<S: AsRef<str>>(tags: &[S]) -> Result<(), (usize, String)> {
    let mut open: Option<&str> = None;
    for (i, t) in tags.iter().enumerate() {
        match parse_tag(t.as_ref()) {
            None => return Err((i, format!("{:?} is not a BIO2 tag", t.as_ref()))),
            Some(Bio::Outside) => open = None,
            Some(Bio::Begin(k)) => open = Some(k),
            Some(Bio::Inside(k)) => {
                if open != Some(k) {
                    return Err((i, format!("{} does not continue an entity of type {k}", t.as_ref())));
                }
            }
        }
    }
    Ok(())
}

/// Spans of a well-formed sequence.
pub fn decode_spans<S: AsRef<str>>(tags: &[S]) -> Result<Vec<EntitySpan>, (usize, String)> {
    validate_bio2(tags)?;
    Ok(decode_spans_repaired(tags))
}

/// Spans of a possibly malformed sequence. An `I-X` that does not continue an
/// `X` entity opens a new one, as if it were `B-X`; unparseable tags are
/// read as `O`.
pub fn decode_spans_repaired<S: AsRef<str>>(tags: &[S]) -> Vec<EntitySpan> {
    let mut spans = Vec::new();
    let mut open: Option<EntitySpan> = None;
    for (i, t) in tags.iter().enumerate() {
        let (starts, kind) = match parse_tag(t.as_ref()) {
            None | Some(Bio::Outside) => (false, None),
            Some(Bio::Begin(k)) => (true, Some(k)),
            Some(Bio::Inside(k)) => (open.as_ref().is_none_or(|s| s.kind != k), Some(k)),
        };
        if starts || kind.is_none() {
            spans.extend(open.take());
        }
        match (kind, &mut open) {
            (Some(_), Some(span)) => span.end = i,
            (Some(k), None) => open = Some(EntitySpan::new(k, i, i)),
            (None, _) => {}
        }
    }
    spans.extend(open);
    spans
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityScore {
    pub counts: ConfusionCounts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Neither side has any entity; scores are 1 by convention.
    pub degenerate: bool,
    pub per_type: Vec<ClassScore>,
}

/// Entity-level micro-F1 over exact `(type, start, end)` matches, pooled over
/// sentences. Gold must be well-formed; predictions are repaired.
pub fn entity_micro_f1<S: AsRef<str>>(gold: &[Vec<S>], pred: &[Vec<S>]) -> Result<EntityScore, MetricsError> {
    if gold.len() != pred.len() {
        return Err(MetricsError::Length {
            gold: gold.len(),
            pred: pred.len(),
        });
    }
    let mut total = ConfusionCounts::default();
    let mut by_type: BTreeMap<String, ConfusionCounts> = BTreeMap::new();
    for (sentence, (g, p)) in gold.iter().zip(pred).enumerate() {
        if g.len() != p.len() {
            return Err(MetricsError::Length {
                gold: g.len(),
                pred: p.len(),
            });
        }
        let gs: BTreeSet<EntitySpan> = decode_spans(g)
            .map_err(|(position, reason)| MetricsError::MalformedBio {
                sentence,
                position,
                reason,
            })?
            .into_iter()
            .collect();
        let ps: BTreeSet<EntitySpan> = decode_spans_repaired(p).into_iter().collect();
        for s in gs.union(&ps) {
            let c = by_type.entry(s.kind.clone()).or_default();
            let delta = match (gs.contains(s), ps.contains(s)) {
                (true, true) => ConfusionCounts { tp: 1, ..Default::default() },
                (true, false) => ConfusionCounts { fn_: 1, ..Default::default() },
                _ => ConfusionCounts { fp: 1, ..Default::default() },
            };
            c.add(delta);
            total.add(delta);
        }
    }
    let degenerate = total.tp + total.fp + total.fn_ == 0;
    let (precision, recall, f1) = if degenerate {
        (1.0, 1.0, 1.0)
    } else {
        (total.precision(), total.recall(), total.f1())
    };
    Ok(EntityScore {
        counts: total,
        precision,
        recall,
        f1,
        degenerate,
        per_type: by_type.iter().map(|(k, c)| ClassScore::new(k, *c)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tags(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn accuracy_extremes_and_errors() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 2, 3], &[4, 5, 6]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 2], &[1]).unwrap_err(), MetricsError::Length { gold: 2, pred: 1 });
        assert_eq!(token_accuracy(&[vec![1, 2], vec![3]], &[vec![1, 0], vec![3]]).unwrap(), 2.0 / 3.0);
    }

    #[test]
    fn auc_counts_ties_as_half() {
        assert_eq!(rank_auc(&[3.0, 4.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(rank_auc(&[1.0], &[1.0]).unwrap(), 0.5);
        assert_eq!(rank_auc(&[2.0, 0.0], &[1.0, 2.0]).unwrap(), 0.375);
        assert!(rank_auc(&[], &[1.0]).is_err());
    }

    #[test]
    fn crafted_confusion_table() {
        // Class X: TP=2, FP=1, FN=1.
        let gold = ["X", "X", "X", "Y", "Y", "Z", "Z", "Z", "Y", "Z"];
        let pred = ["X", "X", "Y", "X", "Y", "Z", "Z", "Z", "Y", "Z"];
        let scores = per_class_f1(&gold, &pred, &["X", "Y", "Z", "W"]).unwrap();
        assert_eq!(scores[0].counts, ConfusionCounts { tp: 2, fp: 1, fn_: 1 });
        assert!((scores[0].f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(scores[2].f1, 1.0);
        assert!(scores[3].absent && scores[3].f1 == 0.0);
        assert_eq!(per_class_f1(&["X"], &["Q"], &["X"]).unwrap_err(), MetricsError::UnknownLabel("Q".into()));
    }

    #[test]
    fn worked_entity_example() {
        let gold = vec![tags("O B-PER I-PER O O B-LOC")];
        let pred = vec![tags("O B-PER I-PER O O B-ORG")];
        let s = entity_micro_f1(&gold, &pred).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (0.5, 0.5, 0.5));
    }

    #[test]
    fn empty_sides_are_degenerate() {
        let s = entity_micro_f1(&[tags("O O")], &[tags("O O")]).unwrap();
        assert!(s.degenerate);
        assert_eq!(s.f1, 1.0);
    }

    #[test]
    fn gold_is_never_repaired() {
        let err = entity_micro_f1(&[tags("O I-PER")], &[tags("O O")]).unwrap_err();
        assert!(matches!(err, MetricsError::MalformedBio { sentence: 0, position: 1, .. }));
        assert!(validate_bio2(&tags("B-PER I-LOC")).is_err());
        assert!(validate_bio2(&tags("B-PER X-PER")).is_err());
        assert!(validate_bio2(&tags("B-PER I-PER O B-LOC B-LOC I-LOC")).is_ok());
    }

    #[test]
    fn predictions_are_repaired() {
        assert_eq!(decode_spans_repaired(&tags("I-PER I-PER O")), vec![EntitySpan::new("PER", 0, 1)]);
        assert_eq!(
            decode_spans_repaired(&tags("B-PER I-LOC")),
            vec![EntitySpan::new("PER", 0, 0), EntitySpan::new("LOC", 1, 1)]
        );
        assert_eq!(
            decode_spans_repaired(&tags("B-ORG B-ORG I-ORG junk I-ORG")),
            vec![EntitySpan::new("ORG", 0, 0), EntitySpan::new("ORG", 1, 2), EntitySpan::new("ORG", 4, 4)]
        );
    }

    fn tag_strategy() -> impl Strategy<Value = Vec<String>> {
        proptest::collection::vec(
            prop_oneof![Just("O"), Just("B-PER"), Just("I-PER"), Just("B-LOC"), Just("I-LOC"), Just("B-ORG")],
            1..12,
        )
        .prop_map(|v| v.into_iter().map(String::from).collect())
    }

    fn repair_gold(t: Vec<String>) -> Vec<String> {
        let spans = decode_spans_repaired(&t);
        let mut out = vec!["O".to_string(); t.len()];
        for s in spans {
            out[s.start] = format!("B-{}", s.kind);
            for x in out.iter_mut().take(s.end + 1).skip(s.start + 1) {
                *x = format!("I-{}", s.kind);
            }
        }
        out
    }

    proptest! {
        #[test]
        fn micro_f1_is_permutation_invariant(
            pairs in proptest::collection::vec((tag_strategy(), tag_strategy()), 1..6),
            rot in 0usize..6,
        ) {
            let pairs: Vec<(Vec<String>, Vec<String>)> = pairs
                .into_iter()
                .map(|(g, p)| {
                    let n = g.len().min(p.len());
                    (repair_gold(g[..n].to_vec()), p[..n].to_vec())
                })
                .collect();
            let (g, p): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
            let mut rotated = pairs.clone();
            let k = rot % rotated.len();
            rotated.rotate_left(k);
            let (g2, p2): (Vec<_>, Vec<_>) = rotated.into_iter().unzip();
            let a = entity_micro_f1(&g, &p).unwrap();
            let b = entity_micro_f1(&g2, &p2).unwrap();
            prop_assert_eq!(a.counts, b.counts);

            // Restricting to one type reproduces that type's score.
            for t in &a.per_type {
                let keep = |s: &Vec<String>| -> Vec<String> {
                    s.iter().map(|x| if x.ends_with(&t.class) { x.clone() } else { "O".into() }).collect()
                };
                let gk: Vec<_> = g.iter().map(keep).collect();
                let pk: Vec<_> = p.iter().map(|s| {
                    // Apply the repair first so that removing other types
                    // cannot change how this type's spans are read.
                    repair_gold(s.clone())
                }).map(|s| keep(&s)).collect();
                let r = entity_micro_f1(&gk, &pk).unwrap();
                prop_assert_eq!(r.counts, t.counts);
                prop_assert!((r.f1 - t.f1).abs() < 1e-12);
            }
        }
    }
}
