//! Seeded toy data in a small Greek-like language.
//!
//! Every word is a stem plus a class suffix, so a word's final character
//! determines its tag, and a fixed set of templates decides which class fills
//! which slot. Stems are never shared across classes.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::finetune::{NliLabel, NliPair, TaggedSentence};
use crate::textnorm::Document;

/// Marks a contradicting hypothesis.
pub const NEGATION: &str = "δεν";

const CONSONANTS: [char; 14] = ['β', 'γ', 'δ', 'ζ', 'θ', 'κ', 'λ', 'μ', 'π', 'ρ', 'σ', 'τ', 'φ', 'χ'];
const VOWELS: [char; 5] = ['α', 'ε', 'ι', 'ο', 'υ'];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WordClass {
    Det,
    Adj,
    Noun,
    Verb,
    Adv,
}

impl WordClass {
    pub const ALL: [WordClass; 5] = [WordClass::Det, WordClass::Adj, WordClass::Noun, WordClass::Verb, WordClass::Adv];

    pub fn tag(self) -> &'static str {
        match self {
            WordClass::Det => "DET",
            WordClass::Adj => "ADJ",
            WordClass::Noun => "NOUN",
            WordClass::Verb => "VERB",
            WordClass::Adv => "ADV",
        }
    }

    pub fn suffix(self) -> &'static str {
        match self {
            WordClass::Det => "ο",
            WordClass::Adj => "ινα",
            WordClass::Noun => "ος",
            WordClass::Verb => "ει",
            WordClass::Adv => "ην",
        }
    }

    fn syllables(self) -> usize {
        if self == WordClass::Det {
            1
        } else {
            2
        }
    }
}

/// The tag implied by a word's final character.
pub fn suffix_tag(word: &str) -> Option<&'static str> {
    let last = word.chars().last()?;
    WordClass::ALL.into_iter().find(|c| c.suffix().ends_with(last)).map(WordClass::tag)
}

const TEMPLATES: [&[WordClass]; 4] = {
    use WordClass::*;
    [
        &[Det, Adj, Noun, Verb, Adv],
        &[Det, Noun, Verb, Det, Noun],
        &[Noun, Verb, Adv],
        &[Det, Adj, Noun, Verb, Det, Adj, Noun],
    ]
};

/// How a neutral hypothesis is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NeutralMode {
    /// The premise's own words in a different order.
    ShufflePremise,
    /// The words of an independently drawn sentence, shuffled.
    ShuffleOther,
}

#[derive(Debug, Clone)]
pub struct Lexicon {
    words: Vec<Vec<String>>,
}

impl Lexicon {
    /// `per_class` distinct words for each class (determiners are capped by
    /// the number of one-syllable stems).
    pub fn new(per_class: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut syllables: Vec<String> = CONSONANTS.iter().flat_map(|c| VOWELS.iter().map(move |v| format!("{c}{v}"))).collect();
        syllables.shuffle(&mut rng);
        let mut used = std::collections::HashSet::new();
        let mut words = Vec::new();
        for class in WordClass::ALL {
            let mut list = Vec::new();
            let mut attempts = 0;
            while list.len() < per_class && attempts < 10_000 {
                attempts += 1;
                let stem: String = (0..class.syllables()).map(|_| syllables.choose(&mut rng).expect("non-empty").as_str()).collect();
                if used.insert(stem.clone()) {
                    list.push(format!("{stem}{}", class.suffix()));
                }
            }
            words.push(list);
        }
        Self { words }
    }

    pub fn words(&self, class: WordClass) -> &[String] {
        &self.words[class as usize]
    }

    pub fn all_words(&self) -> impl Iterator<Item = &String> {
        self.words.iter().flatten()
    }

    fn sample<R: Rng>(&self, class: WordClass, rng: &mut R) -> String {
        self.words(class).choose(rng).expect("lexicon class is non-empty").clone()
    }

    /// One sentence from a random template.
    pub fn sentence<R: Rng>(&self, rng: &mut R) -> Vec<String> {
        let t = TEMPLATES.choose(rng).expect("templates");
        t.iter().map(|&c| self.sample(c, rng)).collect()
    }

    pub fn corpus<R: Rng>(&self, documents: usize, sentences_per_document: usize, rng: &mut R) -> Vec<Document> {
        (0..documents)
            .map(|d| {
                let sentences = (0..sentences_per_document).map(|_| self.sentence(rng).join(" ")).collect();
                Document::new(format!("doc{d}"), sentences)
            })
            .collect()
    }

    /// Grammatical sentences tagged by each word's final character.
    pub fn tagging_task<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<TaggedSentence> {
        (0..n).map(|_| tagged(self.sentence(rng))).collect()
    }

    /// Like [`Lexicon::tagging_task`], but generation stops once every
    /// lexicon word has been used at least `repeats` times. Slots are filled
    /// from the words still owed before any others.
    pub fn covering_tagging_task<R: Rng>(&self, repeats: usize, rng: &mut R) -> Vec<TaggedSentence> {
        let mut owed: Vec<Vec<String>> = self
            .words
            .iter()
            .map(|ws| {
                let mut q: Vec<String> = ws.iter().flat_map(|w| std::iter::repeat_n(w.clone(), repeats)).collect();
                q.shuffle(rng);
                q
            })
            .collect();
        let mut out = Vec::new();
        while owed.iter().any(|q| !q.is_empty()) {
            let t = TEMPLATES.choose(rng).expect("templates");
            let words = t.iter().map(|&c| owed[c as usize].pop().unwrap_or_else(|| self.sample(c, rng))).collect();
            out.push(tagged(words));
        }
        out
    }

    /// Pairs with labels cycling entailment, contradiction, neutral.
    pub fn nli_task<R: Rng>(&self, n: usize, neutral: NeutralMode, rng: &mut R) -> Vec<NliPair> {
        (0..n)
            .map(|i| {
                let premise = self.sentence(rng);
                let label = NliLabel::ALL[i % 3];
                let hypothesis = match label {
                    NliLabel::Entailment => premise.clone(),
                    NliLabel::Contradiction => negate(&premise),
                    NliLabel::Neutral => match neutral {
                        NeutralMode::ShufflePremise => shuffle_words(&premise, rng),
                        NeutralMode::ShuffleOther => shuffle_words(&self.sentence(rng), rng),
                    },
                };
                NliPair {
                    premise: premise.join(" "),
                    hypothesis: hypothesis.join(" "),
                    label,
                }
            })
            .collect()
    }
}

fn tagged(words: Vec<String>) -> TaggedSentence {
    let labels = words.iter().map(|w| suffix_tag(w).expect("lexicon word").to_string()).collect();
    TaggedSentence::new(words, labels).expect("templates are non-empty")
}

/// Inserts [`NEGATION`] before the first verb, or at the front.
pub fn negate(words: &[String]) -> Vec<String> {
    let at = words.iter().position(|w| suffix_tag(w) == Some("VERB")).unwrap_or(0);
    let mut out = words.to_vec();
    out.insert(at, NEGATION.to_string());
    out
}

/// A permutation that differs from the input whenever that is possible.
pub fn shuffle_words<R: Rng>(words: &[String], rng: &mut R) -> Vec<String> {
    let mut out = words.to_vec();
    if words.iter().all(|w| *w == words[0]) {
        return out;
    }
    while out == words {
        out.shuffle(rng);
    }
    out
}
