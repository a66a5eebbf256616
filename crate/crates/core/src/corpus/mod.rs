//! Data model: utterances, slot spans, annotations, label spaces.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod bio;
pub mod dataset;
pub mod rules;
pub mod synth;
pub mod vocab;

pub use bio::{bio_to_spans, repair_bio, spans_to_bio, Tag, TagSequence};
pub use dataset::{parse_columns, parse_dataset, parse_records, write_records, Dataset};
pub use rules::{Rule, RuleSet};
pub use synth::{generate_synthetic, SynthSizes, SyntheticCorpus, SyntheticGrammar};
pub use vocab::{build_vocab, Vocab};

/// Lowercase + whitespace split.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub text: String,
    pub tokens: Vec<String>,
}

impl Utterance {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        let tokens = tokenize(&text);
        if tokens.is_empty() {
            return Err(Error::Precondition("utterance has no tokens".into()));
        }
        Ok(Utterance {
            id: id.into(),
            text,
            tokens,
        })
    }

    pub fn from_tokens(id: impl Into<String>, tokens: Vec<String>) -> Result<Self> {
        Utterance::new(id, tokens.join(" "))
    }

    /// Lowercased tokens joined by single spaces.
    pub fn normalized(&self) -> String {
        self.tokens.join(" ")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Inclusive token range carrying a slot label.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SlotSpan {
    pub label: String,
    pub start: usize,
    pub end: usize,
}

impl SlotSpan {
    pub fn new(label: impl Into<String>, start: usize, end: usize) -> Self {
        SlotSpan {
            label: label.into(),
            start,
            end,
        }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl fmt::Display for SlotSpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}-{}", self.label, self.start, self.end)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Annotation {
    pub intent: String,
    pub slots: Vec<SlotSpan>,
}

impl Annotation {
    pub fn new(intent: impl Into<String>, slots: Vec<SlotSpan>) -> Self {
        Annotation {
            intent: intent.into(),
            slots,
        }
    }

    /// Checks range, ordering and non-overlap of the spans.
    pub fn validate(&self, n_tokens: usize) -> Result<()> {
        let mut prev_end: Option<usize> = None;
        for s in &self.slots {
            if s.start > s.end || s.end >= n_tokens {
                return Err(Error::Invariant(format!(
                    "span {s} out of range for {n_tokens} tokens"
                )));
            }
            if let Some(pe) = prev_end {
                if s.start <= pe {
                    return Err(Error::Invariant(format!(
                        "span {s} overlaps or is out of order"
                    )));
                }
            }
            prev_end = Some(s.end);
        }
        Ok(())
    }

    /// Grouping key used by clean logit pairing: intent plus the sorted
    /// multiset of slot labels.
    pub fn label_key(&self) -> (String, Vec<String>) {
        let mut labels: Vec<String> = self.slots.iter().map(|s| s.label.clone()).collect();
        labels.sort();
        (self.intent.clone(), labels)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Clean,
    Augmented,
    Adversarial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub utterance: Utterance,
    pub annotation: Annotation,
    pub origin: Origin,
    pub weight: f32,
}

impl LabeledExample {
    pub fn clean(utterance: Utterance, annotation: Annotation) -> Self {
        LabeledExample {
            utterance,
            annotation,
            origin: Origin::Clean,
            weight: 1.0,
        }
    }

    pub fn new(utterance: Utterance, annotation: Annotation, origin: Origin, weight: f32) -> Result<Self> {
        if !(weight > 0.0) || !weight.is_finite() {
            return Err(Error::Precondition(format!("example weight must be > 0, got {weight}")));
        }
        if origin == Origin::Clean && weight != 1.0 {
            return Err(Error::Precondition("clean examples carry weight 1.0".into()));
        }
        annotation.validate(utterance.len())?;
        Ok(LabeledExample {
            utterance,
            annotation,
            origin,
            weight,
        })
    }
}

/// Intents, slot labels and the derived BIO tag set with index maps.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    intents: Vec<String>,
    slot_labels: Vec<String>,
    #[serde(skip)]
    intent_index: HashMap<String, usize>,
    #[serde(skip)]
    slot_index: HashMap<String, usize>,
}

impl LabelSpace {
    /// Labels are deduplicated and kept in sorted order.
    pub fn new<I, J, A, B>(intents: I, slot_labels: J) -> Result<Self>
    where
        I: IntoIterator<Item = A>,
        J: IntoIterator<Item = B>,
        A: Into<String>,
        B: Into<String>,
    {
        let intents: BTreeSet<String> = intents.into_iter().map(Into::into).collect();
        let slots: BTreeSet<String> = slot_labels.into_iter().map(Into::into).collect();
        if intents.is_empty() {
            return Err(Error::NoTrainingData);
        }
        let mut ls = LabelSpace {
            intents: intents.into_iter().collect(),
            slot_labels: slots.into_iter().collect(),
            intent_index: HashMap::new(),
            slot_index: HashMap::new(),
        };
        ls.reindex();
        Ok(ls)
    }

    pub fn from_examples(examples: &[LabeledExample]) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::NoTrainingData);
        }
        LabelSpace::new(
            examples.iter().map(|e| e.annotation.intent.clone()),
            examples
                .iter()
                .flat_map(|e| e.annotation.slots.iter().map(|s| s.label.clone())),
        )
    }

    /// Rebuilds the lookup maps; needed after deserialization.
    pub fn reindex(&mut self) {
        self.intent_index = self.intents.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect();
        self.slot_index = self.slot_labels.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect();
    }

    pub fn intents(&self) -> &[String] {
        &self.intents
    }

    pub fn slot_labels(&self) -> &[String] {
        &self.slot_labels
    }

    pub fn num_intents(&self) -> usize {
        self.intents.len()
    }

    pub fn num_tags(&self) -> usize {
        2 * self.slot_labels.len() + 1
    }

    pub fn intent_id(&self, intent: &str) -> Option<usize> {
        self.intent_index.get(intent).copied()
    }

    pub fn slot_id(&self, label: &str) -> Option<usize> {
        self.slot_index.get(label).copied()
    }

    /// `O` → 0, `B-ℓ` → 1 + 2·idx(ℓ), `I-ℓ` → 2 + 2·idx(ℓ).
    pub fn tag_id(&self, tag: &Tag) -> Option<usize> {
        match tag {
            Tag::O => Some(0),
            Tag::B(l) => self.slot_id(l).map(|i| 1 + 2 * i),
            Tag::I(l) => self.slot_id(l).map(|i| 2 + 2 * i),
        }
    }

    pub fn tag(&self, id: usize) -> Option<Tag> {
        if id == 0 {
            return Some(Tag::O);
        }
        let label = self.slot_labels.get((id - 1) / 2)?.clone();
        Some(if id % 2 == 1 { Tag::B(label) } else { Tag::I(label) })
    }

    pub fn tag_set(&self) -> Vec<Tag> {
        (0..self.num_tags()).filter_map(|i| self.tag(i)).collect()
    }

    /// Verifies that every label in `ann` is known.
    pub fn check(&self, ann: &Annotation, line: usize) -> Result<()> {
        if self.intent_id(&ann.intent).is_none() {
            return Err(Error::UnknownLabel {
                label: ann.intent.clone(),
                kind: "intent",
                line,
            });
        }
        for s in &ann.slots {
            if self.slot_id(&s.label).is_none() {
                return Err(Error::UnknownLabel {
                    label: s.label.clone(),
                    kind: "slot",
                    line,
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenization_lowercases_and_splits() {
        let u = Utterance::new("u1", "What's the  weather in Sydney today").unwrap();
        assert_eq!(u.tokens, ["what's", "the", "weather", "in", "sydney", "today"]);
        assert_eq!(u.normalized(), "what's the weather in sydney today");
        assert!(Utterance::new("e", "   ").is_err());
    }

    #[test]
    fn label_space_indices_are_bijective() {
        let ls = LabelSpace::new(["b", "a", "a"], ["x", "y", "z"]).unwrap();
        assert_eq!(ls.intents(), ["a", "b"]);
        assert_eq!(ls.num_tags(), 7);
        for i in 0..ls.num_tags() {
            let t = ls.tag(i).unwrap();
            assert_eq!(ls.tag_id(&t), Some(i));
        }
        assert!(ls.tag(7).is_none());
    }

    #[test]
    fn annotation_validation() {
        let ok = Annotation::new("w", vec![SlotSpan::new("a", 0, 1), SlotSpan::new("b", 2, 2)]);
        ok.validate(3).unwrap();
        assert!(ok.validate(2).is_err());
        let overlap = Annotation::new("w", vec![SlotSpan::new("a", 0, 1), SlotSpan::new("b", 1, 2)]);
        assert!(overlap.validate(3).is_err());
    }

    #[test]
    fn clean_examples_weigh_one() {
        let u = Utterance::new("1", "hi there").unwrap();
        let a = Annotation::new("greet", vec![]);
        assert!(LabeledExample::new(u.clone(), a.clone(), Origin::Clean, 0.1).is_err());
        assert!(LabeledExample::new(u, a, Origin::Augmented, 0.1).is_ok());
    }
}
