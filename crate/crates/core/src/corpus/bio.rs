use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Annotation, SlotSpan};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tag {
    O,
    B(String),
    I(String),
}

pub type TagSequence = Vec<Tag>;

impl Tag {
    pub fn label(&self) -> Option<&str> {
        match self {
            Tag::O => None,
            Tag::B(l) | Tag::I(l) => Some(l),
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tag::O => f.write_str("O"),
            Tag::B(l) => write!(f, "B-{l}"),
            Tag::I(l) => write!(f, "I-{l}"),
        }
    }
}

impl FromStr for Tag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "O" => Ok(Tag::O),
            _ => match s.split_once('-') {
                Some(("B", l)) if !l.is_empty() => Ok(Tag::B(l.to_string())),
                Some(("I", l)) if !l.is_empty() => Ok(Tag::I(l.to_string())),
                _ => Err(Error::Parse {
                    line: 0,
                    message: format!("malformed BIO tag `{s}`"),
                }),
            },
        }
    }
}

/// B- at each span start, I- inside, O elsewhere.
pub fn spans_to_bio(ann: &Annotation, n_tokens: usize) -> Result<TagSequence> {
    ann.validate(n_tokens)?;
    let mut tags = vec![Tag::O; n_tokens];
    for s in &ann.slots {
        tags[s.start] = Tag::B(s.label.clone());
        for t in &mut tags[s.start + 1..=s.end] {
            *t = Tag::I(s.label.clone());
        }
    }
    Ok(tags)
}

/// Promotes every `I-ℓ` that does not continue a `B-ℓ`/`I-ℓ` run to `B-ℓ`.
pub fn repair_bio(tags: &[Tag]) -> TagSequence {
    let mut out: TagSequence = Vec::with_capacity(tags.len());
    for tag in tags {
        let fixed = match tag {
            Tag::I(l) => {
                let continues = matches!(out.last(), Some(Tag::B(p) | Tag::I(p)) if p == l);
                if continues {
                    tag.clone()
                } else {
                    Tag::B(l.clone())
                }
            }
            _ => tag.clone(),
        };
        out.push(fixed);
    }
    out
}

/// Total conversion; ill-formed sequences are repaired first.
pub fn bio_to_spans(tags: &[Tag]) -> Vec<SlotSpan> {
    let tags = repair_bio(tags);
    let mut spans: Vec<SlotSpan> = Vec::new();
    for (i, tag) in tags.iter().enumerate() {
        match tag {
            Tag::O => {}
            Tag::B(l) => spans.push(SlotSpan::new(l.clone(), i, i)),
            Tag::I(_) => {
                if let Some(last) = spans.last_mut() {
                    last.end = i;
                }
            }
        }
    }
    spans
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tags(s: &str) -> TagSequence {
        s.split_whitespace().map(|t| t.parse().unwrap()).collect()
    }

    #[test]
    fn figure_one_annotation() {
        let ann = Annotation::new(
            "weather/find",
            vec![SlotSpan::new("location", 4, 4), SlotSpan::new("datetime", 5, 5)],
        );
        assert_eq!(spans_to_bio(&ann, 6).unwrap(), tags("O O O O B-location B-datetime"));
    }

    #[test]
    fn no_slots_all_outside() {
        let ann = Annotation::new("x", vec![]);
        assert_eq!(spans_to_bio(&ann, 3).unwrap(), vec![Tag::O; 3]);
    }

    #[test]
    fn overlapping_spans_rejected() {
        let ann = Annotation::new("x", vec![SlotSpan::new("a", 0, 2), SlotSpan::new("b", 2, 3)]);
        assert!(spans_to_bio(&ann, 4).is_err());
    }

    #[test]
    fn orphan_inside_is_repaired() {
        assert_eq!(repair_bio(&tags("O I-datetime")), tags("O B-datetime"));
        assert_eq!(bio_to_spans(&tags("O I-datetime")), vec![SlotSpan::new("datetime", 1, 1)]);
        // label change mid-run starts a new span
        assert_eq!(
            bio_to_spans(&tags("B-a I-b I-b")),
            vec![SlotSpan::new("a", 0, 0), SlotSpan::new("b", 1, 2)]
        );
    }

    #[test]
    fn simple_conversions() {
        assert_eq!(bio_to_spans(&tags("B-loc I-loc O")), vec![SlotSpan::new("loc", 0, 1)]);
        assert!(bio_to_spans(&tags("O O O")).is_empty());
        assert!("X-loc".parse::<Tag>().is_err());
        assert!("B-".parse::<Tag>().is_err());
    }

    pub(crate) fn valid_annotation() -> impl Strategy<Value = (Annotation, usize)> {
        (1usize..15, prop::collection::vec((0usize..3, 1usize..4, 0usize..3), 0..6)).prop_map(
            |(lead, pieces)| {
                let labels = ["loc", "date", "time"];
                let mut pos = lead - 1;
                let mut slots = Vec::new();
                for (gap, len, lab) in pieces {
                    let start = pos + gap;
                    let end = start + len - 1;
                    slots.push(SlotSpan::new(labels[lab], start, end));
                    pos = end + 1;
                }
                let n = pos + 1;
                (Annotation::new("intent", slots), n)
            },
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn round_trip((ann, n) in valid_annotation()) {
            let bio = spans_to_bio(&ann, n).unwrap();
            prop_assert_eq!(bio.len(), n);
            prop_assert_eq!(bio_to_spans(&bio), ann.slots);
        }

        #[test]
        fn repaired_output_is_well_formed(raw in prop::collection::vec(0usize..5, 0..12)) {
            let pool = [Tag::O, Tag::B("a".into()), Tag::I("a".into()), Tag::B("b".into()), Tag::I("b".into())];
            let seq: TagSequence = raw.into_iter().map(|i| pool[i].clone()).collect();
            let spans = bio_to_spans(&seq);
            let ann = Annotation::new("x", spans.clone());
            prop_assert!(ann.validate(seq.len().max(1)).is_ok());
            prop_assert_eq!(bio_to_spans(&spans_to_bio(&ann, seq.len().max(1)).unwrap()), spans);
        }
    }
}
