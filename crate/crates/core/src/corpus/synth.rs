//! Synthetic grammar and corpus generator for desk-scale experiments.
//!
//! Grammar file syntax (one directive per line, `#` comments):
//!
//! ```text
//! intent weather/find
//! template what is the weather in {location} {datetime}
//! slot location
//! value new york
//! rule synonym sunset => dusk
//! ```
//!
//! `template` lines attach to the preceding `intent`, `value` lines to the
//! preceding `slot`. Rules never shape training sentences; they are applied
//! only to build the held-out perturbation set (and by the rule paraphraser).

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::rules::{RuleSet, Sentence};
use super::{Annotation, LabelSpace, LabeledExample, Rule, SlotSpan, Utterance};
use crate::error::{Error, Result};

pub const DEFAULT_GRAMMAR: &str = include_str!("../../data/weather_alarm.grammar");

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Piece {
    Word(String),
    Slot(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticGrammar {
    pub intents: Vec<(String, Vec<Vec<Piece>>)>,
    pub lexicons: BTreeMap<String, Vec<Vec<String>>>,
    pub rules: RuleSet,
}

impl SyntheticGrammar {
    pub fn builtin() -> Self {
        SyntheticGrammar::parse(DEFAULT_GRAMMAR).expect("bundled grammar parses")
    }

    pub fn load(path: &Path) -> Result<Self> {
        SyntheticGrammar::parse(&std::fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut intents: Vec<(String, Vec<Vec<Piece>>)> = Vec::new();
        let mut lexicons: BTreeMap<String, Vec<Vec<String>>> = BTreeMap::new();
        let mut rules = Vec::new();
        let mut current_slot: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let lineno = i + 1;
            let err = |m: String| Error::Parse { line: lineno, message: m };
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (kw, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
            let rest = rest.trim();
            match kw {
                "intent" if !rest.is_empty() => {
                    intents.push((rest.to_string(), Vec::new()));
                    current_slot = None;
                }
                "template" => {
                    let (_, templates) = intents
                        .last_mut()
                        .ok_or_else(|| err("template before any intent".into()))?;
                    let pieces: Vec<Piece> = rest
                        .split_whitespace()
                        .map(|w| match w.strip_prefix('{').and_then(|w| w.strip_suffix('}')) {
                            Some(slot) => Piece::Slot(slot.to_string()),
                            None => Piece::Word(w.to_lowercase()),
                        })
                        .collect();
                    if pieces.is_empty() {
                        return Err(err("empty template".into()));
                    }
                    templates.push(pieces);
                }
                "slot" if !rest.is_empty() => {
                    lexicons.entry(rest.to_string()).or_default();
                    current_slot = Some(rest.to_string());
                }
                "value" => {
                    let slot = current_slot.as_ref().ok_or_else(|| err("value before any slot".into()))?;
                    let words: Vec<String> = rest.split_whitespace().map(str::to_lowercase).collect();
                    if words.is_empty() {
                        return Err(err("empty value".into()));
                    }
                    lexicons.get_mut(slot).expect("slot registered").push(words);
                }
                "rule" => rules.push(Rule::parse(rest).map_err(|e| err(e.to_string()))?),
                _ => return Err(err(format!("unknown directive `{kw}`"))),
            }
        }
        let g = SyntheticGrammar {
            intents,
            lexicons,
            rules: RuleSet::new(rules),
        };
        g.validate()?;
        Ok(g)
    }

    fn validate(&self) -> Result<()> {
        for (intent, templates) in &self.intents {
            if templates.is_empty() {
                return Err(Error::Precondition(format!("intent `{intent}` has no templates")));
            }
            for t in templates {
                for p in t {
                    if let Piece::Slot(s) = p {
                        match self.lexicons.get(s) {
                            Some(v) if !v.is_empty() => {}
                            _ => {
                                return Err(Error::Precondition(format!(
                                    "template of `{intent}` uses slot `{s}` without values"
                                )))
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn label_space(&self) -> Result<LabelSpace> {
        LabelSpace::new(
            self.intents.iter().map(|(i, _)| i.clone()),
            self.lexicons.keys().cloned(),
        )
    }

    fn instantiate<R: Rng + ?Sized>(&self, rng: &mut R) -> (String, Vec<String>, Vec<SlotSpan>) {
        let (intent, templates) = self.intents.choose(rng).expect("nonempty grammar");
        let template = templates.choose(rng).expect("nonempty templates");
        let mut tokens = Vec::new();
        let mut spans = Vec::new();
        for piece in template {
            match piece {
                Piece::Word(w) => tokens.push(w.clone()),
                Piece::Slot(s) => {
                    let value = self.lexicons[s].choose(rng).expect("nonempty lexicon");
                    let start = tokens.len();
                    tokens.extend(value.iter().cloned());
                    spans.push(SlotSpan::new(s.clone(), start, tokens.len() - 1));
                }
            }
        }
        (intent.clone(), tokens, spans)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSizes {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub label_space: LabelSpace,
    pub train: Vec<LabeledExample>,
    pub dev: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
    /// Rule-perturbed copies of test sentences with gold labels carried over.
    pub perturbed: Vec<LabeledExample>,
    /// Index into `test` of the sentence each perturbed example came from.
    pub perturbed_from: Vec<usize>,
}

/// Samples unique sentences for each split (disjoint across splits) and
/// perturbs each test sentence with one or two held-out rules.
pub fn generate_synthetic(grammar: &SyntheticGrammar, seed: u64, sizes: SynthSizes) -> Result<SyntheticCorpus> {
    if grammar.intents.len() < 4 || grammar.lexicons.len() < 3 {
        return Err(Error::Precondition(format!(
            "synthetic grammar needs ≥ 4 intents and ≥ 3 slot labels (has {} and {})",
            grammar.intents.len(),
            grammar.lexicons.len()
        )));
    }
    let label_space = grammar.label_space()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen: HashSet<String> = HashSet::new();
    let mut draw = |n: usize, split: &str, rng: &mut ChaCha8Rng| -> Result<Vec<LabeledExample>> {
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while out.len() < n {
            attempts += 1;
            if attempts > 200 * n + 1000 {
                return Err(Error::Precondition(format!(
                    "grammar too small to draw {n} unique `{split}` sentences"
                )));
            }
            let (intent, tokens, spans) = grammar.instantiate(rng);
            let text = tokens.join(" ");
            if !seen.insert(text.clone()) {
                continue;
            }
            let utt = Utterance::new(format!("synth-{split}-{}", out.len()), text)?;
            out.push(LabeledExample::clean(utt, Annotation::new(intent, spans)));
        }
        Ok(out)
    };
    let train = draw(sizes.train, "train", &mut rng)?;
    let dev = draw(sizes.dev, "dev", &mut rng)?;
    let test = draw(sizes.test, "test", &mut rng)?;

    let mut perturbed = Vec::new();
    let mut perturbed_from = Vec::new();
    for (i, ex) in test.iter().enumerate() {
        let base = Sentence::annotated(ex.utterance.tokens.clone(), ex.annotation.slots.clone());
        let first = grammar.rules.applicable(&base);
        let Some((_, mut s)) = first.choose(&mut rng).cloned() else {
            continue;
        };
        if rng.random_bool(0.5) {
            if let Some((_, s2)) = grammar.rules.applicable(&s).choose(&mut rng).cloned() {
                s = s2;
            }
        }
        let spans = s.spans.take().expect("annotated rewrite keeps spans");
        let utt = Utterance::from_tokens(format!("synth-perturbed-{}", perturbed.len()), s.tokens)?;
        let ann = Annotation::new(ex.annotation.intent.clone(), spans);
        ann.validate(utt.len())?;
        perturbed.push(LabeledExample::new(utt, ann, super::Origin::Adversarial, 1.0)?);
        perturbed_from.push(i);
    }

    Ok(SyntheticCorpus {
        label_space,
        train,
        dev,
        test,
        perturbed,
        perturbed_from,
    })
}
