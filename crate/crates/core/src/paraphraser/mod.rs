//! Paraphrase generation: an external back-translation adapter, a noisy
//! sequence autoencoder and a rule-based rewriter, plus the dedupe rules and
//! the paraphrase cache format shared by all of them.

use std::collections::HashSet;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::rules::Sentence;
use crate::corpus::{RuleSet, Utterance};
use crate::error::{Error, Result};
use crate::seed::{self, stream};

pub mod adapter;
pub mod seq2seq;

pub use adapter::{backtranslate, Adapter, AdapterFailure, AdapterRequest, AdapterResponse, FnAdapter, ProcessAdapter, ADAPTER_ENV};
pub use seq2seq::{train_autoencoder, AutoencoderConfig, Hypothesis, Seq2SeqModel};

/// Where a paraphrase set came from.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Source {
    /// Back-translation through `adapter` with auxiliary language `language`.
    BackTranslation { adapter: String, language: String },
    Seq2Seq,
    RuleBased,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::BackTranslation { adapter, language } => write!(f, "bt:{adapter}:{language}"),
            Source::Seq2Seq => f.write_str("seq2seq"),
            Source::RuleBased => f.write_str("rulebased"),
        }
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seq2seq" => Ok(Source::Seq2Seq),
            "rulebased" => Ok(Source::RuleBased),
            _ => {
                let parts: Vec<&str> = s.split(':').collect();
                match parts.as_slice() {
                    ["bt", adapter, language] if !adapter.is_empty() && !language.is_empty() => Ok(Source::BackTranslation {
                        adapter: adapter.to_string(),
                        language: language.to_string(),
                    }),
                    _ => Err(Error::Validation {
                        field: "source".into(),
                        message: format!("expected `bt:<adapter>:<lang>`, `seq2seq` or `rulebased`, got `{s}`"),
                    }),
                }
            }
        }
    }
}

impl TryFrom<String> for Source {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Source> for String {
    fn from(s: Source) -> String {
        s.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Beam {
    pub text: String,
    pub score: f64,
    /// Decoding hit the length limit before emitting end-of-sentence.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub truncated: bool,
}

impl Beam {
    pub fn new(text: impl Into<String>, score: f64) -> Self {
        Beam {
            text: text.into(),
            score,
            truncated: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParaphraseSet {
    pub original_id: String,
    pub source: Source,
    pub beams: Vec<Beam>,
}

pub fn normalize(text: &str) -> String {
    crate::corpus::tokenize(text).join(" ")
}

/// Drops beams whose normalised text is in `reference` or repeats an
/// earlier beam. Order is preserved.
pub fn dedupe(beams: Vec<Beam>, reference: &HashSet<String>) -> Vec<Beam> {
    let mut seen = HashSet::new();
    beams
        .into_iter()
        .filter(|b| {
            let key = normalize(&b.text);
            !key.is_empty() && !reference.contains(&key) && seen.insert(key)
        })
        .collect()
}

impl ParaphraseSet {
    /// Caps at `k` beams, then removes the original and internal duplicates.
    pub fn build(original: &Utterance, source: Source, mut beams: Vec<Beam>, k: usize) -> Self {
        beams.truncate(k);
        let reference: HashSet<String> = [original.normalized()].into_iter().collect();
        ParaphraseSet {
            original_id: original.id.clone(),
            source,
            beams: dedupe(beams, &reference),
        }
    }

    /// Removes beams already present in `reference` (e.g. the training data).
    pub fn dedupe_against(&mut self, reference: &HashSet<String>) {
        self.beams = dedupe(std::mem::take(&mut self.beams), reference);
    }

    /// Checks the set invariants against its original.
    pub fn check(&self, original: &Utterance, k: usize) -> Result<()> {
        if self.beams.len() > k {
            return Err(Error::Invariant(format!("{} beams exceed k = {k}", self.beams.len())));
        }
        let orig = original.normalized();
        let mut seen = HashSet::new();
        for b in &self.beams {
            let key = normalize(&b.text);
            if key == orig {
                return Err(Error::Invariant(format!("beam `{}` equals the original", b.text)));
            }
            if !seen.insert(key) {
                return Err(Error::Invariant(format!("duplicate beam `{}`", b.text)));
            }
        }
        Ok(())
    }
}

/// Up to `k` distinct rewrites of `utterance`: single-rule rewrites first,
/// then two-rule compositions, each tier shuffled by `seed`.
pub fn rule_paraphrase(utterance: &Utterance, rules: &RuleSet, seed: u64, k: usize) -> ParaphraseSet {
    let base = Sentence::plain(utterance.tokens.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[stream::RULES]));
    let mut first: Vec<Sentence> = rules.applicable(&base).into_iter().map(|(_, s)| s).collect();
    let mut second: Vec<Sentence> = first.iter().flat_map(|s| rules.applicable(s).into_iter().map(|(_, s2)| s2)).collect();
    first.shuffle(&mut rng);
    second.shuffle(&mut rng);
    let beams = first
        .into_iter()
        .map(|s| Beam::new(s.tokens.join(" "), -1.0))
        .chain(second.into_iter().map(|s| Beam::new(s.tokens.join(" "), -2.0)));
    let reference: HashSet<String> = [utterance.normalized()].into_iter().collect();
    let mut beams = dedupe(beams.collect(), &reference);
    beams.truncate(k);
    ParaphraseSet {
        original_id: utterance.id.clone(),
        source: Source::RuleBased,
        beams,
    }
}

/// One line of the paraphrase cache.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CacheRecord {
    Set(ParaphraseSet),
    Failure(AdapterFailure),
}

impl CacheRecord {
    pub fn original_id(&self) -> &str {
        match self {
            CacheRecord::Set(s) => &s.original_id,
            CacheRecord::Failure(f) => &f.original_id,
        }
    }
}

impl From<std::result::Result<ParaphraseSet, AdapterFailure>> for CacheRecord {
    fn from(r: std::result::Result<ParaphraseSet, AdapterFailure>) -> Self {
        match r {
            Ok(s) => CacheRecord::Set(s),
            Err(f) => CacheRecord::Failure(f),
        }
    }
}

pub fn read_cache(path: impl AsRef<Path>) -> Result<Vec<CacheRecord>> {
    let f = File::open(path.as_ref())?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn append_cache(path: impl AsRef<Path>, records: &[CacheRecord]) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn beams(xs: &[&str]) -> Vec<Beam> {
        xs.iter().enumerate().map(|(i, t)| Beam::new(*t, -(i as f64))).collect()
    }

    fn texts(b: &[Beam]) -> Vec<&str> {
        b.iter().map(|b| b.text.as_str()).collect()
    }

    #[test]
    fn dedupe_examples() {
        let r: HashSet<String> = ["foo bar".to_string()].into();
        assert_eq!(texts(&dedupe(beams(&["Foo Bar", "foo bar", "foo baz"]), &r)), ["foo baz"]);
        assert_eq!(texts(&dedupe(beams(&["a", "A", "b"]), &HashSet::new())), ["a", "b"]);
        assert!(dedupe(beams(&["foo bar", "FOO BAR"]), &r).is_empty());
    }

    #[test]
    fn source_round_trip() {
        for s in ["bt:nematus:es", "seq2seq", "rulebased"] {
            let src: Source = s.parse().unwrap();
            assert_eq!(src.to_string(), s);
            let json = serde_json::to_string(&src).unwrap();
            assert_eq!(serde_json::from_str::<Source>(&json).unwrap(), src);
        }
        assert!("bt:x".parse::<Source>().is_err());
    }

    #[test]
    fn rule_examples() {
        let rules = RuleSet::parse("synonym dusk => sunset\n").unwrap();
        let u = Utterance::new("u1", "when is dusk").unwrap();
        let p = rule_paraphrase(&u, &rules, 0, 5);
        assert_eq!(texts(&p.beams), ["when is sunset"]);
        assert_eq!(p.source, Source::RuleBased);
        let none = rule_paraphrase(&Utterance::new("u2", "set an alarm").unwrap(), &rules, 0, 5);
        assert!(none.beams.is_empty());
    }

    #[test]
    fn rule_paraphrase_is_seeded_and_capped() {
        let g = crate::corpus::SyntheticGrammar::builtin();
        let u = Utterance::new("u", "when is sunset in paris").unwrap();
        let a = rule_paraphrase(&u, &g.rules, 4, 5);
        assert_eq!(a, rule_paraphrase(&u, &g.rules, 4, 5));
        assert_eq!(a.beams.len(), 5);
        a.check(&u, 5).unwrap();
        assert!(a.beams.windows(2).all(|w| w[0].score >= w[1].score));
        let all = rule_paraphrase(&u, &g.rules, 4, 1000);
        assert!(all.beams.len() > 5);
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let set = ParaphraseSet {
            original_id: "a".into(),
            source: Source::Seq2Seq,
            beams: vec![Beam {
                text: "x y".into(),
                score: -0.25,
                truncated: true,
            }],
        };
        let fail = AdapterFailure {
            original_id: "b".into(),
            source: Source::RuleBased,
            error: "timed out".into(),
        };
        let recs = vec![CacheRecord::Set(set), CacheRecord::Failure(fail)];
        append_cache(&path, &recs[..1]).unwrap();
        append_cache(&path, &recs[1..]).unwrap();
        assert_eq!(read_cache(&path).unwrap(), recs);
        std::fs::write(&path, "{\"nope\":1}\n").unwrap();
        assert!(matches!(read_cache(&path), Err(Error::Parse { line: 1, .. })));
    }

    fn word() -> impl Strategy<Value = String> {
        prop::sample::select(vec!["foo", "Foo", "bar", "BAR", "baz", "qux"]).prop_map(String::from)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn dedupe_properties(
            beam_words in prop::collection::vec(prop::collection::vec(word(), 1..3), 0..10),
            ref_words in prop::collection::vec(prop::collection::vec(word(), 1..3), 0..4),
        ) {
            let bs: Vec<Beam> = beam_words.iter().map(|w| Beam::new(w.join(" "), 0.0)).collect();
            let reference: HashSet<String> = ref_words.iter().map(|w| normalize(&w.join(" "))).collect();
            let out = dedupe(bs.clone(), &reference);
            let keys: Vec<String> = out.iter().map(|b| normalize(&b.text)).collect();
            let uniq: HashSet<&String> = keys.iter().collect();
            prop_assert_eq!(uniq.len(), keys.len());
            prop_assert!(keys.iter().all(|k| !reference.contains(k)));
            // order preserved: output is a subsequence of the input
            let mut it = bs.iter();
            for b in &out {
                prop_assert!(it.any(|x| x == b));
            }
            // nothing dropped that should have been kept
            let expected: HashSet<String> = bs.iter().map(|b| normalize(&b.text)).filter(|k| !reference.contains(k)).collect();
            prop_assert_eq!(uniq.len(), expected.len());
        }
    }
}
