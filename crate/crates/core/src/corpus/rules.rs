//! Token-level rewrite rules shared by the synthetic perturbation generator
//! and the rule-based paraphraser.
//!
//! Rules operate on a token sequence with optional slot spans. When spans are
//! present they are kept consistent with the rewrite (and never rewritten
//! themselves); without spans, rules that need them do not apply.

use serde::{Deserialize, Serialize};

use super::SlotSpan;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Rule {
    /// Replace the first occurrence of `from` (outside slots) with `to`.
    Synonym { from: Vec<String>, to: Vec<String> },
    /// Insert a phrase at the start.
    Prefix { words: Vec<String> },
    /// Append a phrase at the end.
    Suffix { words: Vec<String> },
    /// Move a sentence-final slot, together with an immediately preceding
    /// word from `lead`, to the front.
    Reorder { lead: Vec<String> },
}

/// Tokens plus (optionally) their slot spans.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Sentence {
    pub tokens: Vec<String>,
    pub spans: Option<Vec<SlotSpan>>,
}

impl Sentence {
    pub fn plain(tokens: Vec<String>) -> Self {
        Sentence { tokens, spans: None }
    }

    pub fn annotated(tokens: Vec<String>, spans: Vec<SlotSpan>) -> Self {
        Sentence {
            tokens,
            spans: Some(spans),
        }
    }

    fn in_slot(&self, i: usize) -> bool {
        self.spans
            .as_ref()
            .is_some_and(|sp| sp.iter().any(|s| s.start <= i && i <= s.end))
    }
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_lowercase).collect()
}

fn shift(spans: &mut [SlotSpan], from: usize, delta: isize) {
    for s in spans.iter_mut().filter(|s| s.start >= from) {
        s.start = (s.start as isize + delta) as usize;
        s.end = (s.end as isize + delta) as usize;
    }
}

impl Rule {
    pub fn synonym(from: &str, to: &str) -> Self {
        Rule::Synonym {
            from: words(from),
            to: words(to),
        }
    }

    pub fn prefix(phrase: &str) -> Self {
        Rule::Prefix { words: words(phrase) }
    }

    pub fn suffix(phrase: &str) -> Self {
        Rule::Suffix { words: words(phrase) }
    }

    pub fn reorder(lead: &str) -> Self {
        Rule::Reorder { lead: words(lead) }
    }

    /// Parses `synonym a b => c`, `prefix ...`, `suffix ...`, `reorder w1 w2`.
    pub fn parse(line: &str) -> Result<Self> {
        let line = line.trim();
        let (kind, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
        let rest = rest.trim();
        let bad = |m: &str| Error::Parse {
            line: 0,
            message: format!("rule `{line}`: {m}"),
        };
        match kind {
            "synonym" => {
                let (a, b) = rest.split_once("=>").ok_or_else(|| bad("expected `from => to`"))?;
                let rule = Rule::synonym(a, b);
                match &rule {
                    Rule::Synonym { from, to } if !from.is_empty() && !to.is_empty() && from != to => Ok(rule),
                    _ => Err(bad("empty or identical phrases")),
                }
            }
            "prefix" | "suffix" if rest.is_empty() => Err(bad("missing phrase")),
            "prefix" => Ok(Rule::prefix(rest)),
            "suffix" => Ok(Rule::suffix(rest)),
            "reorder" => Ok(Rule::reorder(rest)),
            _ => Err(bad("unknown rule kind")),
        }
    }

    /// Applies the rule, or returns `None` when it does not apply or would
    /// leave the sentence unchanged.
    pub fn apply(&self, s: &Sentence) -> Option<Sentence> {
        let out = match self {
            Rule::Synonym { from, to } => {
                let n = from.len();
                if s.tokens.len() < n {
                    return None;
                }
                let pos = (0..=s.tokens.len() - n)
                    .find(|&i| s.tokens[i..i + n] == from[..] && (i..i + n).all(|j| !s.in_slot(j)))?;
                let mut tokens = s.tokens[..pos].to_vec();
                tokens.extend(to.iter().cloned());
                tokens.extend(s.tokens[pos + n..].iter().cloned());
                let spans = s.spans.clone().map(|mut sp| {
                    shift(&mut sp, pos + n, to.len() as isize - n as isize);
                    sp
                });
                Sentence { tokens, spans }
            }
            Rule::Prefix { words } => {
                if s.tokens.starts_with(words) {
                    return None;
                }
                let mut tokens = words.clone();
                tokens.extend(s.tokens.iter().cloned());
                let spans = s.spans.clone().map(|mut sp| {
                    shift(&mut sp, 0, words.len() as isize);
                    sp
                });
                Sentence { tokens, spans }
            }
            Rule::Suffix { words } => {
                if s.tokens.ends_with(words) {
                    return None;
                }
                let mut tokens = s.tokens.clone();
                tokens.extend(words.iter().cloned());
                Sentence {
                    tokens,
                    spans: s.spans.clone(),
                }
            }
            Rule::Reorder { lead } => {
                let spans = s.spans.as_ref()?;
                let last = spans.last()?;
                if last.end + 1 != s.tokens.len() {
                    return None;
                }
                let mut start = last.start;
                if start > 0 && !s.in_slot(start - 1) && lead.contains(&s.tokens[start - 1]) {
                    start -= 1;
                }
                if start == 0 {
                    return None;
                }
                let moved = s.tokens.len() - start;
                let mut tokens = s.tokens[start..].to_vec();
                tokens.extend(s.tokens[..start].iter().cloned());
                let offset = last.start - start;
                let mut new_spans = vec![SlotSpan::new(last.label.clone(), offset, offset + last.len() - 1)];
                for sp in &spans[..spans.len() - 1] {
                    new_spans.push(SlotSpan::new(sp.label.clone(), sp.start + moved, sp.end + moved));
                }
                Sentence {
                    tokens,
                    spans: Some(new_spans),
                }
            }
        };
        (out.tokens != s.tokens).then_some(out)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleSet {
    pub rules: Vec<Rule>,
}

impl RuleSet {
    pub fn new(rules: Vec<Rule>) -> Self {
        RuleSet { rules }
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    /// One rule per line; blank lines and `#` comments ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rules = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            rules.push(Rule::parse(line).map_err(|e| match e {
                Error::Parse { message, .. } => Error::Parse { line: i + 1, message },
                other => other,
            })?);
        }
        Ok(RuleSet { rules })
    }

    pub fn applicable(&self, s: &Sentence) -> Vec<(usize, Sentence)> {
        self.rules
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.apply(s).map(|o| (i, o)))
            .collect()
    }
}
