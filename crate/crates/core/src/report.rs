//! Clean vs. adversarial exact-match reports: one row per model variant,
//! one column per test set, plus the adversarial average.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::corpus::{Annotation, LabeledExample};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::tagger::{ensemble_predict, exact_match, predict, TaggerModel};

/// A named evaluation set.
#[derive(Clone, Copy, Debug)]
pub struct TestSet<'a> {
    pub name: &'a str,
    pub examples: &'a [LabeledExample],
}

/// A model, or an ensemble of models whose logits are averaged.
#[derive(Clone, Debug)]
pub struct Variant<'a> {
    pub name: String,
    pub models: Vec<&'a TaggerModel>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetScore {
    pub name: String,
    pub size: usize,
    /// Exact-match accuracy in percent.
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub variant: String,
    pub clean: SetScore,
    /// One entry per adversarial set (usually one per paraphrase source).
    pub adversarial: Vec<SetScore>,
    pub adversarial_average: f64,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

/// Arithmetic mean; `None` for an empty slice.
pub fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

impl ReportRow {
    /// Builds a row from precomputed accuracies.
    pub fn from_scores(variant: impl Into<String>, clean: SetScore, adversarial: Vec<SetScore>) -> Self {
        let accs: Vec<f64> = adversarial.iter().map(|s| s.accuracy).collect();
        ReportRow {
            variant: variant.into(),
            clean,
            adversarial_average: mean(&accs).unwrap_or(f64::NAN),
            adversarial,
            meta: BTreeMap::new(),
        }
    }
}

fn score(variant: &Variant<'_>, set: &TestSet<'_>, exec: Execution) -> Result<SetScore> {
    if set.examples.is_empty() {
        return Err(Error::Precondition(format!("test set `{}` is empty", set.name)));
    }
    let preds = exec.map(set.examples, |e| match variant.models.as_slice() {
        [m] => predict(m, &e.utterance),
        ms => ensemble_predict(ms, &e.utterance),
    });
    let preds: Vec<_> = preds.into_iter().collect::<Result<_>>()?;
    let golds: Vec<Annotation> = set.examples.iter().map(|e| e.annotation.clone()).collect();
    Ok(SetScore {
        name: set.name.to_string(),
        size: set.examples.len(),
        accuracy: 100.0 * exact_match(&preds, &golds)?,
    })
}

/// Scores every variant on the clean set and each adversarial set.
pub fn make_report(variants: &[Variant<'_>], clean: TestSet<'_>, adversarial: &[TestSet<'_>], exec: Execution) -> Result<EvalReport> {
    if adversarial.is_empty() {
        return Err(Error::Precondition("report needs at least one adversarial set".into()));
    }
    for s in std::iter::once(&clean).chain(adversarial) {
        if s.examples.is_empty() {
            return Err(Error::Precondition(format!("test set `{}` is empty", s.name)));
        }
    }
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        if v.models.is_empty() {
            return Err(Error::Precondition(format!("variant `{}` has no models", v.name)));
        }
        let c = score(v, &clean, exec)?;
        let adv = adversarial.iter().map(|s| score(v, s, exec)).collect::<Result<Vec<_>>>()?;
        let mut row = ReportRow::from_scores(v.name.clone(), c, adv);
        row.meta.insert("models".into(), v.models.len().to_string());
        rows.push(row);
    }
    Ok(EvalReport { rows })
}

impl EvalReport {
    /// One JSON record per row.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl<R: BufRead>(reader: R) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            rows.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        Ok(EvalReport { rows })
    }

    /// Aligned text table. Columns follow the first row's adversarial sets.
    pub fn to_table(&self) -> String {
        let mut header = vec!["Model".to_string(), "Clean".to_string()];
        if let Some(r) = self.rows.first() {
            header.extend(r.adversarial.iter().map(|s| s.name.clone()));
        }
        header.push("Adv avg".to_string());
        let mut cells: Vec<Vec<String>> = vec![header];
        for r in &self.rows {
            let mut line = vec![r.variant.clone(), format!("{:.1}", r.clean.accuracy)];
            line.extend(r.adversarial.iter().map(|s| format!("{:.1}", s.accuracy)));
            line.push(format!("{:.1}", r.adversarial_average));
            cells.push(line);
        }
        let ncol = cells.iter().map(Vec::len).max().unwrap_or(0);
        let widths: Vec<usize> = (0..ncol)
            .map(|c| cells.iter().filter_map(|l| l.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, line) in cells.iter().enumerate() {
            let mut text = String::new();
            for (c, cell) in line.iter().enumerate() {
                if c == 0 {
                    let _ = write!(text, "{cell:<w$}", w = widths[c]);
                } else {
                    let _ = write!(text, "  {cell:>w$}", w = widths[c]);
                }
            }
            out.push_str(text.trim_end());
            out.push('\n');
            if i == 0 {
                let total: usize = widths.iter().sum::<usize>() + 2 * ncol.saturating_sub(1);
                out.push_str(&"-".repeat(total));
                out.push('\n');
            }
        }
        out
    }
}
